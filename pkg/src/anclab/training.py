"""Dataset synthesis, the residual-power training objective, and the
end-to-end differentiable training loop.

Each training sample is one second of unit-RMS band-limited noise with a
band drawn uniformly inside 20-1900 Hz.  A frame goes through the
co-processor to produce control-filter taps; the taps are applied to the
same frame's filtered reference (with 10 dB sensor noise injected there,
and only there); the weighted mean of the squared residual is the loss;
gradients flow through the plant back into the network.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.signal import fftconvolve

from . import autodiff as ad
from . import dsp
from .acoustics import AcousticScene
from .autodiff import Tensor
from .checkpoint import Checkpoint, state_of, load_into
from .dsp import FirFilter, Signal
from .models import CONTROL_LEN, E2eCfgModel, GfancModel, SubFilterBank, build_subfilter_bank, pretrain_wideband_filter
from .optim import Adam, step_lr
from .rng import RngSpec

_SPLIT_TAGS = {"train": 0x7E41, "val": 0x7A1, "test": 0x7E57}


@dataclass(frozen=True)
class DatasetSpec:
    n_train: int
    n_val: int
    n_test: int
    rng: RngSpec
    duration_s: float = 1.0
    sample_rate_hz: float = 13000.0
    band_low_hz: float = 20.0
    band_high_hz: float = 1900.0
    min_bandwidth_hz: float = 100.0
    snr_db: float = 10.0

    def validate(self):
        if min(self.n_train, self.n_val, self.n_test) <= 0:
            raise ValueError("split counts must be positive")
        if self.band_low_hz + self.min_bandwidth_hz > self.band_high_hz:
            raise ValueError("min bandwidth exceeds the band span")


@dataclass(frozen=True)
class SampleSpec:
    stream_id: int
    low_hz: float
    high_hz: float


class Dataset:
    """Lazily synthesized noise samples, addressed by a reproducible manifest."""

    def __init__(self, spec: DatasetSpec, splits: dict[str, list[SampleSpec]]):
        self.spec = spec
        self.splits = splits

    def __getitem__(self, split: str) -> list[SampleSpec]:
        return self.splits[split]

    def sizes(self) -> dict[str, int]:
        return {k: len(v) for k, v in self.splits.items()}

    def realize(self, sample: SampleSpec) -> Signal:
        noise_rng = RngSpec(self.spec.rng.seed, sample.stream_id).derive(1)
        return dsp.generate_bandlimited_noise(
            sample.low_hz,
            sample.high_hz,
            self.spec.duration_s,
            self.spec.sample_rate_hz,
            noise_rng,
        )

    def manifest(self) -> dict:
        return {
            split: [asdict(s) for s in samples] for split, samples in self.splits.items()
        }

    def write_manifest(self, path) -> None:
        doc = {"spec": _spec_dict(self.spec), "splits": self.manifest()}
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, sort_keys=True, indent=1)


def _spec_dict(spec: DatasetSpec) -> dict:
    d = asdict(spec)
    d["rng"] = {"seed": spec.rng.seed, "stream_id": spec.rng.stream_id}
    return d


def generate_dataset(spec: DatasetSpec) -> Dataset:
    """Draw per-sample bands; signal synthesis is deferred to ``realize``.

    Every sample owns a distinct derived stream id, and the split tags make
    the train/val/test streams disjoint by construction.
    """
    spec.validate()
    splits: dict[str, list[SampleSpec]] = {}
    counts = {"train": spec.n_train, "val": spec.n_val, "test": spec.n_test}
    lo, hi, min_bw = spec.band_low_hz, spec.band_high_hz, spec.min_bandwidth_hz
    for split, count in counts.items():
        tag = _SPLIT_TAGS[split]
        samples = []
        for i in range(count):
            stream = spec.rng.derive(tag, i)
            for attempt in range(3):
                g = stream.derive(0, attempt).generator()
                low = g.uniform(lo, hi - min_bw)
                bw = g.uniform(min_bw, hi - low)
                if bw >= min_bw and low + bw <= hi:
                    break
            else:
                raise ValueError(f"degenerate band for sample {split}/{i}")
            samples.append(SampleSpec(stream.stream_id, float(low), float(low + bw)))
        splits[split] = samples
    return Dataset(spec, splits)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def forgetting_weights(frame_len: int, lam: float, newest_heaviest: bool = True) -> np.ndarray:
    """Per-sample weights alpha_n = lam^(T-1-n): the forgetting factor
    discounts the past, so late (steady-state) samples weigh the most."""
    if not 0.0 < lam <= 1.0:
        raise ValueError("forgetting factor must be in (0, 1]")
    exponents = np.arange(frame_len - 1, -1, -1, dtype=np.float64)
    if not newest_heaviest:
        exponents = exponents[::-1]
    return lam ** exponents


def loss_frame(e, weights: np.ndarray | None = None) -> float:
    """(1/T) sum alpha_n e[n]^2; uniform when weights is None."""
    samples = e.samples if isinstance(e, Signal) else np.asarray(e, dtype=np.float64)
    t = samples.size
    if weights is None:
        return float(np.mean(samples**2, dtype=np.float64))
    if weights.shape != samples.shape:
        raise ValueError("length mismatch between error and weights")
    return float(np.sum(weights * samples**2, dtype=np.float64) / t)


def filter_grad_oracle(e, x_f, weights: np.ndarray | None = None, n_taps: int = CONTROL_LEN) -> np.ndarray:
    """Closed-form dLoss/dw_k = -(2/T) sum_n alpha_n e[n] x'[n-k].

    Independent of the tape: used to validate the gradient that flows
    through the plant.
    """
    ev = e.samples if isinstance(e, Signal) else np.asarray(e, dtype=np.float64)
    xv = x_f.samples if isinstance(x_f, Signal) else np.asarray(x_f, dtype=np.float64)
    t = ev.size
    alpha_e = ev if weights is None else weights * ev
    corr = fftconvolve(alpha_e, xv[::-1])
    return -2.0 / t * corr[t - 1 : t - 1 + n_taps]


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    rng: RngSpec
    model_kind: str = "e2ecfg"  # or "gfanc"
    d_model: int = 256
    heads: int = 8
    d_ff: int = 1024
    dropout: float = 0.1
    token_pool: str = "mean"
    control_len: int = CONTROL_LEN
    n_subfilters: int = 15
    lr0: float = 5e-4
    weight_decay: float = 1e-4
    batch_size: int = 128
    epochs: int = 40
    scheduler_step: int = 5
    scheduler_gamma: float = 0.5
    loss_mode: str = "weighted"  # or "uniform"
    forgetting_lambda: float = 0.999
    sensor_snr_db: float = 10.0
    grad_clip: float | None = None

    def validate(self):
        if self.lr0 < 0 or self.batch_size <= 0 or self.epochs < 0:
            raise ValueError("invalid training hyperparameters")
        if self.model_kind not in ("e2ecfg", "gfanc"):
            raise ValueError(f"unknown model kind {self.model_kind!r}")
        if self.loss_mode not in ("weighted", "uniform"):
            raise ValueError(f"unknown loss mode {self.loss_mode!r}")

    def hash(self) -> str:
        doc = asdict(self)
        doc["rng"] = [self.rng.seed, self.rng.stream_id]
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    train_loss: list[float]  # per-epoch mean
    val_loss: list[float]
    best_epoch: int


def build_model(config: TrainConfig, scene: AcousticScene):
    """Model plus (for GFANC) its frozen sub-filter bank."""
    model_rng = config.rng.derive(0x10DE1)
    if config.model_kind == "e2ecfg":
        model = E2eCfgModel(
            model_rng,
            d_model=config.d_model,
            heads=config.heads,
            d_ff=config.d_ff,
            dropout_p=config.dropout,
            control_len=config.control_len,
            token_pool=config.token_pool,
        )
        return model, None
    model = GfancModel(model_rng, n_weights=config.n_subfilters)
    wideband = pretrain_wideband_filter(scene, config.rng.derive(0xBA2C), config.control_len)
    bank = build_subfilter_bank(wideband, config.n_subfilters)
    return model, bank


def _filters_from(model, bank, frames_f32, train, generator):
    out = model.forward(frames_f32, train=train, generator=generator)
    if bank is None:
        return out
    bank_mat = Tensor(bank.sub_filters.astype(np.float32))
    return ad.matmul(out, bank_mat)


def _batch_loss(w_taps, d, xf, alpha_over_t):
    """Tape loss for one batch: mean over frames of (1/T) sum alpha e^2.

    Plant arithmetic runs in float64: the float32 network taps are cast up
    before entering the convolution.
    """
    y = ad.fir_apply(ad.cast(w_taps, np.float64), xf)
    e = ad.sub(Tensor(d), y)
    weighted = ad.mul(ad.mul(e, e), Tensor(alpha_over_t[None, :]))
    return ad.scale(ad.sum_(weighted), 1.0 / d.shape[0])


def _sensor_noisy(xf: np.ndarray, snr_db: float, generator) -> np.ndarray:
    if snr_db is None or math.isinf(snr_db):
        return xf
    v = generator.standard_normal(xf.shape)
    p_sig = np.mean(xf**2, axis=1, keepdims=True)
    p_v = np.mean(v**2, axis=1, keepdims=True)
    return xf + v * np.sqrt(p_sig / 10.0 ** (snr_db / 10.0) / p_v)


def train(config: TrainConfig, dataset: Dataset, scene: AcousticScene) -> TrainResult:
    """Run the full loop and return the best-validation checkpoint."""
    config.validate()
    model, bank = build_model(config, scene)
    params = list(model.named_parameters())
    adam = Adam(params, lr=config.lr0, weight_decay=config.weight_decay)
    dropout_gen = config.rng.derive(0xD0).generator()

    frame_len = int(round(dataset.spec.duration_s * dataset.spec.sample_rate_hz))
    alpha = (
        forgetting_weights(frame_len, config.forgetting_lambda)
        if config.loss_mode == "weighted"
        else np.ones(frame_len)
    )
    alpha_over_t = alpha / frame_len

    def materialize(samples):
        xs, ds, xfs = [], [], []
        for s in samples:
            x = dataset.realize(s)
            xs.append(x.samples.astype(np.float32))
            ds.append(dsp.convolve(x, scene.primary).samples)
            xfs.append(dsp.convolve(x, scene.secondary_estimate).samples)
        return np.stack(xs), np.stack(ds), np.stack(xfs)

    x_tr, d_tr, xf_tr = materialize(dataset["train"])
    x_va, d_va, xf_va = materialize(dataset["val"])
    n_train = len(x_tr)

    def validation_loss():
        total = 0.0
        for start in range(0, len(x_va), config.batch_size):
            sl = slice(start, start + config.batch_size)
            w = _filters_from(model, bank, Tensor(x_va[sl]), False, None)
            loss = _batch_loss(w, d_va[sl], xf_va[sl], alpha_over_t)
            total += loss.item() * len(x_va[sl])
        return total / len(x_va)

    train_hist: list[float] = []
    val_hist: list[float] = []
    best_epoch = 0
    best_val = validation_loss()
    val_hist.append(best_val)
    best_params = {name: p.values.copy() for name, p in params}
    best_buffers = {name: b.values.copy() for name, b in model.named_buffers()}

    for epoch in range(config.epochs):
        adam.lr = step_lr(config.lr0, config.scheduler_step, config.scheduler_gamma, epoch)
        order = config.rng.derive(0x0E, epoch).generator().permutation(n_train)
        epoch_losses = []
        for batch_idx, start in enumerate(range(0, n_train, config.batch_size)):
            idx = order[start : start + config.batch_size]
            noise_gen = config.rng.derive(0x5E, epoch, batch_idx).generator()
            xf_noisy = _sensor_noisy(xf_tr[idx], config.sensor_snr_db, noise_gen)
            adam.zero_grad()
            w = _filters_from(model, bank, Tensor(x_tr[idx]), True, dropout_gen)
            loss = _batch_loss(w, d_tr[idx], xf_noisy, alpha_over_t)
            if not np.isfinite(loss.item()):
                raise FloatingPointError(
                    f"non-finite loss at epoch {epoch} batch {batch_idx}"
                )
            ad.backward(loss, leaves=[p for _, p in params])
            if config.grad_clip:
                total = math.sqrt(
                    sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for _, p in params)
                )
                if total > config.grad_clip:
                    for _, p in params:
                        p.grad *= config.grad_clip / total
            adam.step()
            epoch_losses.append(loss.item())
        train_hist.append(float(np.mean(epoch_losses)))
        val = validation_loss()
        val_hist.append(val)
        if val < best_val:
            best_val = val
            best_epoch = epoch + 1
            best_params = {name: p.values.copy() for name, p in params}
            best_buffers = {name: b.values.copy() for name, b in model.named_buffers()}

    ckpt_params = dict(best_params)
    ckpt_params.update(best_buffers)
    if bank is not None:
        for i in range(bank.size):
            ckpt_params[f"bank.sub.{i}"] = bank.sub_filters[i]
        ckpt_params["bank.source"] = bank.source.taps
    metadata = {
        "model_kind": config.model_kind,
        "d_model": config.d_model,
        "heads": config.heads,
        "d_ff": config.d_ff,
        "dropout": config.dropout,
        "token_pool": config.token_pool,
        "control_len": config.control_len,
        "n_subfilters": config.n_subfilters,
        "epochs": config.epochs,
        "best_epoch": best_epoch,
        "train_loss": train_hist,
        "val_loss": val_hist,
        "config_hash": config.hash(),
    }
    ckpt = Checkpoint(
        params=ckpt_params,
        opt_params=adam.state_arrays(),
        metadata=metadata,
    )
    return TrainResult(
        checkpoint=ckpt, train_loss=train_hist, val_loss=val_hist, best_epoch=best_epoch
    )


def model_from_checkpoint(ckpt: Checkpoint):
    """Rebuild the co-processor (and bank, if any) stored in a checkpoint."""
    meta = ckpt.metadata
    rng = RngSpec(0)  # weights come from the file; init seed is irrelevant
    model_params = {k: v for k, v in ckpt.params.items() if not k.startswith("bank.")}
    if meta["model_kind"] == "e2ecfg":
        model = E2eCfgModel(
            rng,
            d_model=meta["d_model"],
            heads=meta["heads"],
            d_ff=meta["d_ff"],
            dropout_p=meta["dropout"],
            control_len=meta["control_len"],
            token_pool=meta["token_pool"],
        )
        load_into(model, model_params)
        return model, None
    model = GfancModel(rng, n_weights=meta["n_subfilters"])
    load_into(model, model_params)
    n = meta["n_subfilters"]
    subs = np.stack([ckpt.params[f"bank.sub.{i}"].astype(np.float64) for i in range(n)])
    source = FirFilter(ckpt.params["bank.source"].astype(np.float64))
    return model, SubFilterBank(sub_filters=subs, source=source)


def frame_nr_db(model, bank, x: Signal, scene: AcousticScene) -> float:
    """Same-frame NR of the generated filter (training-time coupling)."""
    w = _filters_from(model, bank, Tensor(x.samples[None, :].astype(np.float32)), False, None)
    xf = dsp.convolve(x, scene.secondary_estimate)
    d = dsp.convolve(x, scene.primary)
    y = fftconvolve(xf.samples, w.values[0].astype(np.float64))[: len(x)]
    e = d.samples - y
    return dsp.power_db_ratio(Signal(d.samples, x.sample_rate_hz), Signal(e, x.sample_rate_hz))
