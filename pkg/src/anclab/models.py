"""The two filter-generating co-processors and their accounting.

``E2eCfgModel``: waveform frame -> Conv1d front-end -> pre-norm transformer
encoder -> two-layer head -> 512 control-filter taps, trained end-to-end on
residual power.

``GfancModel``: CNN that predicts 15 sigmoid weights over a fixed bank of
sub-filters obtained by partitioning a wideband pre-trained filter in the
frequency domain.

``flops_estimate`` reproduces the complexity accounting used for the
published per-frame figures (782.5 M vs 385.9 M at a 13000-sample frame):
2 FLOPs per multiply-accumulate over the convolutions, the attention
score/context matmuls and the output-head linears.  A "full" convention
that additionally counts the encoder's internal projections, feed-forward,
normalizations and activations is available for absolute costing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import dsp
from .autodiff import Tensor
from .dsp import FirFilter, Signal
from .fxnlms import wiener_oracle
from .layers import (
    BatchNorm1d,
    Conv1d,
    Dropout,
    Layer,
    Linear,
    MaxPool1d,
    PositionalEncoding,
    TransformerEncoderLayer,
)
from .rng import RngSpec

CONTROL_LEN = 512
POSENC_MAX = 912


# ---------------------------------------------------------------------------
# E2E control-filter generator
# ---------------------------------------------------------------------------

class E2eCfgModel(Layer):
    """Transformer-based frame-to-filter regressor.

    The published configuration is d_model=256, 8 heads, one encoder layer,
    feed-forward 1024, dropout 0.1, conv front-end 1->256 (kernel 64,
    stride 4, padding 30) with batch norm and stride-4 max pooling: 16x
    temporal downsampling and 1,201,152 trainable parameters.
    """

    def __init__(
        self,
        rng: RngSpec,
        d_model: int = 256,
        heads: int = 8,
        d_ff: int = 1024,
        dropout_p: float = 0.1,
        control_len: int = CONTROL_LEN,
        token_pool: str = "mean",
        dtype=np.float32,
    ):
        self.d_model = d_model
        self.control_len = control_len
        if token_pool not in ("mean", "first", "max"):
            raise ValueError("token_pool must be one of mean, first, max")
        self.token_pool = token_pool
        self.conv = Conv1d(1, d_model, 64, 4, 30, rng.derive(1), dtype)
        self.bn = BatchNorm1d(d_model, rng.derive(2), dtype=dtype)
        self.pool = MaxPool1d(4, 4)
        self.posenc = PositionalEncoding(d_model, POSENC_MAX, dtype)
        self.encoder = TransformerEncoderLayer(d_model, heads, d_ff, dropout_p, rng.derive(3), dtype)
        self.head1 = Linear(d_model, control_len, rng.derive(4), dtype)
        self.head_drop = Dropout(dropout_p)
        self.head2 = Linear(control_len, control_len, rng.derive(5), dtype)

    @staticmethod
    def token_count(frame_len: int) -> int:
        conv_len = Conv1d.output_length(frame_len, 64, 4, 30)
        return MaxPool1d.output_length(conv_len, 4, 4)

    @staticmethod
    def admissible_frame(frame_len: int) -> bool:
        if frame_len < 68:  # conv needs one full window
            return False
        return 1 <= E2eCfgModel.token_count(frame_len) <= POSENC_MAX

    def forward(self, frames, train=False, generator=None):
        """(batch, frame_len) waveform -> (batch, control_len) filter taps."""
        if isinstance(frames, Tensor):
            x = frames
        else:
            x = Tensor(np.asarray(frames))
        batch, frame_len = x.shape
        if not self.admissible_frame(frame_len):
            raise ValueError("sequence exceeds positional encoding")
        h = ad.reshape(x, (batch, 1, frame_len))
        h = self.pool(ad.relu(self.bn(self.conv(h), train=train)))
        h = ad.transpose(h, (0, 2, 1))  # (batch, tokens, d_model)
        h = self.encoder(self.posenc(h), train=train, generator=generator)
        if self.token_pool == "mean":
            pooled = ad.mean(h, axis=1)
        elif self.token_pool == "max":
            tokens = h.shape[1]
            pooled = ad.maxpool1d(ad.transpose(h, (0, 2, 1)), tokens, tokens)
            pooled = ad.reshape(pooled, (batch, self.d_model))
        else:  # first token
            pooled = ad.reshape(ad.narrow(h, 1, 0, 1), (batch, self.d_model))
        h = self.head_drop(ad.relu(self.head1(pooled)), train=train, generator=generator)
        return self.head2(h)

    def generate_filter(self, frame: Signal) -> FirFilter:
        """Eval-mode single-frame inference."""
        taps = self.forward(frame.samples[None, :].astype(np.float32), train=False)
        return FirFilter(taps.values[0].astype(np.float64))


# ---------------------------------------------------------------------------
# GFANC-style CNN over a sub-filter bank
# ---------------------------------------------------------------------------

class ResidualBlock(Layer):
    """Basic block: two k=3 convolutions with batch norm, identity shortcut."""

    def __init__(self, channels, rng: RngSpec, dtype=np.float32):
        self.conv1 = Conv1d(channels, channels, 3, 1, 1, rng.derive(1), dtype)
        self.bn1 = BatchNorm1d(channels, rng.derive(2), dtype=dtype)
        self.conv2 = Conv1d(channels, channels, 3, 1, 1, rng.derive(3), dtype)
        self.bn2 = BatchNorm1d(channels, rng.derive(4), dtype=dtype)

    def forward(self, x, train=False, generator=None):
        h = ad.relu(self.bn1(self.conv1(x), train=train))
        h = self.bn2(self.conv2(h), train=train)
        return ad.relu(ad.add(h, x))


class GfancModel(Layer):
    """CNN co-processor emitting 15 combination weights in (0, 1)."""

    def __init__(self, rng: RngSpec, channels: int = 128, n_weights: int = 15, dtype=np.float32):
        self.n_weights = n_weights
        self.conv = Conv1d(1, channels, 80, 4, 38, rng.derive(1), dtype)
        self.bn = BatchNorm1d(channels, rng.derive(2), dtype=dtype)
        self.pool = MaxPool1d(4, 4)
        self.block1 = ResidualBlock(channels, rng.derive(3), dtype)
        self.block2 = ResidualBlock(channels, rng.derive(4), dtype)
        self.head = Linear(channels, n_weights, rng.derive(5), dtype)

    def forward(self, frames, train=False, generator=None):
        """(batch, frame_len) waveform -> (batch, n_weights) in (0, 1)."""
        x = frames if isinstance(frames, Tensor) else Tensor(np.asarray(frames))
        batch, frame_len = x.shape
        h = ad.reshape(x, (batch, 1, frame_len))
        h = self.pool(ad.relu(self.bn(self.conv(h), train=train)))
        h = self.block2(self.block1(h, train=train), train=train)
        h = ad.mean(h, axis=2)  # adaptive average pool to one vector
        return ad.sigmoid(self.head(h))


@dataclass(frozen=True)
class SubFilterBank:
    """Frequency-domain partition of a wideband filter into M sub-filters.

    The rFFT bins of the source are split into M contiguous groups (DC in
    group 0, the Nyquist bin in group M-1); each group is inverse
    transformed on its own.  Because the masks partition unity, the
    sub-filters sum back to the source exactly (up to float rounding).
    """

    sub_filters: np.ndarray  # (M, taps)
    source: FirFilter

    @property
    def size(self) -> int:
        return self.sub_filters.shape[0]

    def combine(self, weights: np.ndarray) -> FirFilter:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (self.size,):
            raise ValueError(f"expected {self.size} weights")
        return FirFilter(weights @ self.sub_filters)


def build_subfilter_bank(wideband: FirFilter, n_bands: int = 15) -> SubFilterBank:
    if not 1 <= n_bands <= 256:
        raise ValueError("band count out of range")
    taps = wideband.taps
    spectrum = np.fft.rfft(taps)
    n_bins = spectrum.size
    bin_band = np.minimum((np.arange(n_bins) * n_bands) // n_bins, n_bands - 1)
    subs = np.empty((n_bands, taps.size))
    for band in range(n_bands):
        masked = np.where(bin_band == band, spectrum, 0.0)
        subs[band] = np.fft.irfft(masked, n=taps.size)
    return SubFilterBank(sub_filters=subs, source=wideband)


def gfanc_forward(model: GfancModel, bank: SubFilterBank, frame: Signal) -> FirFilter:
    """Eval-mode GFANC inference: weights from the CNN combine the bank."""
    if bank.size != model.n_weights:
        raise ValueError(f"bank has {bank.size} sub-filters, model expects {model.n_weights}")
    g = model.forward(frame.samples[None, :].astype(np.float32), train=False)
    return bank.combine(g.values[0].astype(np.float64))


def pretrain_wideband_filter(
    scene,
    rng: RngSpec,
    filter_len: int = CONTROL_LEN,
    duration_s: float = 10.0,
    band=(20.0, 1900.0),
) -> FirFilter:
    """Offline least-squares wideband control filter (the bank's source)."""
    noise = dsp.generate_bandlimited_noise(
        band[0], band[1], duration_s, scene.sample_rate_hz, rng.derive(0x9D)
    )
    return wiener_oracle(noise, scene, filter_len)


# ---------------------------------------------------------------------------
# accounting
# ---------------------------------------------------------------------------

def param_count(model: Layer) -> int:
    """Number of trainable scalars (running statistics excluded)."""
    return sum(p.values.size for _, p in model.named_parameters())


@dataclass
class FlopsReport:
    total: float
    by_layer: dict

    def largest(self) -> str:
        return max(self.by_layer, key=self.by_layer.get)


def flops_estimate(model: Layer, frame_len: int, convention: str = "paper") -> FlopsReport:
    """Per-frame forward-pass FLOPs at 2 FLOPs per multiply-accumulate.

    convention="paper" counts the MAC-dominant data path that reproduces
    the published figures: convolutions, attention score/context matmuls
    and the linears outside the encoder.  convention="full" additionally
    counts the encoder's q/k/v/out projections, feed-forward, norms (5
    FLOPs/element), softmax (5/element) and pooling/activations
    (1/element).
    """
    if convention not in ("paper", "full"):
        raise ValueError("convention must be 'paper' or 'full'")
    full = convention == "full"
    layers: dict[str, float] = {}

    if isinstance(model, E2eCfgModel):
        d = model.d_model
        conv_len = Conv1d.output_length(frame_len, 64, 4, 30)
        tokens = MaxPool1d.output_length(conv_len, 4, 4)
        heads = model.encoder.attn.heads
        d_head = d // heads
        d_ff = model.encoder.ff.lin1.weight.shape[1]

        layers["front_conv"] = 2.0 * conv_len * d * 64
        layers["attention"] = 2.0 * 2 * heads * tokens * tokens * d_head
        layers["head"] = 2.0 * (d * model.control_len + model.control_len * model.control_len)
        if full:
            layers["batchnorm"] = 2.0 * conv_len * d
            layers["relu+pool"] = 2.0 * conv_len * d
            layers["posenc"] = 1.0 * tokens * d
            layers["attn_projections"] = 2.0 * 4 * tokens * d * d
            layers["softmax"] = 5.0 * heads * tokens * tokens
            layers["feedforward"] = 2.0 * 2 * tokens * d * d_ff
            layers["layernorm"] = 5.0 * 2 * tokens * d
    elif isinstance(model, GfancModel):
        ch = model.conv.weight.shape[0]
        conv_len = Conv1d.output_length(frame_len, 80, 4, 38)
        pooled = MaxPool1d.output_length(conv_len, 4, 4)
        layers["front_conv"] = 2.0 * conv_len * ch * 80
        layers["res_blocks"] = 2.0 * 4 * pooled * ch * ch * 3
        layers["head"] = 2.0 * ch * model.n_weights
        if full:
            layers["batchnorm"] = 2.0 * (conv_len + 4 * pooled) * ch
            layers["relu+pool"] = 2.0 * conv_len * ch + 4.0 * pooled * ch
            layers["sigmoid"] = 4.0 * model.n_weights
    else:
        raise TypeError(f"no FLOPs model for {type(model).__name__}")

    return FlopsReport(total=float(sum(layers.values())), by_layer=layers)
