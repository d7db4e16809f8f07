"""The simulated ANC plant.

A scene is the triple (primary path P, secondary path S, secondary-path
estimate S_hat).  Paths are synthesized as delayed band-limited FIRs:
the disturbance d = P*x arrives at the error position, the controller
drives the actuator whose response is S, and S_hat is what the adaptive /
learned algorithms believe S to be (identical by default).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import dsp
from .dsp import FirFilter, Signal
from .rng import RngSpec


@dataclass(frozen=True)
class SceneConfig:
    """Knobs for synthetic acoustic-path generation.

    Defaults give a 10-3000 Hz band-limited plant at 13 kHz with a 30
    sample causality margin for the feedforward controller, and a secondary
    path of realistic sub-unity gain (an actuator-to-error-sensor link is
    weaker than the direct acoustic path).
    """

    sample_rate_hz: float = 13000.0
    band_low_hz: float = 10.0
    band_high_hz: float = 3000.0
    primary_len: int = 256
    primary_delay: int = 40
    secondary_len: int = 128
    secondary_delay: int = 10
    secondary_gain: float = 0.3
    estimate_error: float = 0.0  # relative tap-energy of the S_hat perturbation

    def validate(self):
        nyq = self.sample_rate_hz / 2.0
        if not (0.0 < self.band_low_hz < self.band_high_hz < nyq):
            raise ValueError("invalid band")
        if self.primary_delay <= 0 or self.secondary_delay <= 0:
            raise ValueError("delays must be positive")
        if self.primary_len <= self.primary_delay or self.secondary_len <= self.secondary_delay:
            raise ValueError("path length must exceed its delay")
        if self.secondary_delay >= self.primary_delay:
            raise ValueError("non-causal scene")
        if self.estimate_error < 0:
            raise ValueError("estimate_error must be non-negative")


@dataclass(frozen=True)
class AcousticScene:
    """Immutable plant description: P, S and the estimate S_hat."""

    primary: FirFilter
    secondary: FirFilter
    secondary_estimate: FirFilter
    sample_rate_hz: float

    def __post_init__(self):
        def first_nonzero(f):
            idx = np.nonzero(f.taps)[0]
            return int(idx[0]) if idx.size else len(f.taps)

        if first_nonzero(self.primary) < first_nonzero(self.secondary):
            raise ValueError("non-causal scene")


def _delayed_bandpass(config: SceneConfig, total_len: int, delay: int) -> np.ndarray:
    n_bp = total_len - delay
    if n_bp % 2 == 0:
        n_bp -= 1
    bp = dsp.design_bandpass_fir(
        config.band_low_hz, config.band_high_hz, n_bp, config.sample_rate_hz
    )
    taps = np.zeros(total_len)
    taps[delay : delay + n_bp] = bp.taps
    return taps


def synthesize_scene(config: SceneConfig, rng: RngSpec) -> AcousticScene:
    """Deterministically build a scene from its config and seed.

    The seed only matters when ``estimate_error`` > 0, where S_hat is S plus
    seeded Gaussian taps scaled to the configured relative energy.
    """
    config.validate()
    primary = _delayed_bandpass(config, config.primary_len, config.primary_delay)
    secondary = (
        _delayed_bandpass(config, config.secondary_len, config.secondary_delay)
        * config.secondary_gain
    )

    estimate = secondary.copy()
    if config.estimate_error > 0.0:
        g = rng.derive(0x5CE11E).generator()
        noise = g.standard_normal(len(secondary))
        target = config.estimate_error * float(np.sum(secondary**2))
        noise *= np.sqrt(target / float(np.sum(noise**2)))
        estimate = secondary + noise

    return AcousticScene(
        primary=FirFilter(primary),
        secondary=FirFilter(secondary),
        secondary_estimate=FirFilter(estimate),
        sample_rate_hz=config.sample_rate_hz,
    )


def _check_rate(x: Signal, scene: AcousticScene):
    if x.sample_rate_hz != scene.sample_rate_hz:
        raise ValueError("sample rate mismatch between signal and scene")


def disturbance(x: Signal, scene: AcousticScene) -> Signal:
    """d = P * x, the noise reaching the error position."""
    _check_rate(x, scene)
    return dsp.convolve(x, scene.primary)


def filtered_reference(x: Signal, scene: AcousticScene) -> Signal:
    """x' = S_hat * x, the regressor of the adaptive/learned controllers."""
    _check_rate(x, scene)
    return dsp.convolve(x, scene.secondary_estimate)


def apply_control(x_f: Signal, w: FirFilter, control_len: int | None = None) -> Signal:
    """Anti-noise y[n] = sum_k w[k] x'[n-k] for a fixed control filter."""
    if control_len is not None and len(w) != control_len:
        raise ValueError("control length mismatch")
    return dsp.convolve(x_f, w)


def residual(d: Signal, y: Signal) -> Signal:
    """e = d - y, the remaining noise after cancellation."""
    if len(d) != len(y):
        raise ValueError("length mismatch")
    if d.sample_rate_hz != y.sample_rate_hz:
        raise ValueError("sample rate mismatch")
    return Signal(d.samples - y.samples, d.sample_rate_hz)


def perturbed(config: SceneConfig, **changes) -> SceneConfig:
    """Convenience copy-with-changes for experiment sweeps."""
    return replace(config, **changes)
