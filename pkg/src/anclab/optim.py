"""Adam optimizer, step-decay schedule and finite-difference gradient checks."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Adam:
    """Bias-corrected Adam with coupled L2 weight decay (added to the gradient)."""

    def __init__(self, named_params, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = list(named_params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {name: np.zeros_like(p.values) for name, p in self.params}
        self.v = {name: np.zeros_like(p.values) for name, p in self.params}

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in {name}")
            if self.weight_decay:
                g = g + self.weight_decay * p.values
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.values -= (self.lr * update).astype(p.dtype, copy=False)

    def state_arrays(self):
        """Moment arrays keyed for checkpointing."""
        out = {}
        for name, _ in self.params:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays, step_count):
        for name, p in self.params:
            self.m[name] = arrays[f"opt.m.{name}"].astype(p.dtype).reshape(p.shape)
            self.v[name] = arrays[f"opt.v.{name}"].astype(p.dtype).reshape(p.shape)
        self.step_count = step_count


def step_lr(lr0: float, step_size: int, gamma: float, epoch: int) -> float:
    """Learning rate after step decay: lr0 * gamma^floor(epoch/step_size)."""
    if step_size <= 0:
        raise ValueError("step_size must be positive")
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must be in (0, 1]")
    return lr0 * gamma ** (epoch // step_size)


def grad_check(
    loss_fn,
    named_params,
    h: float = 1e-5,
    max_coords: int | None = None,
    rng=None,
) -> dict:
    """Compare tape gradients against central finite differences.

    ``loss_fn`` re-evaluates the scalar loss from the current parameter
    values.  Returns per-parameter max relative error; parameters should be
    float64 for the comparison to be meaningful at h=1e-5.
    """
    params = list(named_params)
    for _, p in params:
        p.grad = None
    loss = loss_fn()
    ad.backward(loss, leaves=[p for _, p in params])

    analytic = {name: p.grad.copy() for name, p in params}
    report = {}
    for name, p in params:
        flat = p.values.reshape(-1)
        n = flat.size
        if max_coords is not None and n > max_coords:
            g = rng if rng is not None else np.random.default_rng(0)
            idx = g.choice(n, size=max_coords, replace=False)
        else:
            idx = np.arange(n)
        worst = 0.0
        a_flat = analytic[name].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            denom = max(abs(a_flat[i]), abs(numeric), 1e-6)
            worst = max(worst, abs(a_flat[i] - numeric) / denom)
        report[name] = worst
    report["__max__"] = max(v for k, v in report.items() if k != "__max__")
    return report
