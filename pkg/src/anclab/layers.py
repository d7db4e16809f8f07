"""Neural network layers on top of the tape.

Exactly the layer set the two co-processors need: conv-1d, batch norm,
ReLU, max pooling, dropout, linear, layer norm, softmax, multi-head
self-attention, sinusoidal positional encoding and a pre-norm transformer
encoder layer.  Weights are seeded uniform fan-in; all layers exist in
float32 (default) or float64 (for gradient verification) builds of the
same code.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rng import RngSpec


def _uniform_init(generator, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(
        generator.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True
    )


class Layer:
    """Base: parameter registry plus train/eval dispatch."""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield f"{prefix}{name}", value
            elif isinstance(value, Layer):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Layer):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def named_buffers(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and not value.requires_grad:
                yield f"{prefix}{name}", value
            elif isinstance(value, Layer):
                yield from value.named_buffers(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Layer):
                        yield from item.named_buffers(f"{prefix}{name}.{i}.")

    def __call__(self, x, train=False, generator=None):
        return self.forward(x, train=train, generator=generator)


class Linear(Layer):
    def __init__(self, in_features, out_features, rng: RngSpec, dtype=np.float32):
        g = rng.generator()
        self.weight = _uniform_init(g, (in_features, out_features), in_features, dtype)
        self.bias = _uniform_init(g, (out_features,), in_features, dtype)

    def forward(self, x, train=False, generator=None):
        return ad.add(ad.matmul(x, self.weight), self.bias)


class Conv1d(Layer):
    def __init__(self, in_ch, out_ch, kernel, stride, padding, rng: RngSpec, dtype=np.float32):
        g = rng.generator()
        fan_in = in_ch * kernel
        self.weight = _uniform_init(g, (out_ch, in_ch, kernel), fan_in, dtype)
        self.bias = _uniform_init(g, (out_ch,), fan_in, dtype)
        self.stride = stride
        self.padding = padding

    def forward(self, x, train=False, generator=None):
        return ad.conv1d(x, self.weight, self.bias, self.stride, self.padding)

    @staticmethod
    def output_length(length, kernel, stride, padding):
        return (length + 2 * padding - kernel) // stride + 1


class BatchNorm1d(Layer):
    """Channel-wise batch norm over (batch, channels, length).

    Train mode normalizes with batch statistics and updates the running
    estimates in place (biased variance for normalization, unbiased for the
    running estimate); eval mode is the affine map given by the running
    statistics.
    """

    def __init__(self, channels, rng: RngSpec, momentum=0.1, eps=1e-5, dtype=np.float32):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = Tensor(np.zeros(channels, dtype=dtype))
        self.running_var = Tensor(np.ones(channels, dtype=dtype))
        self.momentum = momentum
        self.eps = eps

    def forward(self, x, train=False, generator=None):
        gamma = ad.reshape(self.gamma, (1, -1, 1))
        beta = ad.reshape(self.beta, (1, -1, 1))
        if train:
            mu = ad.mean(x, axis=(0, 2), keepdims=True)
            centered = ad.sub(x, mu)
            var = ad.mean(ad.mul(centered, centered), axis=(0, 2), keepdims=True)
            inv = ad.powf(ad.add(var, np.asarray(self.eps, dtype=x.dtype)), -0.5)
            out = ad.add(ad.mul(ad.mul(centered, inv), gamma), beta)
            n = x.shape[0] * x.shape[2]
            batch_var = var.values.reshape(-1) * n / max(n - 1, 1)
            m = self.momentum
            self.running_mean.values = (
                (1 - m) * self.running_mean.values + m * mu.values.reshape(-1)
            ).astype(self.running_mean.dtype)
            self.running_var.values = (
                (1 - m) * self.running_var.values + m * batch_var
            ).astype(self.running_var.dtype)
            return out
        inv = 1.0 / np.sqrt(self.running_var.values + self.eps)
        a = (self.gamma.values * inv).reshape(1, -1, 1)
        b = (self.beta.values - self.gamma.values * inv * self.running_mean.values).reshape(1, -1, 1)
        return ad.add(ad.mul(x, Tensor(a.astype(x.dtype))), Tensor(b.astype(x.dtype)))


class MaxPool1d(Layer):
    def __init__(self, kernel, stride):
        self.kernel = kernel
        self.stride = stride

    def forward(self, x, train=False, generator=None):
        return ad.maxpool1d(x, self.kernel, self.stride)

    @staticmethod
    def output_length(length, kernel, stride):
        return (length - kernel) // stride + 1


class Dropout(Layer):
    def __init__(self, p):
        self.p = p

    def forward(self, x, train=False, generator=None):
        if train and generator is None:
            raise ValueError("dropout in train mode needs a generator")
        return ad.dropout(x, self.p, generator, train)


class LayerNorm(Layer):
    """Normalization over the last axis."""

    def __init__(self, dim, rng: RngSpec, eps=1e-5, dtype=np.float32):
        self.gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
        self.eps = eps

    def forward(self, x, train=False, generator=None):
        mu = ad.mean(x, axis=-1, keepdims=True)
        centered = ad.sub(x, mu)
        var = ad.mean(ad.mul(centered, centered), axis=-1, keepdims=True)
        inv = ad.powf(ad.add(var, np.asarray(self.eps, dtype=x.dtype)), -0.5)
        return ad.add(ad.mul(ad.mul(centered, inv), self.gamma), self.beta)


class PositionalEncoding(Layer):
    """Fixed sinusoids (even indices sine, odd cosine, base 10000)."""

    def __init__(self, d_model, max_len=912, dtype=np.float32):
        pos = np.arange(max_len, dtype=np.float64)[:, None]
        i = np.arange(d_model, dtype=np.float64)[None, :]
        angle = pos / np.power(10000.0, 2.0 * (i // 2) / d_model)
        table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
        self.table = table.astype(dtype)
        self.max_len = max_len

    def forward(self, x, train=False, generator=None):
        tokens = x.shape[1]
        if tokens > self.max_len:
            raise ValueError("sequence exceeds positional encoding")
        return ad.add(x, Tensor(self.table[None, :tokens, :]))


class MultiHeadSelfAttention(Layer):
    """Scaled dot-product self-attention over (batch, tokens, d_model)."""

    def __init__(self, d_model, heads, rng: RngSpec, dtype=np.float32):
        if d_model % heads != 0:
            raise ValueError("d_model must be divisible by heads")
        self.heads = heads
        self.d_model = d_model
        self.q = Linear(d_model, d_model, rng.derive(1), dtype)
        self.k = Linear(d_model, d_model, rng.derive(2), dtype)
        self.v = Linear(d_model, d_model, rng.derive(3), dtype)
        self.out = Linear(d_model, d_model, rng.derive(4), dtype)

    def forward(self, x, train=False, generator=None):
        batch, tokens, _ = x.shape
        d_head = self.d_model // self.heads

        def split(t):
            t = ad.reshape(t, (batch, tokens, self.heads, d_head))
            return ad.transpose(t, (0, 2, 1, 3))  # (batch, heads, tokens, d_head)

        q = split(self.q(x))
        k = split(self.k(x))
        v = split(self.v(x))
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(d_head))
        attn = ad.softmax(scores, axis=-1)
        ctx = ad.matmul(attn, v)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (batch, tokens, self.d_model))
        return self.out(ctx)


class FeedForward(Layer):
    def __init__(self, d_model, d_ff, rng: RngSpec, dtype=np.float32):
        self.lin1 = Linear(d_model, d_ff, rng.derive(1), dtype)
        self.lin2 = Linear(d_ff, d_model, rng.derive(2), dtype)

    def forward(self, x, train=False, generator=None):
        return self.lin2(ad.relu(self.lin1(x)))


class TransformerEncoderLayer(Layer):
    """Pre-norm encoder block: x + Drop(Attn(LN(x))), then + Drop(FF(LN(.)))."""

    def __init__(self, d_model, heads, d_ff, dropout_p, rng: RngSpec, dtype=np.float32):
        self.norm1 = LayerNorm(d_model, rng.derive(1), dtype=dtype)
        self.attn = MultiHeadSelfAttention(d_model, heads, rng.derive(2), dtype)
        self.drop1 = Dropout(dropout_p)
        self.norm2 = LayerNorm(d_model, rng.derive(3), dtype=dtype)
        self.ff = FeedForward(d_model, d_ff, rng.derive(4), dtype)
        self.drop2 = Dropout(dropout_p)

    def forward(self, x, train=False, generator=None):
        h = ad.add(x, self.drop1(self.attn(self.norm1(x)), train, generator))
        return ad.add(h, self.drop2(self.ff(self.norm2(h)), train, generator))
