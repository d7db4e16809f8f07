"""Minimal reverse-mode automatic differentiation on numpy arrays.

Every operation builds a node in an implicit graph (the tape): the node
stores its parents and a closure that pushes the output gradient back to
them.  ``backward`` walks the recorded graph once in reverse topological
order.  Values are float32 by default with float64 accumulation in
reductions; the same code paths run unchanged in float64 for gradient
verification.
"""

from __future__ import annotations

import numpy as np
from scipy.signal import fftconvolve


class Tensor:
    """An n-dimensional array tracked by the tape."""

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward", "_grad_owned")

    def __init__(self, values, requires_grad=False, _parents=(), _backward=None):
        self.values = np.asarray(values)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self._grad_owned = False

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, dtype={self.values.dtype}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.values)

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def accumulate_grad(self, g, own: bool = False):
        """Add a gradient contribution.

        ``own=True`` promises ``g`` is a freshly allocated array this node
        may keep (and later mutate); views and shared buffers are stored
        as-is on first contribution but never written through.  A node's
        stored grad is only read after all contributions have arrived
        (reverse topological order guarantees it), so aliasing a child's
        finished gradient is safe.
        """
        if self.grad is None:
            self.grad = g
            self._grad_owned = own
        elif self._grad_owned and self.grad.flags.writeable:
            self.grad += g
        else:
            self.grad = self.grad + g
            self._grad_owned = True

    # operator sugar; the real work happens in the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def backward(loss: Tensor, leaves=()) -> None:
    """Populate gradients of everything reachable from ``loss``.

    ``loss`` must be scalar.  Leaves passed explicitly that do not
    participate in the graph receive a zero gradient, so callers can always
    read ``leaf.grad`` after this returns.
    """
    if loss.values.size != 1:
        raise ValueError("loss must be scalar")

    # iterative topological sort (reverse post-order)
    order = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.values)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)

    for leaf in leaves:
        if leaf.requires_grad and leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.values)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)), dtype=np.float64)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True, dtype=np.float64)
    return g


def _node(values, parents, backward_fn):
    req = any(p.requires_grad for p in parents)
    return Tensor(values, requires_grad=req, _parents=tuple(parents) if req else (),
                  _backward=backward_fn if req else None)


# ---------------------------------------------------------------------------
# elementwise and arithmetic ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out_values = a.values + b.values

    def push(g):
        if a.requires_grad:
            ga = _unbroadcast(g, a.shape).astype(a.dtype, copy=False)
            a.accumulate_grad(ga, own=ga is not g)
        if b.requires_grad:
            gb = _unbroadcast(g, b.shape).astype(b.dtype, copy=False)
            b.accumulate_grad(gb, own=gb is not g)

    return _node(out_values, (a, b), push)


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out_values = a.values - b.values

    def push(g):
        if a.requires_grad:
            ga = _unbroadcast(g, a.shape).astype(a.dtype, copy=False)
            a.accumulate_grad(ga, own=ga is not g)
        if b.requires_grad:
            b.accumulate_grad(-_unbroadcast(g, b.shape).astype(b.dtype, copy=False), own=True)

    return _node(out_values, (a, b), push)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out_values = a.values * b.values

    def push(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.values, a.shape).astype(a.dtype, copy=False), own=True)
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.values, b.shape).astype(b.dtype, copy=False), own=True)

    return _node(out_values, (a, b), push)


def scale(a: Tensor, c: float) -> Tensor:
    out_values = a.values * a.dtype.type(c)

    def push(g):
        if a.requires_grad:
            a.accumulate_grad(g * a.dtype.type(c), own=True)

    return _node(out_values, (a,), push)


def powf(a: Tensor, p: float) -> Tensor:
    """Elementwise power for strictly positive bases (used for x^-0.5)."""
    out_values = a.values ** p

    def push(g):
        if a.requires_grad:
            a.accumulate_grad((g * p * a.values ** (p - 1.0)).astype(a.dtype, copy=False), own=True)

    return _node(out_values, (a,), push)


def relu(a: Tensor) -> Tensor:
    out_values = np.maximum(a.values, 0)

    def push(g):
        if a.requires_grad:
            a.accumulate_grad(g * (a.values > 0), own=True)

    return _node(out_values, (a,), push)


def sigmoid(a: Tensor) -> Tensor:
    out_values = 1.0 / (1.0 + np.exp(-a.values))

    def push(g):
        if a.requires_grad:
            a.accumulate_grad((g * out_values * (1.0 - out_values)).astype(a.dtype, copy=False), own=True)

    return _node(out_values, (a,), push)


def cast(a: Tensor, dtype) -> Tensor:
    dtype = np.dtype(dtype)
    out_values = a.values.astype(dtype)

    def push(g):
        if a.requires_grad:
            a.accumulate_grad(g.astype(a.dtype), own=True)

    return _node(out_values, (a,), push)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    old_shape = a.shape
    out_values = a.values.reshape(shape)

    def push(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(old_shape))

    return _node(out_values, (a,), push)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    index = [slice(None)] * a.values.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out_values = a.values[index]

    def push(g):
        if a.requires_grad:
            ga = np.zeros_like(a.values)
            ga[index] = g
            a.accumulate_grad(ga, own=True)

    return _node(out_values, (a,), push)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out_values = a.values.transpose(axes)

    def push(g):
        if a.requires_grad:
            a.accumulate_grad(g.transpose(inv))

    return _node(out_values, (a,), push)


# ---------------------------------------------------------------------------
# reductions (float64 accumulation)
# ---------------------------------------------------------------------------

def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out_values = a.values.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def push(g):
        if not a.requires_grad:
            return
        if axis is None:
            a.accumulate_grad(np.broadcast_to(g, a.shape).astype(a.dtype, copy=False))
            return
        gg = g if keepdims else np.expand_dims(g, axis)
        a.accumulate_grad(np.broadcast_to(gg, a.shape).astype(a.dtype, copy=False))

    return _node(out_values, (a,), push)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        count = a.values.size
    else:
        ax = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[i] for i in ax]))
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# matmul (2-D weights or equal-batch operands)
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    out_values = a.values @ b.values

    def push(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.values, -1, -2)
            a.accumulate_grad(_unbroadcast(ga, a.shape).astype(a.dtype, copy=False), own=True)
        if b.requires_grad:
            gb = np.swapaxes(a.values, -1, -2) @ g
            b.accumulate_grad(_unbroadcast(gb, b.shape).astype(b.dtype, copy=False), own=True)

    return _node(out_values, (a, b), push)


# ---------------------------------------------------------------------------
# neural-net specific ops
# ---------------------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    ex = np.exp(a.values - a.values.max(axis=axis, keepdims=True))
    denom = ex.sum(axis=axis, keepdims=True, dtype=np.float64).astype(a.dtype)
    np.divide(ex, denom, out=ex)
    out_values = ex

    def push(g):
        if a.requires_grad:
            t = g * out_values
            inner = t.sum(axis=axis, keepdims=True, dtype=np.float64).astype(a.dtype)
            t -= out_values * inner
            a.accumulate_grad(t, own=True)

    return _node(out_values, (a,), push)


def dropout(a: Tensor, p: float, generator: np.random.Generator, train: bool) -> Tensor:
    """Inverted dropout: identity in eval mode, seeded mask and 1/(1-p) scale in train."""
    if not train or p == 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout probability must be in [0, 1)")
    mask = (generator.random(a.shape) >= p).astype(a.dtype) / a.dtype.type(1.0 - p)
    out_values = a.values * mask

    def push(g):
        if a.requires_grad:
            a.accumulate_grad(g * mask, own=True)

    return _node(out_values, (a,), push)


def conv1d(x: Tensor, w: Tensor, b: Tensor, stride: int, padding: int) -> Tensor:
    """Cross-correlation conv over (batch, channels, length) input.

    Output length is floor((L + 2*padding - kernel) / stride) + 1.
    """
    batch, c_in, length = x.shape
    c_out, c_in_w, kernel = w.shape
    if c_in != c_in_w:
        raise ValueError(
            f"conv1d: input has {c_in} channels but weight expects {c_in_w}"
        )
    l_out = (length + 2 * padding - kernel) // stride + 1
    if l_out <= 0:
        raise ValueError("conv1d: input shorter than kernel")

    xp = np.pad(x.values, ((0, 0), (0, 0), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, kernel, axis=2)[:, :, ::stride, :]
    # (batch, l_out, c_in*kernel) @ (c_in*kernel, c_out)
    cols = windows.transpose(0, 2, 1, 3).reshape(batch, l_out, c_in * kernel)
    wmat = w.values.reshape(c_out, c_in * kernel).T
    out_values = (cols @ wmat + b.values).transpose(0, 2, 1)

    def push(g):
        gcols = g.transpose(0, 2, 1)  # (batch, l_out, c_out)
        if b.requires_grad:
            b.accumulate_grad(gcols.sum(axis=(0, 1), dtype=np.float64).astype(b.dtype), own=True)
        if w.requires_grad:
            gw = gcols.reshape(batch * l_out, c_out).T @ cols.reshape(batch * l_out, -1)
            w.accumulate_grad(gw.reshape(c_out, c_in, kernel).astype(w.dtype, copy=False), own=True)
        if x.requires_grad:
            gpatch = gcols @ wmat.T  # (batch, l_out, c_in*kernel)
            gpatch = gpatch.reshape(batch, l_out, c_in, kernel).transpose(0, 2, 1, 3)
            gx = np.zeros_like(xp)
            for k in range(kernel):
                gx[:, :, k : k + stride * l_out : stride] += gpatch[:, :, :, k]
            if padding:
                gx = gx[:, :, padding:-padding]
            x.accumulate_grad(np.ascontiguousarray(gx), own=True)

    return _node(out_values, (x, w, b), push)


def maxpool1d(x: Tensor, kernel: int, stride: int) -> Tensor:
    """Max pooling over the last axis of (batch, channels, length)."""
    batch, ch, length = x.shape
    l_out = (length - kernel) // stride + 1
    if l_out <= 0:
        raise ValueError("maxpool1d: input shorter than kernel")
    windows = np.lib.stride_tricks.sliding_window_view(x.values, kernel, axis=2)[:, :, ::stride, :]
    arg = windows.argmax(axis=3)
    out_values = np.take_along_axis(windows, arg[..., None], axis=3)[..., 0]

    def push(g):
        if not x.requires_grad:
            return
        gx = np.zeros_like(x.values)
        if kernel <= stride:
            # windows are disjoint: scatter without collision handling
            gwin = np.zeros(arg.shape + (kernel,), dtype=x.dtype)
            np.put_along_axis(gwin, arg[..., None], g[..., None], axis=3)
            for k in range(kernel):
                gx[:, :, k : k + stride * l_out : stride] += gwin[:, :, :, k]
        else:
            starts = np.arange(l_out) * stride
            flat_pos = starts[None, None, :] + arg
            np.add.at(
                gx.reshape(batch * ch, length),
                (
                    np.repeat(np.arange(batch * ch), l_out),
                    flat_pos.reshape(batch * ch, l_out).ravel(),
                ),
                g.reshape(batch * ch, l_out).ravel(),
            )
        x.accumulate_grad(gx, own=True)

    return _node(out_values, (x,), push)


def fir_apply(w: Tensor, x_f: np.ndarray) -> Tensor:
    """Anti-noise through the tape: y[b, n] = sum_k w[b, k] * x_f[b, n-k].

    ``x_f`` is a fixed (batch, frame) array of filtered-reference samples;
    only the generated filter taps ``w`` (batch, taps) carry gradient.
    Forward and backward both run as FFT convolutions in the dtype of x_f.
    """
    batch, n_taps = w.shape
    xb, frame = x_f.shape
    if xb != batch:
        raise ValueError("fir_apply: batch mismatch")
    wv = w.values.astype(x_f.dtype, copy=False)
    out_values = fftconvolve(x_f, wv, axes=1)[:, :frame]

    def push(g):
        if w.requires_grad:
            # dL/dw[b,k] = sum_n g[b,n] x_f[b,n-k]  (correlation at non-negative lags)
            corr = fftconvolve(g, x_f[:, ::-1], axes=1)
            gw = corr[:, frame - 1 : frame - 1 + n_taps]
            w.accumulate_grad(np.ascontiguousarray(gw.astype(w.dtype, copy=False)), own=True)

    return _node(out_values, (w,), push)
