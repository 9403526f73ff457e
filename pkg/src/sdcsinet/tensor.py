"""Dense float64 tensors with reverse-mode autodiff.

Covers exactly the primitives the compression network needs: elementwise
arithmetic with broadcasting, matmul, reshape/transpose/slicing, conv2d/conv3d
(im2col + BLAS), per-frame dense layers, last-axis max pooling, an LSTM built
from the primitives, batch norm, activations, and Adam.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A float64 array plus an optional gradient and the closure producing it."""

    __slots__ = ("data", "requires_grad", "grad", "_backward", "_prev")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._backward = None
        self._prev = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(()))

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def backward(self):
        """Reverse-mode pass from a scalar loss; fills .grad on reachable nodes."""
        if self.data.size != 1:
            raise ValueError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for child in node._prev:
                if id(child) not in visited:
                    stack.append((child, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, inputs, backward_fn):
    """Wrap an op result; builds graph edges only when tracking is on."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._prev = tuple(inputs)
        out._backward = backward_fn(out)
    return out


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` (reverses numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(out):
        def run():
            if a.requires_grad:
                a._accumulate(_unbroadcast(out.grad, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(out.grad, b.data.shape))

        return run

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(out):
        def run():
            if a.requires_grad:
                a._accumulate(_unbroadcast(out.grad, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-out.grad, b.data.shape))

        return run

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(out):
        def run():
            if a.requires_grad:
                a._accumulate(_unbroadcast(out.grad * b.data, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(out.grad * a.data, b.data.shape))

        return run

    return _make(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(out):
        def run():
            if a.requires_grad:
                a._accumulate(_unbroadcast(out.grad / b.data, a.data.shape))
            if b.requires_grad:
                b._accumulate(
                    _unbroadcast(-out.grad * a.data / (b.data * b.data), b.data.shape)
                )

        return run

    return _make(a.data / b.data, (a, b), bw)


def power(a, p: float):
    a = _as_tensor(a)
    p = float(p)

    def bw(out):
        def run():
            if a.requires_grad:
                a._accumulate(out.grad * p * a.data ** (p - 1.0))

        return run

    return _make(a.data**p, (a,), bw)


def matmul(a, b):
    """a (..., m, n) @ b (n, k); the right operand is a plain 2-D matrix."""
    a, b = _as_tensor(a), _as_tensor(b)
    if b.ndim != 2:
        raise DimensionError(f"matmul: right operand must be 2-D, got {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(
            f"matmul: inner dims differ, {a.shape[-1]} vs {b.shape[0]}"
        )

    def bw(out):
        def run():
            if a.requires_grad:
                a._accumulate(out.grad @ b.data.T)
            if b.requires_grad:
                g2 = out.grad.reshape(-1, b.data.shape[1])
                a2 = a.data.reshape(-1, a.data.shape[-1])
                b._accumulate(a2.T @ g2)

        return run

    return _make(a.data @ b.data, (a, b), bw)


def reshape(a, shape):
    a = _as_tensor(a)

    def bw(out):
        def run():
            if a.requires_grad:
                a._accumulate(out.grad.reshape(a.data.shape))

        return run

    return _make(a.data.reshape(shape), (a,), bw)


def transpose(a, axes):
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(out):
        def run():
            if a.requires_grad:
                a._accumulate(out.grad.transpose(inv))

        return run

    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), bw)


def getitem(a, idx):
    a = _as_tensor(a)

    def bw(out):
        def run():
            if a.requires_grad:
                g = np.zeros_like(a.data)
                g[idx] = out.grad
                a._accumulate(g)

        return run

    return _make(a.data[idx].copy(), (a,), bw)


def concat(tensors, axis: int = 0):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(out):
        def run():
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    sl = [slice(None)] * out.grad.ndim
                    sl[axis] = slice(lo, hi)
                    t._accumulate(out.grad[tuple(sl)])

        return run

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def stack(tensors, axis: int = 0):
    tensors = [_as_tensor(t) for t in tensors]

    def bw(out):
        def run():
            for i, t in enumerate(tensors):
                if t.requires_grad:
                    t._accumulate(np.take(out.grad, i, axis=axis))

        return run

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, bw)


def tsum(a, axis=None, keepdims: bool = False):
    a = _as_tensor(a)

    def bw(out):
        def run():
            if a.requires_grad:
                g = out.grad
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                a._accumulate(np.broadcast_to(g, a.data.shape))

        return run

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def tmean(a, axis=None, keepdims: bool = False):
    a = _as_tensor(a)
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[i] for i in np.atleast_1d(axis)]
    )

    def bw(out):
        def run():
            if a.requires_grad:
                g = out.grad
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                a._accumulate(np.broadcast_to(g, a.data.shape) / n)

        return run

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), bw)


# ---------------------------------------------------------------------------
# activations


def sigmoid(a):
    a = _as_tensor(a)
    x = a.data
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bw(out):
        def run():
            if a.requires_grad:
                a._accumulate(out.grad * out.data * (1.0 - out.data))

        return run

    return _make(s, (a,), bw)


def tanh(a):
    a = _as_tensor(a)

    def bw(out):
        def run():
            if a.requires_grad:
                a._accumulate(out.grad * (1.0 - out.data * out.data))

        return run

    return _make(np.tanh(a.data), (a,), bw)


def lrelu(a, slope: float = 0.3):
    """Leaky ReLU: x for x >= 0, slope*x below."""
    a = _as_tensor(a)
    pos = a.data >= 0

    def bw(out):
        def run():
            if a.requires_grad:
                a._accumulate(out.grad * np.where(pos, 1.0, slope))

        return run

    return _make(np.where(pos, a.data, slope * a.data), (a,), bw)


def mse_loss(a, b):
    """Mean of squared differences; shapes must match exactly."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mse_loss: shapes differ, {a.shape} vs {b.shape}")
    diff = sub(a, b)
    return tmean(mul(diff, diff))


# ---------------------------------------------------------------------------
# convolutions


def _normalize_ints(v, n, name):
    if isinstance(v, (int, np.integer)):
        v = (int(v),) * n
    else:
        v = tuple(int(x) for x in v)
    if len(v) != n:
        raise DimensionError(f"{name} must have {n} entries, got {v}")
    if any(x < 0 for x in v):
        raise DimensionError(f"{name} entries must be non-negative, got {v}")
    return v


# offset-wise batched matmul beats the im2col gather once the patch rows get
# wide; crossover measured on this box around a few hundred inner elements
_OFFSET_MIN_INNER = 288


def _pad_input(x, k, padding, nsp):
    ksp = k.shape[2:]
    if padding != (0,) * nsp:
        shape = x.shape[:2] + tuple(x.shape[2 + i] + 2 * padding[i]
                                    for i in range(nsp))
        xp = np.zeros(shape, dtype=x.dtype)
        core = (slice(None), slice(None)) + tuple(
            slice(p, p + x.shape[2 + i]) for i, p in enumerate(padding))
        xp[core] = x
    else:
        xp = x
    for ax in range(nsp):
        if ksp[ax] > xp.shape[2 + ax]:
            raise DimensionError(
                f"kernel extent {ksp[ax]} exceeds padded input extent "
                f"{xp.shape[2 + ax]} on spatial axis {ax}"
            )
    return xp


def _conv_forward(x, k, stride, padding, nsp):
    """Dispatch on patch width; returns (out, cache) for the backward pass."""
    c_in = x.shape[1]
    inner = c_in * int(np.prod(k.shape[2:]))
    if inner >= _OFFSET_MIN_INNER and all(s == 1 for s in stride):
        return _conv_forward_offset(x, k, padding, nsp)
    return _conv_forward_im2col(x, k, stride, padding, nsp)


def _conv_forward_im2col(x, k, stride, padding, nsp):
    n, c_in = x.shape[0], x.shape[1]
    c_out = k.shape[0]
    ksp = k.shape[2:]
    xp = _pad_input(x, k, padding, nsp)
    windows = sliding_window_view(xp, ksp, axis=tuple(range(2, 2 + nsp)))
    windows = windows[(slice(None), slice(None))
                      + tuple(slice(None, None, s) for s in stride)]
    out_sp = windows.shape[2:2 + nsp]
    perm = (0,) + tuple(range(2, 2 + nsp)) + (1,) + tuple(range(2 + nsp, 2 + 2 * nsp))
    cols = np.ascontiguousarray(windows.transpose(perm)).reshape(
        n * int(np.prod(out_sp)), c_in * int(np.prod(ksp)))
    out = cols @ k.reshape(c_out, -1).T
    # the moveaxis view is fine downstream; ufuncs re-materialize anyway
    out = np.moveaxis(out.reshape((n,) + out_sp + (c_out,)), -1, 1)
    return out, ("im2col", cols, xp.shape, out_sp)


def _conv_forward_offset(x, k, padding, nsp):
    n, c_in = x.shape[0], x.shape[1]
    c_out = k.shape[0]
    ksp = k.shape[2:]
    xp = _pad_input(x, k, padding, nsp)
    out_sp = tuple(xp.shape[2 + i] - ksp[i] + 1 for i in range(nsp))
    pos = int(np.prod(out_sp))
    k2 = k.reshape(c_out, c_in, -1)
    out = np.zeros((n, c_out, pos))
    for oi, off in enumerate(np.ndindex(*ksp)):
        sl = (slice(None), slice(None)) + tuple(
            slice(o, o + d) for o, d in zip(off, out_sp))
        out += k2[:, :, oi] @ xp[sl].reshape(n, c_in, pos)
    return out.reshape((n, c_out) + out_sp), ("offset", xp, out_sp)


def _conv_backward_input_stride1(g, k, padding, nsp, x_spatial):
    # transposed conv: correlate the padded output gradient with the
    # channel-swapped, spatially flipped kernel
    ksp = k.shape[2:]
    spatial_axes = tuple(range(2, 2 + nsp))
    kk = np.ascontiguousarray(
        np.flip(k, axis=spatial_axes).transpose((1, 0) + spatial_axes))
    if all(p <= e - 1 for p, e in zip(padding, ksp)):
        gx, _ = _conv_forward(g, kk, (1,) * nsp,
                              tuple(e - 1 - p for p, e in zip(padding, ksp)), nsp)
        return gx
    full, _ = _conv_forward(g, kk, (1,) * nsp, tuple(e - 1 for e in ksp), nsp)
    crop = (slice(None), slice(None)) + tuple(
        slice(p, p + e) for p, e in zip(padding, x_spatial))
    return full[crop]


def _conv_backward(g, x_shape, k, stride, padding, nsp, cache, need_gx, need_gk):
    c_out = k.shape[0]
    n = g.shape[0]
    ksp = k.shape[2:]
    gk = None
    if need_gk:
        if cache[0] == "offset":
            _tag, xp, out_sp = cache
            pos = int(np.prod(out_sp))
            g3 = g.reshape(n, c_out, pos)
            gk = np.empty(k.shape)
            gk2 = gk.reshape(c_out, k.shape[1], -1)
            for oi, off in enumerate(np.ndindex(*ksp)):
                sl = (slice(None), slice(None)) + tuple(
                    slice(o, o + d) for o, d in zip(off, out_sp))
                slab = xp[sl].reshape(n, k.shape[1], pos)
                gk2[:, :, oi] = np.matmul(g3, slab.transpose(0, 2, 1)).sum(axis=0)
        else:
            _tag, cols, _xp_shape, _out_sp = cache
            g2 = np.ascontiguousarray(np.moveaxis(g, 1, -1)).reshape(-1, c_out)
            gk = (g2.T @ cols).reshape(k.shape)
    gx = None
    if need_gx and all(s == 1 for s in stride):
        gx = _conv_backward_input_stride1(g, k, padding, nsp, x_shape[2:])
    elif need_gx:
        # strided fallback: scatter column gradients back per kernel offset
        _tag, cols, xp_shape, out_sp = cache
        c_in = k.shape[1]
        g2 = np.ascontiguousarray(np.moveaxis(g, 1, -1)).reshape(-1, c_out)
        gcols = g2 @ k.reshape(c_out, -1)
        gcols = gcols.reshape((n,) + out_sp + (c_in,) + ksp)
        gcols = np.moveaxis(gcols, 1 + nsp, 1)
        gxp = np.zeros(xp_shape)
        for off in np.ndindex(*ksp):
            dst = (slice(None), slice(None)) + tuple(
                slice(o, o + s * d, s) for o, s, d in zip(off, stride, out_sp))
            src = (slice(None), slice(None)) + (slice(None),) * nsp + off
            gxp[dst] += gcols[src]
        core = (slice(None), slice(None)) + tuple(
            slice(p, p + e) for p, e in zip(padding, x_shape[2:]))
        gx = np.ascontiguousarray(gxp[core])
    return gx, gk


def _convnd(x, kernel, stride, padding, nsp, name):
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.ndim != 2 + nsp:
        raise DimensionError(f"{name}: input must be {2 + nsp}-D, got shape {x.shape}")
    if kernel.ndim != 2 + nsp:
        raise DimensionError(f"{name}: kernel must be {2 + nsp}-D, got shape {kernel.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise DimensionError(
            f"{name}: input channels {x.shape[1]} != kernel channels {kernel.shape[1]}"
        )
    stride = _normalize_ints(stride, nsp, f"{name} stride")
    if any(s == 0 for s in stride):
        raise DimensionError(f"{name}: stride entries must be positive, got {stride}")
    padding = _normalize_ints(padding, nsp, f"{name} padding")
    data, cache = _conv_forward(x.data, kernel.data, stride, padding, nsp)

    def bw(out):
        def run():
            gx, gk = _conv_backward(
                out.grad, x.data.shape, kernel.data, stride, padding, nsp,
                cache, x.requires_grad, kernel.requires_grad)
            if x.requires_grad:
                x._accumulate(gx)
            if kernel.requires_grad:
                kernel._accumulate(gk)

        return run

    return _make(data, (x, kernel), bw)


def conv2d(x, kernel, stride=1, padding=0):
    """Cross-correlation of (N, C_in, H, W) with (C_out, C_in, kh, kw)."""
    return _convnd(x, kernel, stride, padding, 2, "conv2d")


def conv3d(x, kernel, stride=1, padding=0):
    """Cross-correlation of (N, C_in, D, H, W) with (C_out, C_in, kd, kh, kw)."""
    return _convnd(x, kernel, stride, padding, 3, "conv3d")


def conv1d_dense(x, weight, bias):
    """Length-1 1D convolution: the same affine map applied at each frame.

    x (..., C_in) -> (..., C_out) with weight (C_out, C_in), bias (C_out,).
    """
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if weight.ndim != 2:
        raise DimensionError(f"conv1d_dense: weight must be 2-D, got {weight.shape}")
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(
            f"conv1d_dense: input channels {x.shape[-1]} != weight channels {weight.shape[1]}"
        )
    if bias.shape != (weight.shape[0],):
        raise DimensionError(
            f"conv1d_dense: bias shape {bias.shape} != ({weight.shape[0]},)"
        )

    def bw(out):
        def run():
            g = out.grad
            if x.requires_grad:
                x._accumulate(g @ weight.data)
            if weight.requires_grad:
                g2 = g.reshape(-1, weight.data.shape[0])
                x2 = x.data.reshape(-1, weight.data.shape[1])
                weight._accumulate(g2.T @ x2)
            if bias.requires_grad:
                bias._accumulate(g.reshape(-1, bias.data.shape[0]).sum(axis=0))

        return run

    return _make(x.data @ weight.data.T + bias.data, (x, weight, bias), bw)


def maxpool_lastaxis(x, window: int, stride: int):
    """Max over sliding windows along the last axis; ties route to the first index."""
    x = _as_tensor(x)
    length = x.shape[-1]
    if window < 1:
        raise DimensionError(f"maxpool: window must be >= 1, got {window}")
    if stride < 1 or length % stride != 0:
        raise DimensionError(
            f"maxpool: last axis {length} not divisible by stride {stride}"
        )
    if (length - window) % stride != 0:
        raise DimensionError(
            f"maxpool: windows of {window}/stride {stride} do not tile axis {length}"
        )
    win = sliding_window_view(x.data, window, axis=-1)[..., ::stride, :]
    arg = win.argmax(axis=-1)
    data = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    n_out = data.shape[-1]

    def bw(out):
        def run():
            if x.requires_grad:
                g = np.zeros_like(x.data).reshape(-1, length)
                gf = out.grad.reshape(-1, n_out)
                pos = (arg + np.arange(n_out) * stride).reshape(-1, n_out)
                np.add.at(g, (np.arange(g.shape[0])[:, None], pos), gf)
                x._accumulate(g.reshape(x.data.shape))

        return run

    return _make(data, (x,), bw)


# ---------------------------------------------------------------------------
# LSTM


def lstm_forward(inputs, params, hidden_size: int):
    """Single-layer LSTM over (..., T, D_in); returns hidden states (..., T, H).

    `params` holds the fused gate map: "w" of shape (D_in + H, 4H) applied to
    [x_t, h_{t-1}], and "b" of shape (4H,). Gate order i, f, g, o with sigmoid
    on i/f/o and tanh on the candidate; initial state is zero.
    """
    inputs = _as_tensor(inputs)
    if inputs.ndim == 2:
        return lstm_forward(reshape(inputs, (1,) + inputs.shape), params, hidden_size)[0]
    if inputs.ndim != 3:
        raise DimensionError(f"lstm_forward: input must be (T, D) or (B, T, D), got {inputs.shape}")
    w, b = params["w"], params["b"]
    bsz, steps, d_in = inputs.shape
    h = hidden_size
    if w.shape != (d_in + h, 4 * h):
        raise DimensionError(
            f"lstm_forward: gate weights {w.shape} != {(d_in + h, 4 * h)}"
        )
    if b.shape != (4 * h,):
        raise DimensionError(f"lstm_forward: gate bias {b.shape} != ({4 * h},)")
    h_t = Tensor(np.zeros((bsz, h)))
    c_t = Tensor(np.zeros((bsz, h)))
    outs = []
    for t in range(steps):
        x_t = inputs[:, t, :]
        z = add(matmul(concat([x_t, h_t], axis=1), w), b)
        i_g = sigmoid(z[:, 0:h])
        f_g = sigmoid(z[:, h:2 * h])
        g_c = tanh(z[:, 2 * h:3 * h])
        o_g = sigmoid(z[:, 3 * h:4 * h])
        c_t = add(mul(f_g, c_t), mul(i_g, g_c))
        h_t = mul(o_g, tanh(c_t))
        outs.append(h_t)
    return stack(outs, axis=1)


# ---------------------------------------------------------------------------
# batch norm


class RunningStats:
    """Per-channel running mean/variance used by batchnorm in eval mode."""

    def __init__(self, channels: int):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)

    def update(self, batch_mean, batch_var, momentum: float):
        self.mean = momentum * self.mean + (1.0 - momentum) * batch_mean
        self.var = momentum * self.var + (1.0 - momentum) * batch_var

    def copy(self) -> "RunningStats":
        out = RunningStats(self.mean.shape[0])
        out.mean = self.mean.copy()
        out.var = self.var.copy()
        return out


def batchnorm(x, channel_axis: int, gamma, beta, running: RunningStats,
              mode: str = "train", eps: float = 1e-5, momentum: float = 0.9):
    """Normalize per channel over all other axes, then apply gamma/beta.

    Train mode uses (biased) batch statistics and folds them into `running`;
    eval mode normalizes with the running statistics.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    channels = x.shape[channel_axis]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise DimensionError(
            f"batchnorm: gamma/beta shapes {gamma.shape}/{beta.shape} != ({channels},)"
        )
    axes = tuple(i for i in range(x.ndim) if i != channel_axis)
    bshape = [1] * x.ndim
    bshape[channel_axis] = channels
    if mode == "train":
        mu = tmean(x, axis=axes, keepdims=True)
        xc = sub(x, mu)
        var = tmean(mul(xc, xc), axis=axes, keepdims=True)
        xhat = mul(xc, power(add(var, eps), -0.5))
        running.update(mu.data.reshape(channels), var.data.reshape(channels), momentum)
    elif mode == "eval":
        mu = Tensor(running.mean.reshape(bshape))
        var = Tensor(running.var.reshape(bshape))
        xhat = mul(sub(x, mu), power(add(var, eps), -0.5))
    else:
        raise ValueError(f"batchnorm: mode must be 'train' or 'eval', got {mode!r}")
    return add(mul(xhat, reshape(gamma, bshape)), reshape(beta, bshape))


# ---------------------------------------------------------------------------
# parameters and optimizer


class ParameterSet:
    """Ordered, uniquely named map of trainable tensors."""

    def __init__(self):
        self._entries: dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        if not tensor.requires_grad:
            raise ValueError(f"parameter {name!r} must require gradients")
        self._entries[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    def names(self):
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def tensors(self):
        return list(self._entries.values())

    def zero_grad(self):
        for t in self._entries.values():
            t.grad = None

    def state_copy(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._entries.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        for k, v in self._entries.items():
            v.data = state[k].copy()


class Adam:
    """Standard Adam with bias correction; updates parameters in place."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params.tensors() if isinstance(params, ParameterSet) else list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * p.grad
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * p.grad**2
            m_hat = self.m[i] / (1.0 - self.beta1**self.t)
            v_hat = self.v[i] / (1.0 - self.beta2**self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def uniform_fan_in(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Fan-in scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)
