"""Dense float32 arrays with reverse-mode automatic differentiation.

Every model component in this package runs on the ops defined here. Design
constraints:

- float32 end to end for model math (the gradient checker may evaluate the
  forward pass at float64 to get a trustworthy finite-difference reference;
  ops preserve their operand dtype, so the same code serves both).
- row-major data, trailing-dimension broadcasting, numpy as the storage and
  kernel backend.
- a single module-level tape records executed ops in execution order; one
  backward() pass fills the grad of every tracked leaf and clears the tape.
- no silent NaN: log/div/sqrt raise DomainError on undefined inputs.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import special as _sp

DEFAULT_DTYPE = np.float32


class TensorError(Exception):
    pass


class DimensionError(TensorError):
    """Operand shapes do not satisfy the op contract."""


class DomainError(TensorError):
    """Numeric input outside the mathematical domain of the op."""


class ContractError(TensorError):
    """API misuse (non-scalar loss, backward without tape, ...)."""


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: "Tensor", inputs: tuple, vjp: Callable):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Ordered record of executed differentiable ops.

    Ops append themselves at execution time, so the record is topologically
    ordered by construction: a node always appears after the nodes that
    produced its inputs.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def clear(self):
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)


class _State(threading.local):
    def __init__(self):
        self.tape = Tape()
        self.enabled = True


_STATE = _State()


def active_tape() -> Tape:
    return _STATE.tape


class no_grad:
    """Context manager: ops executed inside are not recorded."""

    def __enter__(self):
        self._prev = _STATE.enabled
        _STATE.enabled = False
        return self

    def __exit__(self, *exc):
        _STATE.enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _STATE.enabled


# ---------------------------------------------------------------------------
# tensor
# ---------------------------------------------------------------------------

class Tensor:
    __slots__ = ("data", "grad", "track_grad", "_from_op")

    def __init__(self, data, track_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.track_grad = bool(track_grad)
        self._from_op = False

    # -- basic introspection ------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, track_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, track_grad={self.track_grad})"

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# op plumbing
# ---------------------------------------------------------------------------

def _record(out: Tensor, inputs: Sequence, vjp: Callable) -> Tensor:
    out._from_op = True
    _STATE.tape.nodes.append(_Node(out, tuple(inputs), vjp))
    return out


def _tracked(*tensors) -> bool:
    if not _STATE.enabled:
        return False
    return any(isinstance(t, Tensor) and t.track_grad for t in tensors)


def _make_out(data, inputs) -> Tensor:
    out = Tensor(data, track_grad=any(
        isinstance(t, Tensor) and t.track_grad for t in inputs))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape`, undoing trailing-dimension broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _make_out(a.data + b.data, (a, b))
    if _tracked(a, b):
        def vjp(g):
            return (_unbroadcast(g, a.shape) if a.track_grad else None,
                    _unbroadcast(g, b.shape) if b.track_grad else None)
        _record(out, (a, b), vjp)
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _make_out(a.data - b.data, (a, b))
    if _tracked(a, b):
        def vjp(g):
            return (_unbroadcast(g, a.shape) if a.track_grad else None,
                    _unbroadcast(-g, b.shape) if b.track_grad else None)
        _record(out, (a, b), vjp)
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _make_out(a.data * b.data, (a, b))
    if _tracked(a, b):
        def vjp(g):
            return (_unbroadcast(g * b.data, a.shape) if a.track_grad else None,
                    _unbroadcast(g * a.data, b.shape) if b.track_grad else None)
        _record(out, (a, b), vjp)
    return out


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if np.any(b.data == 0):
        raise DomainError("division by zero")
    out = _make_out(a.data / b.data, (a, b))
    if _tracked(a, b):
        def vjp(g):
            ga = _unbroadcast(g / b.data, a.shape) if a.track_grad else None
            gb = (_unbroadcast(-g * a.data / (b.data * b.data), b.shape)
                  if b.track_grad else None)
            return ga, gb
        _record(out, (a, b), vjp)
    return out


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = _make_out(-a.data, (a,))
    if _tracked(a):
        _record(out, (a,), lambda g: (-g,))
    return out


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching semantics on leading dims.

    Gradients: dA = dC @ B^T, dB = A^T @ dC (batch dims summed back down
    when broadcast).
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out = _make_out(np.matmul(a.data, b.data), (a, b))
    if _tracked(a, b):
        def vjp(g):
            ga = gb = None
            if a.track_grad:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
            if b.track_grad:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
            return ga, gb
        _record(out, (a, b), vjp)
    return out


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = _make_out(a.data.sum(axis=axis, keepdims=keepdims), (a,))
    if _tracked(a):
        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg, a.shape).astype(a.dtype, copy=False),)
        _record(out, (a,), vjp)
    return out


def mean_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = _make_out(a.data.mean(axis=axis, keepdims=keepdims), (a,))
    if _tracked(a):
        n = a.size if axis is None else (
            np.prod([a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]))

        def vjp(g):
            if axis is None:
                gg = g
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
            return ((np.broadcast_to(gg, a.shape) / n).astype(a.dtype, copy=False),)
        _record(out, (a,), vjp)
    return out


def max_(a, axis=None, keepdims=False) -> Tensor:
    """Max reduction; gradient routes to the first maximal element."""
    a = as_tensor(a)
    out_data = a.data.max(axis=axis, keepdims=keepdims)
    out = _make_out(out_data, (a,))
    if _tracked(a):
        def vjp(g):
            full = out_data if keepdims or axis is None else np.expand_dims(out_data, axis)
            hits = (a.data == full)
            if axis is None:
                first = np.zeros_like(a.data, dtype=bool)
                first.flat[int(a.data.argmax())] = True
            else:
                idx = hits.cumsum(axis=axis)
                first = hits & (idx == 1)
            gg = g if keepdims or axis is None else np.expand_dims(g, axis)
            return ((first * gg).astype(a.dtype, copy=False),)
        _record(out, (a,), vjp)
    return out


# ---------------------------------------------------------------------------
# pointwise functions
# ---------------------------------------------------------------------------

def exp(a) -> Tensor:
    a = as_tensor(a)
    out = _make_out(np.exp(a.data), (a,))
    if _tracked(a):
        _record(out, (a,), lambda g: (g * out.data,))
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive value")
    out = _make_out(np.log(a.data), (a,))
    if _tracked(a):
        _record(out, (a,), lambda g: (g / a.data,))
    return out


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt of negative value")
    out = _make_out(np.sqrt(a.data), (a,))
    if _tracked(a):
        _record(out, (a,), lambda g: (g * 0.5 / out.data,))
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _make_out(_sp.expit(a.data), (a,))
    if _tracked(a):
        _record(out, (a,), lambda g: (g * out.data * (1.0 - out.data),))
    return out


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = _make_out(np.tanh(a.data), (a,))
    if _tracked(a):
        _record(out, (a,), lambda g: (g * (1.0 - out.data * out.data),))
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = _make_out(np.maximum(a.data, 0.0), (a,))
    if _tracked(a):
        _record(out, (a,), lambda g: (g * (a.data > 0),))
    return out


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a) -> Tensor:
    """Exact-erf GELU: x * Phi(x). The erf form, not the tanh approximation,
    so golden values are reproducible."""
    a = as_tensor(a)
    phi = 0.5 * (1.0 + _sp.erf(a.data * _INV_SQRT2))
    out = _make_out(a.data * phi, (a,))
    if _tracked(a):
        def vjp(g):
            dens = np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI
            return (g * (phi + a.data * dens),)
        _record(out, (a,), vjp)
    return out


def silu(a) -> Tensor:
    """swish(x) = x * sigmoid(x)."""
    a = as_tensor(a)
    s = _sp.expit(a.data)
    out = _make_out(a.data * s, (a,))
    if _tracked(a):
        _record(out, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),))
    return out


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only where the input was inside [lo, hi]."""
    a = as_tensor(a)
    out = _make_out(np.clip(a.data, lo, hi), (a,))
    if _tracked(a):
        inside = (a.data >= lo) & (a.data <= hi)
        _record(out, (a,), lambda g: (g * inside,))
    return out


def softmax(a, axis: int = -1) -> Tensor:
    """Max-subtracted softmax. -inf entries get exactly zero weight."""
    a = as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    # rows that are entirely -inf would produce nan; the caller contract
    # (attention always allows the diagonal) rules that out
    z = np.exp(a.data - m)
    denom = z.sum(axis=axis, keepdims=True)
    y = z / denom
    out = _make_out(y, (a,))
    if _tracked(a):
        def vjp(g):
            dot = (g * y).sum(axis=axis, keepdims=True)
            return ((g - dot) * y,)
        _record(out, (a,), vjp)
    return out


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    out = _make_out(y, (a,))
    if _tracked(a):
        sm = np.exp(y)

        def vjp(g):
            return (g - sm * g.sum(axis=axis, keepdims=True),)
        _record(out, (a,), vjp)
    return out


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = _make_out(a.data.reshape(shape), (a,))
    if _tracked(a):
        _record(out, (a,), lambda g: (g.reshape(a.shape),))
    return out


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = _make_out(a.data.transpose(axes), (a,))
    if _tracked(a):
        inv = None if axes is None else tuple(np.argsort(axes))
        _record(out, (a,), lambda g: (g.transpose(inv),))
    return out


def getitem(a, idx) -> Tensor:
    """Basic indexing (ints / slices / tuples thereof) with grad scatter-back."""
    a = as_tensor(a)
    out = _make_out(a.data[idx], (a,))
    if _tracked(a):
        def vjp(g):
            buf = np.zeros_like(a.data)
            buf[idx] = g
            return (buf,)
        _record(out, (a,), vjp)
    return out


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = _make_out(np.concatenate([p.data for p in parts], axis=axis), parts)
    if _tracked(*parts):
        sizes = [p.shape[axis] for p in parts]
        splits = np.cumsum(sizes)[:-1]

        def vjp(g):
            pieces = np.split(g, splits, axis=axis)
            return tuple(piece if p.track_grad else None
                         for piece, p in zip(pieces, parts))
        _record(out, parts, vjp)
    return out


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    out = _make_out(np.broadcast_to(a.data, shape).copy(), (a,))
    if _tracked(a):
        _record(out, (a,), lambda g: (_unbroadcast(g, a.shape),))
    return out


def embedding(table, ids) -> Tensor:
    """Row gather table[ids]; backward scatter-adds into the gathered rows.

    Numerically identical to one_hot(ids) @ table, without materializing the
    one-hot matrix.
    """
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError("embedding id out of range")
    out = _make_out(table.data[ids], (table,))
    if _tracked(table):
        def vjp(g):
            buf = np.zeros_like(table.data)
            np.add.at(buf, ids, g)
            return (buf,)
        _record(out, (table,), vjp)
    return out


def gather_rows(a, idx) -> Tensor:
    """out[i] = a[i, idx[i]] for a 2-D tensor; used by the token loss."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if a.ndim != 2 or idx.ndim != 1 or idx.shape[0] != a.shape[0]:
        raise DimensionError("gather_rows expects (n,m) tensor and n indices")
    rows = np.arange(a.shape[0])
    out = _make_out(a.data[rows, idx], (a,))
    if _tracked(a):
        def vjp(g):
            buf = np.zeros_like(a.data)
            buf[rows, idx] = g
            return (buf,)
        _record(out, (a,), vjp)
    return out


# ---------------------------------------------------------------------------
# structured ops (conv / resize / rope)
# ---------------------------------------------------------------------------

def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """NCHW x OIHW convolution via im2col + one GEMM."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d shape mismatch {x.shape} conv {w.shape}")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]                     # n,c,ho,wo,kh,kw
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wf = w.data.reshape(o, c * kh * kw)
    out_data = (cols @ wf.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    if b is not None:
        b = as_tensor(b)
        out_data = out_data + b.data.reshape(1, o, 1, 1)
    inputs = (x, w) if b is None else (x, w, b)
    out = _make_out(np.ascontiguousarray(out_data), inputs)
    if _tracked(*inputs):
        def vjp(g):
            gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
            gw = (gmat.T @ cols).reshape(w.shape) if w.track_grad else None
            gx = None
            if x.track_grad:
                gcols = (gmat @ wf).reshape(n, ho, wo, c, kh, kw)
                gxp = np.zeros_like(xp)
                for ki in range(kh):
                    for kj in range(kw):
                        gxp[:, :, ki:ki + stride * ho:stride,
                            kj:kj + stride * wo:stride] += \
                            gcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
                gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
            if b is None:
                return gx, gw
            gb = g.sum(axis=(0, 2, 3)) if b.track_grad else None
            return gx, gw, gb
        _record(out, inputs, vjp)
    return out


def conv2d_transpose(x, w, stride: int = 2) -> Tensor:
    """Transposed NCHW convolution, kernel layout (C_in, C_out, kh, kw).

    Output spatial size is (H-1)*stride + k; with k == stride this is an
    exact k-fold upsampler.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"conv2d_transpose mismatch {x.shape} vs {w.shape}")
    n, c, h, wd = x.shape
    _, o, kh, kw = w.shape
    ho, wo = (h - 1) * stride + kh, (wd - 1) * stride + kw
    out_data = np.zeros((n, o, ho, wo), dtype=x.dtype)
    for ki in range(kh):
        for kj in range(kw):
            out_data[:, :, ki:ki + stride * h:stride, kj:kj + stride * wd:stride] += \
                np.einsum("nchw,co->nohw", x.data, w.data[:, :, ki, kj])
    out = _make_out(out_data, (x, w))
    if _tracked(x, w):
        def vjp(g):
            gx = np.zeros_like(x.data) if x.track_grad else None
            gw = np.zeros_like(w.data) if w.track_grad else None
            for ki in range(kh):
                for kj in range(kw):
                    gs = g[:, :, ki:ki + stride * h:stride, kj:kj + stride * wd:stride]
                    if gx is not None:
                        gx += np.einsum("nohw,co->nchw", gs, w.data[:, :, ki, kj])
                    if gw is not None:
                        gw[:, :, ki, kj] = np.einsum("nchw,nohw->co", x.data, gs)
            return gx, gw
        _record(out, (x, w), vjp)
    return out


def _resize_coords(n_in: int, n_out: int):
    # pixel-center alignment; identity when n_in == n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def bilinear_resize(x, out_hw) -> Tensor:
    """Bilinear resample of the trailing two axes of a (..., H, W) tensor."""
    x = as_tensor(x)
    h, w = x.shape[-2], x.shape[-1]
    oh, ow = out_hw
    y0, y1, fy = _resize_coords(h, oh)
    x0, x1, fx = _resize_coords(w, ow)
    fy = fy.reshape(-1, 1).astype(x.dtype)
    fx = fx.reshape(1, -1).astype(x.dtype)
    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx

    def gather(a, yi, xi):
        return a[..., yi, :][..., :, xi]

    d = x.data
    out_data = (w00 * gather(d, y0, x0) + w01 * gather(d, y0, x1) +
                w10 * gather(d, y1, x0) + w11 * gather(d, y1, x1))
    out = _make_out(out_data.astype(x.dtype, copy=False), (x,))
    if _tracked(x):
        def vjp(g):
            buf = np.zeros_like(x.data)
            flat = buf.reshape(-1, h, w)
            gflat = g.reshape(-1, oh, ow)
            for yi, xi, wt in ((y0, x0, w00), (y0, x1, w01), (y1, x0, w10), (y1, x1, w11)):
                yy = np.repeat(yi, ow)
                xx = np.tile(xi, oh)
                contrib = (gflat * wt).reshape(-1, oh * ow)
                for k in range(flat.shape[0]):
                    np.add.at(flat[k], (yy, xx), contrib[k])
            return (buf,)
        _record(out, (x,), vjp)
    return out


def rope_rotate(x, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate interleaved dimension pairs (2i, 2i+1) of a (L, H, D) tensor.

    cos/sin carry the per-position, per-pair angles with shape (L, 1, D/2).
    """
    x = as_tensor(x)
    if x.shape[-1] % 2:
        raise DimensionError("rope needs an even trailing dimension")
    ev, od = x.data[..., 0::2], x.data[..., 1::2]
    out_data = np.empty_like(x.data)
    out_data[..., 0::2] = ev * cos - od * sin
    out_data[..., 1::2] = ev * sin + od * cos
    out = _make_out(out_data, (x,))
    if _tracked(x):
        def vjp(g):
            ge, go = g[..., 0::2], g[..., 1::2]
            buf = np.empty_like(x.data)
            buf[..., 0::2] = ge * cos + go * sin
            buf[..., 1::2] = -ge * sin + go * cos
            return (buf,)
        _record(out, (x,), vjp)
    return out


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Reverse sweep from a scalar loss.

    Fills `.grad` of every tracked leaf reachable from the loss (accumulating
    if a grad is already present) and clears the tape.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor")
    if loss.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    tape = _STATE.tape
    if not tape.nodes:
        raise ContractError("backward called with an empty tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not isinstance(inp, Tensor) or not inp.track_grad:
                continue
            gi = gi.astype(inp.dtype, copy=False)
            if inp._from_op:
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
            else:
                if inp.grad is None:
                    inp.grad = gi.copy() if gi.base is not None else gi
                else:
                    inp.grad = inp.grad + gi
    tape.clear()


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients.

    The analytic side runs the engine at float32 (the training dtype). The
    finite-difference side re-evaluates the same forward at float64, which is
    what makes it a usable reference: with a float32 forward the h=1e-3
    secant would drown in rounding noise. Relative error is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8) per component.
    """
    if step <= 0:
        raise ContractError("step must be positive")
    x = as_tensor(x)
    probe = Tensor(x.data.astype(np.float32), track_grad=True)
    loss = f(probe)
    if loss.size != 1:
        raise ContractError("grad_check target must return a scalar")
    backward(loss)
    analytic = probe.grad.astype(np.float64).ravel()

    base = x.data.astype(np.float64)
    numeric = np.zeros(base.size, dtype=np.float64)
    flat = base.ravel()
    with no_grad():
        for i in range(base.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f(Tensor(base, dtype=np.float64)).data)
            flat[i] = orig - step
            fm = float(f(Tensor(base, dtype=np.float64)).data)
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * step)
    if not (np.all(np.isfinite(numeric)) and np.all(np.isfinite(analytic))):
        raise DomainError("non-finite value during grad_check")
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
