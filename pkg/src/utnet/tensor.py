"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable op appends one node to the active :class:`Graph`; nodes
are only ever appended, so insertion order is a topological order and
:func:`backward` simply walks the tape in reverse.

    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> loss = (x * x).sum()
    >>> loss.backward()
    >>> x.grad
    array([2., 4., 6.])
"""

from __future__ import annotations

import contextlib
import json
import math
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import ContractError, DimensionError

DTYPE = np.float64

_DEBUG = False


def set_debug(flag: bool) -> None:
    """Toggle the per-op NaN/Inf scan. Off by default and during benchmarks."""
    global _DEBUG
    _DEBUG = bool(flag)


def debug_enabled() -> bool:
    return _DEBUG


# --------------------------------------------------------------------------
# graph


class Node:
    __slots__ = ("op", "inputs", "backward")

    def __init__(self, op: str, inputs: tuple, backward: Callable):
        self.op = op
        self.inputs = inputs
        self.backward = backward


class Graph:
    """Append-only tape of recorded ops."""

    def __init__(self, enabled: bool = True):
        self.nodes: list[Node] = []
        self.enabled = enabled

    def record(self, op: str, inputs: tuple, out: "Tensor", backward: Callable) -> None:
        out.node_id = len(self.nodes)
        out.graph = self
        self.nodes.append(Node(op, inputs, backward))

    def __len__(self) -> int:
        return len(self.nodes)


_GRAPHS: list[Graph] = [Graph()]


def active_graph() -> Graph:
    return _GRAPHS[-1]


@contextlib.contextmanager
def new_graph() -> Iterator[Graph]:
    """Record into a fresh tape; it is dropped (with its saved activations) on exit."""
    g = Graph()
    _GRAPHS.append(g)
    try:
        yield g
    finally:
        _GRAPHS.pop()
        # tensors and nodes reference each other; clearing frees activations without a gc pass
        g.nodes.clear()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    _GRAPHS.append(Graph(enabled=False))
    try:
        yield
    finally:
        _GRAPHS.pop()


# --------------------------------------------------------------------------
# tensor


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "graph", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node_id: int | None = None
        self.graph: Graph | None = None
        self.name = name

    # construction helpers
    @classmethod
    def zeros(cls, *shape, requires_grad=False):
        return cls(np.zeros(shape), requires_grad=requires_grad)

    @classmethod
    def ones(cls, *shape, requires_grad=False):
        return cls(np.ones(shape), requires_grad=requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, inputs: tuple, backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if _DEBUG and not np.all(np.isfinite(out.data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    g = active_graph()
    if g.enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        g.record(op, inputs, out, backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires it. Repeated calls accumulate."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node_id is None:
        if loss.requires_grad:
            _accumulate_leaf(loss, np.ones_like(loss.data))
            return
        raise ContractError("loss is not attached to any recorded graph")
    g = loss.graph
    if g is None or loss.node_id >= len(g.nodes):
        raise ContractError("loss refers to a node that is no longer on its graph")
    pending = {loss.node_id: np.ones_like(loss.data)}
    for idx in range(loss.node_id, -1, -1):
        gout = pending.pop(idx, None)
        if gout is None:
            continue
        node = g.nodes[idx]
        for t, gin in zip(node.inputs, node.backward(gout)):
            if gin is None or not t.requires_grad:
                continue
            if gin.shape != t.shape:
                raise ContractError(
                    f"{node.op} produced gradient of shape {gin.shape} for input {t.shape}"
                )
            if t.node_id is not None and t.graph is g:
                prev = pending.get(t.node_id)
                pending[t.node_id] = gin if prev is None else prev + gin
            else:
                _accumulate_leaf(t, gin)


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    t.grad = np.array(g, dtype=DTYPE, copy=True) if t.grad is None else t.grad + g


# --------------------------------------------------------------------------
# elementwise / broadcasting


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("mul", a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("div", out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _make("gelu", x.data * cdf, (x,), bw)


# --------------------------------------------------------------------------
# reductions and shape


def _norm_axis(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise IndexError(f"axis {a} out of range for {ndim}-d tensor")
        out.append(a % ndim)
    return tuple(out)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make("sum", out, (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis=axes, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from None
    return _make("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat along axis {axis}: incompatible shapes {shapes}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _make("concat", out, tensors, bw)


def broadcast_to(x: Tensor, shape: tuple) -> Tensor:
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise DimensionError(f"broadcast_to: cannot expand {x.shape} to {shape}") from None
    return _make("broadcast_to", out, (x,), lambda g: (_unbroadcast(g, x.shape),))


def take(table: Tensor, index: np.ndarray, axis: int = 0) -> Tensor:
    """Gather slices of ``table`` along ``axis`` (embedding lookup); backward scatter-adds."""
    index = np.asarray(index, dtype=np.intp)
    out = np.take(table.data, index, axis=axis)
    axis = axis % table.ndim

    def bw(g):
        gt = np.zeros_like(table.data)
        # move the gathered axes to the front, scatter-add into the table's axis
        gm = np.moveaxis(g, tuple(range(axis, axis + index.ndim)), tuple(range(index.ndim)))
        gm = gm.reshape((index.size,) + gm.shape[index.ndim:])
        gtm = np.moveaxis(gt, axis, 0)
        np.add.at(gtm, index.reshape(-1), gm)
        return (gt,)

    return _make("take", out, (table,), bw)


# --------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make("matmul", out, (a, b), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise IndexError(f"softmax axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=axis, keepdims=True)

    def bw(g):
        return (z * (g - (g * z).sum(axis=axis, keepdims=True)),)

    return _make("softmax", z, (x,), bw)


# --------------------------------------------------------------------------
# convolution and resampling


def conv_output_size(size: int, k: int, stride: int, pad: int, pad_after: int | None = None) -> int:
    pad_after = pad if pad_after is None else pad_after
    span = size + pad + pad_after - k
    if span < 0 or span % stride:
        raise DimensionError(
            f"conv2d: ({size} + {pad + pad_after} - {k}) / {stride} + 1 is not an integral output size"
        )
    return span // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int | tuple[int, int] = 0) -> Tensor:
    """Cross-correlation of ``x`` (B,C,H,W) with ``w`` (O,C,kh,kw).

    ``pad`` is either symmetric or a ``(before, after)`` pair applied to both
    spatial axes; ``(1, 0)`` with stride 2 gives the usual floor-mode
    downsampling on even maps.
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    if kh not in (1, 3) or kw not in (1, 3):
        raise DimensionError(f"conv2d: kernel size {kh}x{kw} not supported (1 or 3)")
    p0, p1 = (pad, pad) if isinstance(pad, int) else pad
    Ho = conv_output_size(H, kh, stride, p0, p1)
    Wo = conv_output_size(W, kw, stride, p0, p1)
    inputs = (x, w) if b is None else (x, w, b)

    # trailing pad is never sampled by a 1x1 kernel when the strided grid fits inside the map
    if kh == 1 and kw == 1 and p0 == 0 and -(-H // stride) == Ho and -(-W // stride) == Wo:
        xs = x.data[:, :, ::stride, ::stride] if stride > 1 else x.data
        xs = xs.reshape(B, C, Ho * Wo)
        w2 = w.data.reshape(O, C)
        out = np.matmul(w2, xs)
        if b is not None:
            out += b.data[:, None]

        def bw1(g):
            g = g.reshape(B, O, Ho * Wo)
            gw = np.matmul(g, xs.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape) if w.requires_grad else None
            gx = None
            if x.requires_grad:
                gxs = np.matmul(w2.T, g).reshape(B, C, Ho, Wo)
                if stride > 1:
                    gx = np.zeros(x.shape)
                    gx[:, :, ::stride, ::stride] = gxs
                else:
                    gx = gxs
            grads = (gx, gw)
            if b is not None:
                grads += (g.sum(axis=(0, 2)),)
            return grads

        return _make("conv2d", out.reshape(B, O, Ho, Wo), inputs, bw1)

    xp = np.pad(x.data, ((0, 0), (0, 0), (p0, p1), (p0, p1))) if p0 or p1 else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (Ho - 1) * stride + 1 : stride, : (Wo - 1) * stride + 1 : stride]
    # channel-first columns: B x (C*kh*kw) x (Ho*Wo), so outputs land directly in NCHW
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(B, C * kh * kw, Ho * Wo)
    wmat = w.data.reshape(O, C * kh * kw)
    out = np.matmul(wmat, cols)
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(B, O, Ho, Wo)

    def bw(g):
        gn = g.reshape(B, O, Ho * Wo)
        gw = np.matmul(gn, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            wt = w.data.transpose(2, 3, 1, 0).reshape(kh * kw * C, O)
            taps = np.matmul(wt, gn).reshape(B, kh, kw, C, Ho, Wo)
            gxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * (Ho - 1) + 1 : stride, j : j + stride * (Wo - 1) + 1 : stride] += taps[:, i, j]
            gx = gxp[:, :, p0 : p0 + H, p0 : p0 + W] if p0 or p1 else gxp
        grads = (gx, gw)
        if b is not None:
            grads += (gn.sum(axis=(0, 2)),)
        return grads

    return _make("conv2d", out, inputs, bw)


def subsample_2d(x: Tensor, stride: int) -> Tensor:
    """Keep every ``stride``-th row and column, starting at 0."""
    out = x.data[:, :, ::stride, ::stride]

    def bw(g):
        gx = np.zeros(x.shape)
        gx[:, :, ::stride, ::stride] = g
        return (gx,)

    return _make("subsample_2d", out, (x,), bw)


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic (n_out, n_in) interpolation matrix, half-pixel centres, edge clamped."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for o in range(n_out):
        src = min(max((o + 0.5) * scale - 0.5, 0.0), n_in - 1)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"bilinear_resize: target {out_h}x{out_w} must be at least 1x1")
    if x.ndim != 4:
        raise DimensionError(f"bilinear_resize expects B x C x H x W, got {x.shape}")
    H, W = x.shape[2:]
    if (H, W) == (out_h, out_w):
        return _make("bilinear_resize", x.data.copy(), (x,), lambda g: (g,))
    mh = bilinear_matrix(H, out_h)
    mw = bilinear_matrix(W, out_w)
    out = mh @ x.data @ mw.T

    def bw(g):
        return (mh.T @ g @ mw,)

    return _make("bilinear_resize", out, (x,), bw)


def max_pool_2d(x: Tensor) -> Tensor:
    """2x2, stride-2 max pooling. Ties route the gradient to the first maximum."""
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise DimensionError(f"max_pool_2d needs even spatial dims, got {H}x{W}")
    blocks = x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros(blocks.shape)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = gb.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(x.shape)
        return (gx,)

    return _make("max_pool_2d", out, (x,), bw)


def _pool_bins(n_in: int, n_out: int) -> list[tuple[int, int]]:
    return [(math.floor(i * n_in / n_out), math.ceil((i + 1) * n_in / n_out)) for i in range(n_out)]


def adaptive_max_pool_2d(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Max over (possibly overlapping) bins so any H x W maps onto out_h x out_w."""
    B, C, H, W = x.shape
    if (H, W) == (out_h, out_w):
        return _make("adaptive_max_pool_2d", x.data.copy(), (x,), lambda g: (g,))
    if H % out_h == 0 and W % out_w == 0 and H // out_h == 2 and W // out_w == 2:
        return max_pool_2d(x)
    rows, cols = _pool_bins(H, out_h), _pool_bins(W, out_w)
    out = np.empty((B, C, out_h, out_w))
    flat_idx = np.empty((B, C, out_h, out_w), dtype=np.intp)
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            patch = x.data[:, :, r0:r1, c0:c1].reshape(B, C, -1)
            a = patch.argmax(axis=-1)
            out[:, :, i, j] = np.take_along_axis(patch, a[..., None], axis=-1)[..., 0]
            flat_idx[:, :, i, j] = (r0 + a // (c1 - c0)) * W + c0 + a % (c1 - c0)

    def bw(g):
        gx = np.zeros((B, C, H * W))
        # bins may overlap, so scatter-add per output cell
        for i in range(out_h):
            for j in range(out_w):
                np.put_along_axis(
                    gx,
                    flat_idx[:, :, i, j, None],
                    np.take_along_axis(gx, flat_idx[:, :, i, j, None], axis=-1) + g[:, :, i, j, None],
                    axis=-1,
                )
        return (gx.reshape(x.shape),)

    return _make("adaptive_max_pool_2d", out, (x,), bw)


# --------------------------------------------------------------------------
# normalization


def batch_norm_2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over (B, H, W).

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance, exponential average).
    """
    axes = (0, 2, 3)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = x.size // x.shape[1]
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def bw(g):
        gg = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gamma.data[None, :, None, None]
        if training:
            m = x.size // x.shape[1]
            gx = (inv[None, :, None, None] / m) * (
                m * gxhat
                - gxhat.sum(axis=axes)[None, :, None, None]
                - xhat * (gxhat * xhat).sum(axis=axes)[None, :, None, None]
            )
        else:
            gx = gxhat * inv[None, :, None, None]
        return gx, gg, gbeta

    return _make("batch_norm_2d", out, (x, gamma, beta), bw)


def layer_norm_channels(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each pixel's channel vector (axis 1) of a B x C x H x W map."""
    C = x.shape[1]
    mu = x.data.mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(x.data.var(axis=1, keepdims=True) + eps)
    xhat = (x.data - mu) * inv
    gshape = (1, C) + (1,) * (x.ndim - 2)
    out = xhat * gamma.data.reshape(gshape) + beta.data.reshape(gshape)

    def bw(g):
        red = (0,) + tuple(range(2, x.ndim))
        gg = (g * xhat).sum(axis=red)
        gbeta = g.sum(axis=red)
        gxhat = g * gamma.data.reshape(gshape)
        gx = (inv / C) * (
            C * gxhat - gxhat.sum(axis=1, keepdims=True) - xhat * (gxhat * xhat).sum(axis=1, keepdims=True)
        )
        return gx, gg, gbeta

    return _make("layer_norm_channels", out, (x, gamma, beta), bw)


# --------------------------------------------------------------------------
# losses


def cross_entropy_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood; class axis is 1 (B x K x ...) with integer labels B x ..."""
    labels = np.asarray(labels)
    K = logits.shape[1]
    if labels.shape != logits.shape[:1] + logits.shape[2:]:
        raise DimensionError(f"cross_entropy: labels {labels.shape} do not match logits {logits.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    onehot = np.moveaxis(np.eye(K)[labels], -1, 1)
    count = labels.size
    loss = -(logp * onehot).sum() / count

    def bw(g):
        return (g * (np.exp(logp) - onehot) / count,)

    return _make("cross_entropy", np.asarray(loss), (logits,), bw)


# --------------------------------------------------------------------------
# gradient check


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    coords: Sequence[int] | None = None,
) -> float:
    """Largest |analytic - central difference| / max(1, |central difference|).

    ``f`` maps ``x`` to a scalar Tensor. ``coords`` restricts the check to a
    subset of flat indices (all coordinates by default).
    """
    return grad_check_worst(f, x, eps, coords)[0]


def grad_check_worst(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    coords: Sequence[int] | None = None,
) -> tuple[float, int]:
    """Like :func:`grad_check` but also returns the flat index of the worst coordinate.

    The NaN/Inf scan is forced on while checking, so a non-finite
    intermediate is reported with the name of the op that produced it.
    """
    previous = debug_enabled()
    set_debug(True)
    try:
        return _grad_check_worst(f, x, eps, coords)
    finally:
        set_debug(previous)


def _grad_check_worst(f, x, eps, coords):
    x.requires_grad = True
    x.grad = None
    with new_graph():
        out = f(x)
        if out.size != 1:
            raise ContractError(f"grad_check needs a scalar function, got shape {out.shape}")
        backward(out)
    analytic = np.zeros(x.shape) if x.grad is None else x.grad.copy()
    x.grad = None

    flat = x.data.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst, where = 0.0, -1
    with no_grad():
        for i in idx:
            orig = flat[i]
            hi, lo = orig + eps, orig - eps
            flat[i] = hi
            fp = f(x).item()
            flat[i] = lo
            fm = f(x).item()
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise FloatingPointError(f"non-finite function value while perturbing coordinate {i}")
            # divide by the step actually taken after rounding
            fd = (fp - fm) / (hi - lo)
            err = abs(analytic.reshape(-1)[i] - fd) / max(1.0, abs(fd))
            if err > worst or where < 0:
                worst, where = max(worst, err), int(i)
    return worst, where


# --------------------------------------------------------------------------
# serialization


def save_tensor(t: Tensor | np.ndarray, directory: str | Path, name: str) -> None:
    """Write ``name.f64`` (little-endian payload) and ``name.json`` (manifest)."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=DTYPE)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / f"{name}.f64").write_bytes(np.ascontiguousarray(data, dtype="<f8").tobytes())
    manifest = {"name": name, "dtype": "f64", "shape": list(data.shape)}
    (directory / f"{name}.json").write_text(json.dumps(manifest, sort_keys=True) + "\n")


def load_tensor(directory: str | Path, name: str) -> np.ndarray:
    directory = Path(directory)
    manifest = json.loads((directory / f"{name}.json").read_text())
    if manifest.get("dtype") != "f64":
        raise ContractError(f"{name}: unsupported dtype {manifest.get('dtype')!r}")
    raw = np.frombuffer((directory / f"{name}.f64").read_bytes(), dtype="<f8")
    shape = tuple(manifest["shape"])
    if raw.size != int(np.prod(shape)):
        raise ContractError(f"{name}: payload has {raw.size} values, manifest shape {shape}")
    return raw.reshape(shape).astype(DTYPE)
