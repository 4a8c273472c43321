# Minimal dense tensor with a reverse-mode tape, backed by numpy.
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        shown = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {shown}")


class NonFiniteError(FloatingPointError):
    pass


class _State(threading.local):
    def __init__(self):
        self.grad_enabled = True
        self.counters: list[FlopCounter] = []
        self.tracker = None


_state = _State()


class FlopCounter:
    """Accumulates multiply-add counts of every op run while it is active.

    Conv counts out_pixels * out_channels * in_channels * k * k, matmul m*k*n,
    bilinear resize is two matmuls, and elementwise arithmetic counts one per
    output element. Pure data movement (reshape, gather, concat) is free.
    """

    def __init__(self):
        self.multiply_adds = 0

    def add(self, n: int):
        self.multiply_adds += int(n)

    def reset(self):
        self.multiply_adds = 0

    def __enter__(self):
        _state.counters.append(self)
        return self

    def __exit__(self, *exc):
        _state.counters.remove(self)


def _count(n: int):
    for c in _state.counters:
        c.add(n)


class no_grad:
    def __enter__(self):
        self.prev = _state.grad_enabled
        _state.grad_enabled = False

    def __exit__(self, *exc):
        _state.grad_enabled = self.prev


def is_grad_enabled() -> bool:
    return _state.grad_enabled


def _root(a: np.ndarray) -> np.ndarray:
    while isinstance(a.base, np.ndarray):
        a = a.base
    return a


class Tensor:
    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Callable | None = None, op: str = "", dtype=None):
        data = np.asarray(data, dtype=dtype)
        if dtype is None and data.dtype.kind != "f":
            data = data.astype(np.float64)
        self.data = data
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self.op = op
        self.tag = None
        tracker = _state.tracker
        self._tracker = tracker
        if tracker is not None:
            tracker.alloc(self.data)

    def __del__(self):
        tracker = getattr(self, "_tracker", None)
        if tracker is not None:
            tracker.free(self.data)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def backward(self):
        backward(self)

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)

    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)
    def transpose(self, *axes): return transpose(self, axes)
    def sum(self, axis=None): return tsum(self, axis)
    def mean(self): return tmean(self)
    def relu(self): return relu(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # python scalars adopt the tensor operand's dtype so float32 graphs stay float32
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    needs = _state.grad_enabled and any(p.requires_grad for p in parents)
    if needs:
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn, op=op)
    return Tensor(data, op=op)


def _toposort(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Populate ``.grad`` on every leaf reachable from a scalar loss.

    Leaf gradients accumulate across calls; intermediate gradients are
    transient, so the tape can be replayed.
    """
    if loss.data.size != 1:
        raise ShapeError("backward (loss must be scalar)", loss.shape)
    if not loss.requires_grad:
        raise RuntimeError("backward: loss is not attached to the gradient tape")
    order = _toposort(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for leaf {node.tag or node.op or 'tensor'}")
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            if k in grads:
                grads[k] = grads[k] + pg
            else:
                grads[k] = pg


def check_finite(t: Tensor, where: str):
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteError(f"non-finite values in {where}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)
    out = a.data + b.data
    _count(out.size)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _make(out, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)
    out = a.data - b.data
    _count(out.size)

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)
    return _make(out, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)
    out = a.data * b.data
    _count(out.size)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return _make(out, (a, b), bw, "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = x.data * mask

    def bw(g):
        return (g * mask,)
    return _make(out, (x,), bw, "relu")


def sin(x: Tensor) -> Tensor:
    out = np.sin(x.data)
    _count(out.size)

    def bw(g):
        return (g * np.cos(x.data),)
    return _make(out, (x,), bw, "sin")


def cos(x: Tensor) -> Tensor:
    out = np.cos(x.data)
    _count(out.size)

    def bw(g):
        return (-g * np.sin(x.data),)
    return _make(out, (x,), bw, "cos")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    _count(out.size)

    def bw(g):
        return (g * out,)
    return _make(out, (x,), bw, "exp")


# ---------------------------------------------------------------- reductions / shape

def tsum(x: Tensor, axis=None) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis))
    _count(x.data.size)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)
    return _make(out, (x,), bw, "sum")


def tmean(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.asarray(x.data.mean())
    _count(n)

    def bw(g):
        return (np.full(x.shape, g / n, dtype=x.dtype),)
    return _make(out, (x,), bw, "mean")


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, shape) from None

    def bw(g):
        return (g.reshape(x.shape),)
    return _make(out, (x,), bw, "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    out = np.ascontiguousarray(x.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inv),)
    return _make(out, (x,), bw, "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in tensors)) from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        idx = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return tuple(parts)
    return _make(out, tensors, bw, "concat")


def take_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows of a 2-D tensor; the backward pass scatter-adds."""
    if x.ndim != 2:
        raise ShapeError("take_rows", x.shape)
    index = np.asarray(index, dtype=np.int64)
    out = x.data[index]
    m, d = x.shape

    def bw(g):
        flat = (index[:, None] * d + np.arange(d)).ravel()
        gx = np.bincount(flat, weights=g.ravel(), minlength=m * d)
        return (gx.reshape(m, d).astype(x.dtype, copy=False),)
    return _make(out, (x,), bw, "take_rows")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = a.data @ b.data
    _count(a.shape[0] * a.shape[1] * b.shape[1])

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb
    return _make(out, (a, b), bw, "matmul")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution over (N, C, H, W) input with (O, C, k, k) weights."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError("conv2d", x.shape, w.shape)
    if stride not in (1, 2):
        raise ValueError(f"conv2d: unsupported stride {stride}")
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d (input smaller than kernel footprint)", x.shape, w.shape)
    if k == 1 and stride == 1 and padding == 0:
        return _conv1x1(x, w, b)
    # columns are laid out (kh, kw, c) over a channels-last copy; that keeps both the
    # im2col gather and the backward scatter on contiguous channel runs
    xh = x.data.transpose(0, 2, 3, 1)
    if padding:
        xh = np.pad(xh, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    else:
        xh = np.ascontiguousarray(xh)
    if k == 1:
        cols_arr = np.ascontiguousarray(xh[:, ::stride, ::stride][:, :ho, :wo]).reshape(n * ho * wo, c)
    else:
        win = sliding_window_view(xh, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
        cols_arr = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, k * k * c)
        del win
    del xh
    # the im2col buffer is a real allocation; wrap it so the memory hook sees it
    cols = Tensor(cols_arr)
    del cols_arr
    wmat = w.data.transpose(0, 2, 3, 1).reshape(o, k * k * c)
    y = cols.data @ wmat.T
    if b is not None:
        y += b.data
    out = np.ascontiguousarray(y.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))
    del y
    _count(n * ho * wo * o * c * k * k)
    parents = (x, w) if b is None else (x, w, b)
    hp, wp = h + 2 * padding, wd + 2 * padding

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = None
        if w.requires_grad:
            gw = np.ascontiguousarray((g2.T @ cols.data).reshape(o, k, k, c).transpose(0, 3, 1, 2))
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, k, k, c)
            gxp = np.zeros((n, hp, wp, c), dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
            if padding:
                gxp = gxp[:, padding:padding + h, padding:padding + wd, :]
            gx = np.ascontiguousarray(gxp.transpose(0, 3, 1, 2))
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))
    result = _make(out, parents, bw, "conv2d")
    if not result.requires_grad:
        del cols
    return result


def _conv1x1(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    # pointwise conv as a batched (o, c) @ (c, HW) product, no layout changes
    n, c, h, wd = x.shape
    o = w.shape[0]
    wmat = w.data.reshape(o, c)
    xf = x.data.reshape(n, c, h * wd)
    y = np.matmul(wmat, xf)
    if b is not None:
        y += b.data[:, None]
    _count(n * h * wd * o * c)
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gf = g.reshape(n, o, h * wd)
        gw = np.matmul(gf, xf.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape) if w.requires_grad else None
        gx = np.matmul(wmat.T, gf).reshape(x.shape) if x.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, gf.sum(axis=(0, 2))
    return _make(y.reshape(n, o, h, wd), parents, bw, "conv2d")


def bilinear_matrix(n_out: int, n_in: int, dtype=np.float64) -> np.ndarray:
    """Interpolation weights for align_corners=False resizing along one axis."""
    r = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        r[i, i0] += 1.0 - lam
        r[i, i1] += lam
    return r


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize the last two axes; implemented as separable interpolation matrices."""
    if x.ndim < 2 or out_h < 1 or out_w < 1:
        raise ShapeError("resize_bilinear", x.shape, (out_h, out_w))
    h, w = x.shape[-2:]
    ry = bilinear_matrix(out_h, h, x.dtype)
    rx = bilinear_matrix(out_w, w, x.dtype)
    lead = int(np.prod(x.shape[:-2]))
    out = np.matmul(np.matmul(ry, x.data), rx.T)
    _count(lead * (out_h * h * w + out_h * w * out_w))

    def bw(g):
        return (np.matmul(np.matmul(ry.T, g), rx),)
    return _make(out, (x,), bw, "resize_bilinear")


# ---------------------------------------------------------------- probabilistic

def softmax(x: Tensor, axis: int = 0, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``. Entries where ``mask`` is False are treated as -inf."""
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    _count(3 * out.size)

    def bw(g):
        s = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - s),)
    return _make(out, (x,), bw, "softmax")


def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: int = 255) -> Tensor:
    """Mean per-pixel cross-entropy; class axis is 1 (or the last axis of 2-D input)."""
    labels = np.asarray(labels)
    if logits.ndim < 2 or labels.shape != logits.shape[:1] + logits.shape[2:]:
        raise ShapeError("cross_entropy", logits.shape, labels.shape)
    nc = logits.shape[1]
    z = logits.data
    lab = labels.astype(np.int64)[:, None]
    valid = lab != ignore_index
    if np.any(valid & ((lab < 0) | (lab >= nc))):
        raise ValueError(f"cross_entropy: label out of range [0, {nc})")
    safe = np.where(valid, lab, 0)
    zs = z - z.max(axis=1, keepdims=True)
    logp = zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))
    count = int(valid.sum())
    picked = np.take_along_axis(logp, safe, axis=1)
    loss = -(picked * valid).sum(dtype=np.float64) / count if count else 0.0
    _count(3 * z.size)

    def bw(g):
        gz = np.exp(logp)
        np.put_along_axis(gz, safe, np.take_along_axis(gz, safe, axis=1) - 1.0, axis=1)
        gz *= valid * ((g / count) if count else 0.0)
        return (gz,)
    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "cross_entropy")
