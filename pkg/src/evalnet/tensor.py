"""Minimal dense tensor engine with reverse-mode differentiation.

Only the operations needed by the reconstruction network are provided:
convolution (with stride and dilation), pixel shuffle, pooling, a handful of
pointwise ops, softmax, windowed dot-product attention and the two training
losses. Arrays live in numpy; every op records a closure that maps the output
gradient back to its inputs, and :func:`backward` replays those closures in
reverse topological order.

The engine has a single numeric mode, float32 by default. Switch to float64
with :func:`precision` when running finite-difference checks.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "get_dtype",
    "set_dtype",
    "precision",
    "no_grad",
    "set_debug",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "sigmoid",
    "concat_channels",
    "reshape",
    "take_last",
    "sum_all",
    "mean_all",
    "conv2d",
    "pixel_shuffle",
    "pixel_unshuffle",
    "avg_pool",
    "global_avg_pool",
    "softmax",
    "gather_windows",
    "local_dot_attention",
    "loss",
    "mse_loss",
    "l1_loss",
    "backward",
    "grad_check",
]

_DTYPE: type = np.float32
_GRAD_ENABLED = True
_DEBUG = False


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


def get_dtype() -> type:
    return _DTYPE


def set_dtype(dtype) -> None:
    """Set the engine-wide float type (``float32`` or ``float64``)."""
    global _DTYPE
    dt = np.dtype(dtype).type
    if dt not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _DTYPE = dt


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    previous = _DTYPE
    set_dtype(dtype)
    try:
        yield
    finally:
        set_dtype(previous)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def set_debug(enabled: bool) -> None:
    """Assert finiteness of every op output while enabled."""
    global _DEBUG
    _DEBUG = bool(enabled)


class Tensor:
    """N-dimensional float array that can take part in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.op = "leaf"

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward_fn, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward_fn if track else None
        if _DEBUG and not np.all(np.isfinite(data)):
            raise FloatingPointError(f"non-finite output from {op}")
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.requires_grad = False
        t.grad = None
        t._parents = ()
        t._backward = None
        t.op = "leaf"
        return t

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def _raise_not_scalar(t: Tensor):
    raise ShapeError(f"expected a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc


# pointwise --------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return Tensor._result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    """Hadamard product; a size-1 axis broadcasts against the other operand."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._result(out, (a, b), bw, "mul")


def scale(a: Tensor, factor: float) -> Tensor:
    c = a.data.dtype.type(factor)

    def bw(g):
        return (g * c,)

    return Tensor._result(a.data * c, (a,), bw, "scale")


def relu(a: Tensor) -> Tensor:
    positive = a.data > 0

    def bw(g):
        return (g * positive,)

    return Tensor._result(np.where(positive, a.data, 0).astype(a.data.dtype), (a,), bw, "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)

    def bw(g):
        return (g * s * (1 - s),)

    return Tensor._result(s, (a,), bw, "sigmoid")


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate NCHW tensors along the channel axis, in argument order."""
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"concat needs equal N,H,W; got {ref} and {t.shape}")
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=1))

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=1), tensors, bw, "concat")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape

    def bw(g):
        return (g.reshape(src),)

    return Tensor._result(a.data.reshape(shape), (a,), bw, "reshape")


def take_last(a: Tensor, index: int) -> Tensor:
    """Select one entry of the last axis, dropping that axis."""
    src = a.shape

    def bw(g):
        full = np.zeros(src, dtype=g.dtype)
        full[..., index] = g
        return (full,)

    return Tensor._result(np.ascontiguousarray(a.data[..., index]), (a,), bw, "take_last")


def sum_all(a: Tensor) -> Tensor:
    src = a.shape

    def bw(g):
        return (np.broadcast_to(g, src).copy(),)

    return Tensor._result(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,), bw, "sum")


def mean_all(a: Tensor) -> Tensor:
    src = a.shape
    n = a.data.size

    def bw(g):
        return (np.full(src, g / n, dtype=a.data.dtype),)

    return Tensor._result(np.asarray(a.data.mean(), dtype=a.data.dtype), (a,), bw, "mean")


# convolution and resampling ------------------------------------------------------


def _conv_out(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    """Unfold a padded NCHW array into a (C*kh*kw, N*ho*wo) patch matrix."""
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(c, kh, kw, n, ho, wo),
        strides=(sc, dilation * sh, dilation * sw, sn, stride * sh, stride * sw),
        writeable=False,
    )
    return view.reshape(c * kh * kw, n * ho * wo)


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    """2-D cross-correlation of an NCHW input with an OIKK kernel, zero padded."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError("conv2d expects NCHW input and OIKK kernel")
    n, c, h, w = x.shape
    o, i, kh, kw = kernel.shape
    if c != i:
        raise ShapeError(f"input has {c} channels, kernel expects {i}")
    if dilation < 1 or stride < 1:
        raise ValueError("stride and dilation must be >= 1")
    ho = _conv_out(h, kh, stride, padding, dilation)
    wo = _conv_out(w, kw, stride, padding, dilation)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"non-positive output size {ho}x{wo}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    xp = np.ascontiguousarray(xp)
    cols = _im2col(xp, kh, kw, stride, dilation, ho, wo)
    wmat = kernel.data.reshape(o, -1)
    out = (wmat @ cols).reshape(o, n, ho, wo)
    if bias is not None:
        out += bias.data[:, None, None, None]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def bw(g):
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, -1)
        gk = (gt @ cols.T).reshape(kernel.shape) if kernel.requires_grad else None
        gb = gt.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            # channel-major layout keeps each tap's accumulation contiguous
            dcols = (wmat.T @ gt).reshape(c, kh, kw, n, ho, wo)
            gxp = np.zeros((c, n) + xp.shape[2:], dtype=g.dtype)
            r_span = stride * (ho - 1) + 1
            c_span = stride * (wo - 1) + 1
            for ki in range(kh):
                for kj in range(kw):
                    r0, c0 = ki * dilation, kj * dilation
                    gxp[:, :, r0 : r0 + r_span : stride, c0 : c0 + c_span : stride] += dcols[:, ki, kj]
            gx = np.ascontiguousarray(gxp[:, :, padding : padding + h, padding : padding + w].transpose(1, 0, 2, 3))
        return (gx, gk, gb) if bias is not None else (gx, gk)

    parents = (x, kernel, bias) if bias is not None else (x, kernel)
    return Tensor._result(out, parents, bw, "conv2d")


def _shuffle(a: np.ndarray, r: int) -> np.ndarray:
    n, crr, h, w = a.shape
    c = crr // (r * r)
    return a.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * r, w * r)


def _unshuffle(a: np.ndarray, r: int) -> np.ndarray:
    n, c, hr, wr = a.shape
    h, w = hr // r, wr // r
    return a.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h, w)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Rearrange (N, C*r*r, H, W) into (N, C, r*H, r*W).

    ``out[n, c, r*h + dy, r*w + dx] = x[n, c*r*r + dy*r + dx, h, w]``.
    """
    if r < 1:
        raise ValueError("shuffle factor must be >= 1")
    if x.ndim != 4 or x.shape[1] % (r * r):
        raise ShapeError(f"channels {x.shape[1] if x.ndim == 4 else x.shape} not divisible by {r * r}")

    def bw(g):
        return (_unshuffle(g, r),)

    return Tensor._result(np.ascontiguousarray(_shuffle(x.data, r)), (x,), bw, "pixel_shuffle")


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Exact inverse of :func:`pixel_shuffle`."""
    if x.ndim != 4 or x.shape[2] % r or x.shape[3] % r:
        raise ShapeError(f"spatial extent of {x.shape} not divisible by {r}")

    def bw(g):
        return (_shuffle(g, r),)

    return Tensor._result(np.ascontiguousarray(_unshuffle(x.data, r)), (x,), bw, "pixel_unshuffle")


def avg_pool(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping ``factor`` x ``factor`` mean pooling."""
    n, c, h, w = x.shape
    if factor < 1 or h % factor or w % factor:
        raise ShapeError(f"extent {h}x{w} not divisible by {factor}")
    if factor == 1:
        return Tensor._result(x.data.copy(), (x,), lambda g: (g,), "avg_pool")
    out = x.data.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))
    inv = 1.0 / (factor * factor)

    def bw(g):
        return ((np.repeat(np.repeat(g, factor, axis=2), factor, axis=3) * inv).astype(g.dtype),)

    return Tensor._result(out.astype(x.data.dtype), (x,), bw, "avg_pool")


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True).astype(x.data.dtype)

    def bw(g):
        return (np.broadcast_to(g / (h * w), x.shape).astype(g.dtype),)

    return Tensor._result(out, (x,), bw, "global_avg_pool")


# attention --------------------------------------------------------------------


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    """Softmax along the last axis."""
    s = _softmax(x.data)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return Tensor._result(s, (x,), bw, "softmax")


def gather_windows(x: Tensor, rows: np.ndarray, cols: np.ndarray, window: int) -> tuple[Tensor, np.ndarray]:
    """Collect ``window`` x ``window`` neighbourhoods of an NCHW map.

    ``rows`` (length h) and ``cols`` (length w) give the window centres.
    Returns the gathered values with shape (N, C, h, w, window**2), slot order
    row-major over offsets, and a boolean (h, w, window**2) validity mask.
    Out-of-bounds slots hold zeros and are flagged invalid.
    """
    if window % 2 == 0:
        raise ValueError("window must be odd")
    n, c, hh, ww = x.shape
    half = window // 2
    offs = np.arange(-half, half + 1)
    rr = np.asarray(rows)[:, None, None, None] + offs[None, None, :, None]
    cc = np.asarray(cols)[None, :, None, None] + offs[None, None, None, :]
    rr, cc = np.broadcast_arrays(rr, cc)
    k = window * window
    rr = rr.reshape(len(rows), len(cols), k)
    cc = cc.reshape(len(rows), len(cols), k)
    valid = (rr >= 0) & (rr < hh) & (cc >= 0) & (cc < ww)
    # invalid slots point at a sentinel element appended past the end
    flat = np.where(valid, rr * ww + cc, hh * ww)
    ext = np.concatenate([x.data.reshape(n, c, hh * ww), np.zeros((n, c, 1), dtype=x.data.dtype)], axis=2)
    out = ext[:, :, flat]

    def bw(g):
        acc = np.zeros((n, c, hh * ww + 1), dtype=g.dtype)
        for slot in range(k):
            # within one slot every valid index is distinct
            acc[:, :, flat[:, :, slot]] += g[..., slot]
        return (acc[:, :, : hh * ww].reshape(x.shape),)

    return Tensor._result(out, (x,), bw, "gather_windows"), valid


def local_dot_attention(
    query: Tensor,
    keys: Tensor,
    values: Tensor,
    valid: Optional[np.ndarray] = None,
    return_weights: bool = False,
):
    """Single-head scaled dot-product attention over a per-position window.

    ``query`` is (N, C, H, W); ``keys`` and ``values`` are (N, C, H, W, K).
    ``valid`` is a boolean mask broadcastable to (N, H, W, K); masked slots
    receive zero weight.
    """
    n, c, h, w = query.shape
    if keys.shape[:4] != (n, c, h, w) or values.shape != keys.shape:
        raise ShapeError(f"keys/values {keys.shape}, {values.shape} do not match query {query.shape}")
    inv_sqrt = 1.0 / math.sqrt(c)
    q, k, v = query.data, keys.data, values.data
    logits = (q[..., None] * k).sum(axis=1) * inv_sqrt
    if valid is not None:
        mask = np.broadcast_to(valid, logits.shape)
        if not mask.any(axis=-1).all():
            raise ValueError("attention window with every slot masked")
        logits = np.where(mask, logits, -np.inf)
    a = _softmax(logits).astype(q.dtype)
    out = (a[:, None] * v).sum(axis=-1)

    def bw(g):
        gv = a[:, None] * g[..., None] if values.requires_grad else None
        da = (g[..., None] * v).sum(axis=1)
        dl = a * (da - (da * a).sum(axis=-1, keepdims=True)) * inv_sqrt
        gq = (dl[:, None] * k).sum(axis=-1) if query.requires_grad else None
        gk = dl[:, None] * q[..., None] if keys.requires_grad else None
        return gq, gk, gv

    result = Tensor._result(out, (query, keys, values), bw, "local_dot_attention")
    return (result, a) if return_weights else result


# losses -----------------------------------------------------------------------


def mse_loss(pred: Tensor, target) -> Tensor:
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"loss operands differ: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def bw(g):
        d = (2.0 / n) * g * diff
        return d.astype(diff.dtype), (-d).astype(diff.dtype)

    return Tensor._result(np.asarray(np.mean(diff * diff), dtype=diff.dtype), (pred, target), bw, "mse")


def l1_loss(pred: Tensor, target) -> Tensor:
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"loss operands differ: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def bw(g):
        d = (g / n) * np.sign(diff)
        return d.astype(diff.dtype), (-d).astype(diff.dtype)

    return Tensor._result(np.asarray(np.mean(np.abs(diff)), dtype=diff.dtype), (pred, target), bw, "l1")


def loss(pred: Tensor, target, kind: str = "mse") -> Tensor:
    if kind == "mse":
        return mse_loss(pred, target)
    if kind == "l1":
        return l1_loss(pred, target)
    raise ValueError(f"unknown loss kind {kind!r}")


# differentiation ----------------------------------------------------------------


def _tape(root: Tensor) -> list[Tensor]:
    """Topologically ordered list of recorded tensors reachable from ``root``."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Populate ``.grad`` of every leaf that requires it.

    Gradients add up over fan-out and over repeated calls; clear them with
    ``zero_grad`` between optimisation steps.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("root is not part of a recorded computation")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(_tape(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


def grad_check(
    f: Callable[[Tensor], Tensor],
    point: Tensor,
    eps: float = 1e-3,
    coords: Optional[Sequence[int]] = None,
    return_all: bool = False,
):
    """Largest relative gap between analytic and central-difference gradients.

    ``point.data`` is perturbed in place, so ``point`` may be a parameter that
    ``f`` reaches through a closure. ``coords`` restricts the comparison to the
    given flat indices. With ``return_all`` the per-coordinate errors are
    returned instead of their maximum. Requires float64 data.
    """
    if point.data.dtype != np.float64:
        raise TypeError("grad_check requires float64 mode")
    point.requires_grad = True
    point.grad = None
    out = f(point)
    backward(out)
    analytic = np.zeros_like(point.data) if point.grad is None else point.grad.copy()
    point.grad = None

    flat = point.data.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    errors = []
    with no_grad():
        for i in idx:
            saved = flat[i]
            flat[i] = saved + eps
            up = f(point).item()
            flat[i] = saved - eps
            down = f(point).item()
            flat[i] = saved
            numeric = (up - down) / (2 * eps)
            a = analytic.reshape(-1)[i]
            errors.append(abs(a - numeric) / max(1e-8, abs(a) + abs(numeric)))
    if return_all:
        return np.array(errors)
    return max(errors, default=0.0)
