"""Small dense-tensor engine with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array.  Operations on tensors that require
gradients record a closure that pushes the output gradient back to their
inputs; :func:`backward` replays those closures in reverse topological order.
Image tensors are laid out ``[C, H, W]`` or batched ``[N, C, H, W]``; the
channel axis is always ``-3``.

Every operation checks its output for NaN/Inf and raises
:class:`NonFiniteError` rather than letting a bad value propagate.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the graph (inference, finite differences)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by {op}")
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise / reductions ---------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b, a if isinstance(a, Tensor) else None)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, a)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, a)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, a)
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * out / b.data, b.shape))

    return _result(out, (a, b), bw, "div")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.shape))

    return _result(np.asarray(out), (x,), bw, "sum")


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return tsum(x, axis, keepdims) * (1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    def bw(g):
        _accum(x, g.reshape(x.shape))

    return _result(x.data.reshape(shape), (x,), bw, "reshape")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        _accum(x, g * mask)

    return _result(x.data * mask, (x,), bw, "relu")


def softmax(x: Tensor, axis: int = -3) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _accum(x, s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _result(s, (x,), bw, "softmax")


# -- image ops ------------------------------------------------------------

def _as_batch(x: np.ndarray) -> np.ndarray:
    return x[None] if x.ndim == 3 else x


def _im2col(xp: np.ndarray, k: int, ho: int, wo: int) -> np.ndarray:
    """Rows of k*k*C patch values from a padded NHWC array, ordered (dy, dx, c)."""
    n, _, _, c = xp.shape
    if k == 1:
        return xp[:, :ho, :wo, :].reshape(n * ho * wo, c)
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # n,ho,wo,c,k,k
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, k * k * c)


def _pad_hw(x: np.ndarray, p: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` ([C,H,W] or [N,C,H,W]) with ``kernel`` [O,C,k,k].

    Runs as one matrix product over NHWC patches; the input gradient is the
    correlation of the output gradient with the flipped kernel.
    """
    if x.ndim not in (3, 4) or kernel.ndim != 4:
        raise ValueError(f"conv2d expects [C,H,W] or [N,C,H,W] input and [O,C,k,k] kernel, got {x.shape}, {kernel.shape}")
    o, c, k, kw = kernel.shape
    if k != kw:
        raise ValueError("conv2d kernel must be square")
    if x.shape[-3] != c:
        raise ValueError(f"conv2d channel mismatch: input has {x.shape[-3]}, kernel expects {c}")
    if bias.shape != (o,):
        raise ValueError(f"conv2d bias shape {bias.shape} != ({o},)")
    p = padding
    if not 0 <= p <= k - 1:
        raise ValueError(f"conv2d padding must lie in [0, {k - 1}]")
    xb = _as_batch(x.data)
    n, _, h, w = xb.shape
    ho, wo = h + 2 * p - k + 1, w + 2 * p - k + 1
    if ho < 1 or wo < 1:
        raise ValueError("conv2d kernel larger than padded input")
    cols = _im2col(_pad_hw(xb.transpose(0, 2, 3, 1), p), k, ho, wo)
    wmat = kernel.data.transpose(0, 2, 3, 1).reshape(o, k * k * c)
    out2d = cols @ wmat.T
    out2d += bias.data
    out = np.ascontiguousarray(out2d.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))
    if x.ndim == 3:
        out = out[0]

    def bw(g):
        g_nhwc = _as_batch(g).transpose(0, 2, 3, 1)
        g2d = np.ascontiguousarray(g_nhwc).reshape(n * ho * wo, o)
        if kernel.requires_grad:
            dw = (cols.T @ g2d).T.reshape(o, k, k, c).transpose(0, 3, 1, 2)
            _accum(kernel, dw)
        if bias.requires_grad:
            _accum(bias, g2d.sum(axis=0))
        if x.requires_grad:
            gcols = _im2col(_pad_hw(g_nhwc, k - 1 - p), k, h, w)
            wflip = kernel.data[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(k * k * o, c)
            dx = (gcols @ wflip).reshape(n, h, w, c).transpose(0, 3, 1, 2)
            _accum(x, dx[0] if x.ndim == 3 else dx)

    return _result(out, (x, kernel, bias), bw, "conv2d")


def maxpool2x(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties go to the first cell in row-major order."""
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2x needs even spatial dims, got {h}x{w}")
    lead = x.shape[:-2]
    blocks = x.data.reshape(*lead, h // 2, 2, w // 2, 2)
    blocks = np.moveaxis(blocks, -3, -2).reshape(*lead, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        onehot = (np.arange(4) == idx[..., None]) * g[..., None]
        dx = np.moveaxis(onehot.reshape(*lead, h // 2, w // 2, 2, 2), -3, -2).reshape(x.shape)
        _accum(x, dx)

    return _result(out, (x,), bw, "maxpool2x")


def upsample_nearest2x(x: Tensor) -> Tensor:
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def bw(g):
        h, w = x.shape[-2:]
        _accum(x, g.reshape(*x.shape[:-2], h, 2, w, 2).sum(axis=(-3, -1)))

    return _result(out, (x,), bw, "upsample_nearest2x")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[:-3] != b.shape[:-3] or a.shape[-2:] != b.shape[-2:]:
        raise ValueError(f"concat_channels shape mismatch: {a.shape} vs {b.shape}")
    ca = a.shape[-3]

    def bw(g):
        _accum(a, g[..., :ca, :, :])
        _accum(b, g[..., ca:, :, :])

    return _result(np.concatenate([a.data, b.data], axis=-3), (a, b), bw, "concat_channels")


# -- losses ---------------------------------------------------------------

def softmax_cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean over pixels of ``-log softmax(logits)[target]``; class axis is -3."""
    target = np.asarray(target)
    k = logits.shape[-3]
    if target.shape != logits.shape[:-3] + logits.shape[-2:]:
        raise ValueError(f"target shape {target.shape} does not match logits {logits.shape}")
    if target.size and (target.min() < 0 or target.max() >= k):
        raise ValueError(f"target class ids must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=-3, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-3, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, np.expand_dims(target, -3), axis=-3)
    count = target.size
    loss = -picked.sum() / count

    def bw(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, np.expand_dims(target, -3), np.take_along_axis(grad, np.expand_dims(target, -3), axis=-3) - 1.0, axis=-3)
        _accum(logits, grad * (g / count))

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "softmax_cross_entropy")


def cosine_distance(a: Tensor, b: Tensor, eps: float = 1e-8, axis: int = 0) -> Tensor:
    """``1 - <a,b> / (max(|a|,eps) * max(|b|,eps))`` reduced along ``axis``.

    For 1-D inputs the result is a scalar; for feature maps ``[C,h,w]`` with
    ``axis=-3`` it is one distance per spatial location.
    """
    if a.shape != b.shape:
        raise ValueError(f"cosine_distance shape mismatch: {a.shape} vs {b.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    na = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    nb = np.sqrt((b.data * b.data).sum(axis=axis, keepdims=True))
    ma, mb = np.maximum(na, eps), np.maximum(nb, eps)
    dot = (a.data * b.data).sum(axis=axis, keepdims=True)
    denom = ma * mb
    cos = dot / denom
    # rounding can push |cos| a hair past 1; the value is clipped, the gradient is not
    out = 1.0 - np.clip(cos, -1.0, 1.0)

    def bw(g):
        g = np.expand_dims(g, axis) if g.ndim < a.ndim else g
        if a.requires_grad:
            dna = np.where(na > eps, a.data / np.where(na > eps, na, 1.0), 0.0)
            _accum(a, -g * (b.data / denom - cos / ma * dna))
        if b.requires_grad:
            dnb = np.where(nb > eps, b.data / np.where(nb > eps, nb, 1.0), 0.0)
            _accum(b, -g * (a.data / denom - cos / mb * dnb))

    return _result(np.squeeze(out, axis=axis), (a, b), bw, "cosine_distance")


# -- differentiation --------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor that requires gradients and feeds ``loss``."""
    if loss.data.size != 1 or loss.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    # interior gradients are dropped so only leaves keep theirs
    for node in order:
        if node._parents:
            node.grad = None
            node._parents = ()
            node._backward = None


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
               max_per_param: int | None = None, rng: np.random.Generator | None = None,
               skip: Callable[[Tensor, tuple], bool] | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` rebuilds the scalar loss from ``params`` on every call.  Each error is
    ``|analytic - numeric| / max(1, |numeric|)``.  ``max_per_param`` limits the
    check to a random subset of entries per parameter.
    """
    for p in params:
        if p.dtype != np.float64:
            raise TypeError("grad_check runs in 64-bit precision; got " + str(p.dtype))
    zero_grad(params)
    loss = f()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        indices = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            indices = (rng or np.random.default_rng(0)).choice(flat.size, max_per_param, replace=False)
        for i in indices:
            if skip is not None and skip(p, np.unravel_index(i, p.shape)):
                continue
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
            flat[i] = orig
            numeric = (fp - fm) / (2 * h)
            worst = max(worst, abs(ga.reshape(-1)[i] - numeric) / max(1.0, abs(numeric)))
    zero_grad(params)
    return worst
