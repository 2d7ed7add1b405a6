"""Minimal reverse-mode autodiff over float64 numpy arrays.

Every op returns a new :class:`Tensor`.  When any input requires a gradient the
result carries its parents and a closure mapping the output gradient to one
gradient per parent.  :func:`backward` orders the recorded graph topologically
(the "tape") and walks it once in reverse.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

LOG_CLAMP = 1e-12
_SQRT_2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an op."""


class _State(threading.local):
    def __init__(self):
        self.grad_enabled = True
        self.debug = False


_state = _State()


@contextlib.contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def debug_mode(enabled: bool = True):
    """Check every forward result for NaN/Inf on the current thread."""
    prev = _state.debug
    _state.debug = enabled
    try:
        yield
    finally:
        _state.debug = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_retain", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._retain = False
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def retain_grad(self) -> Tensor:
        """Keep this non-leaf tensor's gradient after backward."""
        self._retain = True
        return self

    def zero_grad(self):
        self.grad = None

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    # -- operator sugar ---------------------------------------------------
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

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)

    def gelu(self):
        return gelu(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _state.debug and not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite value produced by forward op")
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"shapes {a.shape} and {b.shape} are not broadcastable") from exc


# -- elementwise --------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    """Natural log with the argument clamped to at least ``LOG_CLAMP``."""
    a = as_tensor(a)
    clamped = np.maximum(a.data, LOG_CLAMP)
    # clamped region is constant, so it passes no gradient
    return _make(np.log(clamped), (a,), lambda g: (np.where(a.data > LOG_CLAMP, g / clamped, 0.0),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0),))


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU."""
    a = as_tensor(a)
    cdf = 0.5 * (1.0 + erf(a.data / _SQRT_2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * a.data * a.data)
    return _make(a.data * cdf, (a,), lambda g: (g * (cdf + a.data * pdf),))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Dispatch by name; binary kinds need ``b``."""
    binary = {"add": add, "sub": sub, "mul": mul, "div": div}
    unary = {"neg": neg, "exp": exp, "log": log, "relu": relu, "gelu": gelu}
    if op_kind in binary:
        if b is None:
            raise ValueError(f"{op_kind} needs two operands")
        return binary[op_kind](a, b)
    if op_kind in unary:
        return unary[op_kind](a)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# -- reductions and shape ops ------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return tsum(a, axes, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes).copy(), (a,),
                 lambda g: (g.transpose(inv),))


def roll(a, shifts, axes) -> Tensor:
    a = as_tensor(a)
    neg_shifts = tuple(-s for s in shifts)
    return _make(np.roll(a.data, shifts, axes), (a,), lambda g: (np.roll(g, neg_shifts, axes),))


def take(a, index: np.ndarray) -> Tensor:
    """Gather rows of ``a`` along axis 0 with an integer index array."""
    a = as_tensor(a)
    index = np.asarray(index)

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(a.data[index], (a,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(out, ts, lambda g: tuple(np.split(g, splits, axis=axis)))


def detach(a) -> Tensor:
    """Same values, cut from the graph."""
    a = as_tensor(a)
    return Tensor(a.data.copy())


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not align")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise ShapeError(f"matmul batch dims {a.shape[:-2]} and {b.shape[:-2]} differ") from exc
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), backward)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for {x.ndim}-d tensor")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward)


def _normalize_backward(g_hat, xhat, inv, axes, n):
    # gradient of (x - mean) * inv with batch statistics over `axes`
    s1 = g_hat.sum(axis=axes, keepdims=True)
    s2 = (g_hat * xhat).sum(axis=axes, keepdims=True)
    return inv / n * (n * g_hat - s1 - xhat * s2)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the per-channel affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"affine shapes {gamma.shape}/{beta.shape} do not match channels {c}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gx = _normalize_backward(g * gamma.data, xhat, inv, -1, c)
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gamma, beta), backward)


def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization of an NCHW tensor.

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance, as in the usual convention).
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axes = (0, 2, 3)
    shape = (1, -1, 1, 1)
    if training:
        n = x.shape[0] * x.shape[2] * x.shape[3]
        mu = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(-1)
        running_var *= 1.0 - momentum
        running_var += momentum * var.reshape(-1) * (n / max(n - 1, 1))
    else:
        n = None
        mu = running_mean.reshape(shape)
        var = running_var.reshape(shape)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    g_aff = gamma.data.reshape(shape)
    out = xhat * g_aff + beta.data.reshape(shape)

    def backward(g):
        g_hat = g * g_aff
        gx = _normalize_backward(g_hat, xhat, inv, axes, n) if training else g_hat * inv
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _make(out, (x, gamma, beta), backward)


# -- convolution and resampling ---------------------------------------------

def conv2d(x, w, b=None, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Grouped 2-D cross-correlation on NCHW input with OIHW weights."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d expects 4-d input and weight")
    nb, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    if c % groups or o % groups or cg * groups != c:
        raise ShapeError(f"channels {c} / weight {w.shape} incompatible with groups={groups}")
    hp, wp = h + 2 * padding, wd + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    og = o // groups
    parents = [x, w] if b is None else [x, w, as_tensor(b)]
    bias = None if b is None else parents[2].data

    if kh == kw == 1 and stride == 1 and padding == 0:
        xg = x.data.reshape(nb, groups, cg, h * wd)
        wg = w.data.reshape(groups, og, cg)
        out = np.matmul(wg, xg).reshape(nb, o, h, wd)
        if bias is not None:
            out += bias.reshape(1, -1, 1, 1)

        def backward(g):
            gg = g.reshape(nb, groups, og, h * wd)
            gx = np.matmul(np.swapaxes(wg, -1, -2), gg).reshape(x.shape)
            gw = np.matmul(gg, np.swapaxes(xg, -1, -2)).sum(axis=0).reshape(w.shape)
            grads = [gx, gw]
            if bias is not None:
                grads.append(g.sum(axis=(0, 2, 3)))
            return tuple(grads)

        return _make(out, parents, backward)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win.reshape(nb, groups, cg, ho, wo, kh, kw)
    wg = w.data.reshape(groups, og, cg, kh, kw)
    out = np.einsum("bgchwij,gocij->bgohw", win, wg, optimize=True).reshape(nb, o, ho, wo)
    if bias is not None:
        out += bias.reshape(1, -1, 1, 1)

    def backward(g):
        gg = g.reshape(nb, groups, og, ho, wo)
        gw = np.einsum("bgohw,bgchwij->gocij", gg, win, optimize=True).reshape(w.shape)
        gwin = np.einsum("bgohw,gocij->bgchwij", gg, wg, optimize=True).reshape(nb, c, ho, wo, kh, kw)
        gxp = np.zeros((nb, c, hp, wp))
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += gwin[..., i, j]
        gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make(out, parents, backward)


def pixel_shuffle(x, r: int) -> Tensor:
    """[B, C*r*r, H, W] -> [B, C, H*r, W*r]."""
    x = as_tensor(x)
    nb, c, h, w = x.shape
    if c % (r * r):
        raise ShapeError(f"channels {c} not divisible by r^2={r * r}")
    if r == 1:
        return reshape(x, x.shape)
    y = reshape(x, (nb, c // (r * r), r, r, h, w))
    y = transpose(y, (0, 1, 4, 2, 5, 3))
    return reshape(y, (nb, c // (r * r), h * r, w * r))


def pixel_unshuffle(x, r: int) -> Tensor:
    """[B, C, H*r, W*r] -> [B, C*r*r, H, W]; exact inverse of :func:`pixel_shuffle`."""
    x = as_tensor(x)
    nb, c, h, w = x.shape
    if h % r or w % r:
        raise ShapeError(f"spatial size {h}x{w} not divisible by r={r}")
    if r == 1:
        return reshape(x, x.shape)
    y = reshape(x, (nb, c, h // r, r, w // r, r))
    y = transpose(y, (0, 1, 3, 5, 2, 4))
    return reshape(y, (nb, c * r * r, h // r, w // r))


# -- backward ---------------------------------------------------------------

def _tape(root: Tensor) -> list[Tensor]:
    """Topologically ordered graph nodes reachable from ``root`` (parents first)."""
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, grad: np.ndarray | None = None):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it."""
    if grad is None:
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        raise ValueError("loss is not connected to any tensor that requires grad")
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=np.float64)}
    for node in reversed(_tape(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None or node._retain:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


Tensor.backward = backward  # type: ignore[attr-defined]


def parameters_grad_check(fn: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5,
                          sample: dict[int, np.ndarray] | None = None) -> float:
    """Relative error between tape and central-difference gradients.

    ``fn`` must rebuild the scalar output from scratch on every call.  When
    ``sample`` maps ``id(param)`` to flat indices only those entries are probed.
    The error is ``|a - n|_2 / max(|a|_2, |n|_2)`` over all probed entries
    stacked together, so parameters whose true gradient is zero (e.g. a bias
    feeding batch norm) do not turn round-off into a large ratio.
    """
    params = list(params)
    for p in params:
        p.grad = None
    backward(fn())
    analytic, numeric = [], []
    for p in params:
        grad = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size) if sample is None else sample.get(id(p), np.arange(flat.size))
        est = np.empty(len(idx))
        with no_grad():
            for k, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + h
                fp = fn().item()
                flat[i] = orig - h
                fm = fn().item()
                flat[i] = orig
                est[k] = (fp - fm) / (2 * h)
        analytic.append(grad.reshape(-1)[idx])
        numeric.append(est)
    a, n = np.concatenate(analytic), np.concatenate(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-300)
    return float(np.linalg.norm(a - n) / denom)
