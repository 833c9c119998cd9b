"""Reverse-mode automatic differentiation on numpy arrays.

A :class:`Node` wraps a float64 array and remembers how it was computed.
Calling :func:`backward` on a scalar node fills ``grad`` on every reachable
node that requires a gradient.  Only the primitives the encoders and losses
need are provided.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DegenerateBatchError, ShapeError

logger = logging.getLogger(__name__)

BN_MOMENTUM = 0.9
BN_EPS = 1e-5
ELU_ALPHA = 1.0
L2_EPS = 1e-12


class Mode(str, enum.Enum):
    TRAINING = "training"
    INFERENCE = "inference"


class Node:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "op")

    def __init__(self, value, parents: Sequence["Node"] = (), backward_fn=None,
                 requires_grad: bool = False, op: str = "leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.shape})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def constant(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def parameter(x) -> Node:
    """Leaf that requires a gradient.  Shares memory with ``x`` when possible."""
    return Node(x, requires_grad=True, op="param")


def _node(value, parents, backward_fn, op):
    needs = any(p.requires_grad for p in parents)
    return Node(value, parents if needs else (), backward_fn if needs else None,
                requires_grad=needs, op=op)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# -- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Node:
    a, b = constant(a), constant(b)
    _check_broadcast(a, b, "add")
    return _node(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Node:
    a, b = constant(a), constant(b)
    _check_broadcast(a, b, "sub")
    return _node(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Node:
    a, b = constant(a), constant(b)
    _check_broadcast(a, b, "mul")
    return _node(a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape),
                            _unbroadcast(g * a.value, b.shape)), "mul")


def div(a, b) -> Node:
    a, b = constant(a), constant(b)
    _check_broadcast(a, b, "div")
    out = a.value / b.value
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / b.value, a.shape),
                            _unbroadcast(-g * out / b.value, b.shape)), "div")


def scale(x, c: float) -> Node:
    x = constant(x)
    c = float(c)
    return _node(x.value * c, (x,), lambda g: (g * c,), "scale")


def exp(x) -> Node:
    x = constant(x)
    out = np.exp(x.value)
    return _node(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Node:
    x = constant(x)
    return _node(np.log(x.value), (x,), lambda g: (g / x.value,), "log")


def sqrt(x) -> Node:
    """Square root whose derivative at exactly zero is taken as zero."""
    x = constant(x)
    out = np.sqrt(x.value)

    def back(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)

    return _node(out, (x,), back, "sqrt")


def square(x) -> Node:
    x = constant(x)
    return _node(x.value * x.value, (x,), lambda g: (2.0 * g * x.value,), "square")


def maximum(x, floor: float) -> Node:
    """Clamp from below at a constant; gradient passes where ``x > floor``."""
    x = constant(x)
    keep = x.value > floor
    return _node(np.where(keep, x.value, floor), (x,), lambda g: (g * keep,), "maximum")


def relu(x) -> Node:
    return maximum(x, 0.0)


def softplus(x) -> Node:
    """``log(1 + exp(x))`` evaluated without overflow."""
    x = constant(x)
    out = np.logaddexp(0.0, x.value)

    def back(g):
        # sigmoid(x) in a form that does not overflow for large |x|
        e = np.exp(-np.abs(x.value))
        sig = np.where(x.value >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return (g * sig,)

    return _node(out, (x,), back, "softplus")


def elu(x, alpha: float = ELU_ALPHA) -> Node:
    x = constant(x)
    neg = x.value < 0
    em1 = np.expm1(np.minimum(x.value, 0.0))
    out = np.where(neg, alpha * em1, x.value)
    return _node(out, (x,), lambda g: (g * np.where(neg, alpha * (em1 + 1.0), 1.0),), "elu")


# -- shape and reduction ----------------------------------------------------

def reshape(x, shape) -> Node:
    x = constant(x)
    orig = x.shape
    return _node(x.value.reshape(shape), (x,), lambda g: (g.reshape(orig),), "reshape")


def flatten(x) -> Node:
    x = constant(x)
    return reshape(x, (x.shape[0], -1))


def transpose(x) -> Node:
    x = constant(x)
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {x.shape}")
    return _node(x.value.T, (x,), lambda g: (g.T,), "transpose")


def sum(x, axis=None, keepdims=False) -> Node:  # noqa: A001 - mirrors numpy
    x = constant(x)
    out = x.value.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(out, (x,), back, "sum")


def mean(x, axis=None, keepdims=False) -> Node:
    x = constant(x)
    count = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def index(x, key) -> Node:
    """Numpy-style indexing; repeated indices accumulate in the backward pass."""
    x = constant(x)
    out = x.value[key]

    def back(g):
        gx = np.zeros_like(x.value)
        np.add.at(gx, key, g)
        return (gx,)

    return _node(out, (x,), back, "index")


def concat_rows(parts: Sequence[Node]) -> Node:
    parts = [constant(p) for p in parts]
    sizes = [p.shape[0] for p in parts]
    out = np.concatenate([p.value for p in parts], axis=0)

    def back(g):
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=0))

    return _node(out, parts, back, "concat")


# -- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Node:
    a, b = constant(a), constant(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _node(a.value @ b.value, (a, b),
                 lambda g: (g @ b.value.T, a.value.T @ g), "matmul")


def dense(x, w, b=None) -> Node:
    """``x @ w + b`` with ``w`` shaped ``(in, out)``."""
    x, w = constant(x), constant(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense: input {x.shape} does not match weights {w.shape}")
    out = matmul(x, w)
    if b is not None:
        b = constant(b)
        if b.shape != (w.shape[1],):
            raise ShapeError(f"dense: bias {b.shape} does not match weights {w.shape}")
        out = add(out, b)
    return out


def squared_euclidean_pairwise(x, y=None) -> Node:
    """``D[i, j] = |x_i|^2 + |y_j|^2 - 2 x_i.y_j``; may dip slightly below zero."""
    x = constant(x)
    y = x if y is None else constant(y)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ShapeError(f"pairwise distance: shapes {x.shape} and {y.shape}")
    xx = sum(square(x), axis=1, keepdims=True)
    yy = reshape(sum(square(y), axis=1), (1, y.shape[0]))
    return xx + yy - scale(matmul(x, transpose(y)), 2.0)


def l2_normalize(x, eps: float = L2_EPS) -> Node:
    """Rows divided by ``max(|row|_2, eps)``."""
    x = constant(x)
    norm = np.sqrt(np.sum(x.value * x.value, axis=-1, keepdims=True))
    small = norm <= eps
    if np.any(norm == 0.0):
        logger.warning("l2_normalize: %d zero-length row(s)", int(np.sum(norm == 0.0)))
    denom = np.where(small, eps, norm)
    out = x.value / denom

    def back(g):
        proj = np.sum(g * out, axis=-1, keepdims=True)
        return (np.where(small, g / eps, (g - out * proj) / denom),)

    return _node(out, (x,), back, "l2_normalize")


# -- softmax family ---------------------------------------------------------

def logsumexp(x, axis: int = -1, mask=None) -> Node:
    """Stable log-sum-exp along ``axis``; ``mask`` (bool) selects the terms."""
    x = constant(x)
    v = x.value
    if mask is None:
        mask = np.ones(v.shape, dtype=bool)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), v.shape)
    if not np.all(mask.any(axis=axis)):
        raise ContractError("logsumexp: a slice has no selected terms")
    masked = np.where(mask, v, -np.inf)
    m = np.max(masked, axis=axis, keepdims=True)
    e = np.where(mask, np.exp(masked - m), 0.0)
    s = e.sum(axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=axis)
    soft = e / s
    return _node(out, (x,), lambda g: (np.expand_dims(g, axis) * soft,), "logsumexp")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_cross_entropy(logits, labels) -> Node:
    """Per-row ``-log softmax(logits)[label]``, shape ``(n,)``."""
    logits = constant(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross entropy: logits {logits.shape}, labels {labels.shape}")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractError(f"cross entropy: labels must lie in [0, {k})")
    logp = log_softmax(logits.value)
    rows = np.arange(labels.size)
    out = -logp[rows, labels]

    def back(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * g[:, None],)

    return _node(out, (logits,), back, "softmax_cross_entropy")


# -- convolutional primitives -----------------------------------------------

def _conv_out(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def conv2d(x, w, b=None, stride: int = 1, padding: int | None = None) -> Node:
    """2-D cross-correlation, NCHW input and OIHW kernel.

    ``padding=None`` zero-pads by ``(k - 1) // 2`` on each side, which keeps
    the size for stride 1 and gives ``ceil(n / stride)`` for odd kernels.
    """
    x, w = constant(x), constant(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} does not match kernel {w.shape}")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    pad = (kh - 1) // 2 if padding is None else padding
    ho, wo = _conv_out(h, kh, stride, pad), _conv_out(wd, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} too large for input {x.shape}")
    xp = np.pad(x.value, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n, o, ho, wo))

    def window(i, j):
        return (slice(None), slice(None),
                slice(i, i + stride * (ho - 1) + 1, stride),
                slice(j, j + stride * (wo - 1) + 1, stride))

    for i in range(kh):
        for j in range(kw):
            patch = xp[window(i, j)]
            out += np.tensordot(patch, w.value[:, :, i, j], axes=([1], [1])).transpose(0, 3, 1, 2)
    parents = [x, w]
    if b is not None:
        b = constant(b)
        if b.shape != (o,):
            raise ShapeError(f"conv2d: bias {b.shape} does not match {o} output channels")
        out += b.value[None, :, None, None]
        parents.append(b)

    def back(g):
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(w.value)
        for i in range(kh):
            for j in range(kw):
                sl = window(i, j)
                dw[:, :, i, j] = np.tensordot(g, xp[sl], axes=([0, 2, 3], [0, 2, 3]))
                dxp[sl] += np.tensordot(g, w.value[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
        dx = dxp[:, :, pad:pad + h, pad:pad + wd]
        grads = [dx, dw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _node(out, parents, back, "conv2d")


def maxpool2d(x, window: int = 3, stride: int = 2, padding: int | None = None) -> Node:
    x = constant(x)
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects NCHW input, got {x.shape}")
    n, c, h, wd = x.shape
    pad = (window - 1) // 2 if padding is None else padding
    ho, wo = _conv_out(h, window, stride, pad), _conv_out(wd, window, stride, pad)
    xp = np.pad(x.value, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf)
    views = np.lib.stride_tricks.sliding_window_view(xp, (window, window), axis=(2, 3))
    views = views[:, :, ::stride, ::stride][:, :, :ho, :wo].reshape(n, c, ho, wo, window * window)
    arg = views.argmax(axis=-1)
    out = np.take_along_axis(views, arg[..., None], axis=-1)[..., 0]

    def back(g):
        dxp = np.zeros_like(xp)
        for i in range(window):
            for j in range(window):
                hit = arg == i * window + j
                dxp[:, :, i:i + stride * (ho - 1) + 1:stride,
                    j:j + stride * (wo - 1) + 1:stride] += g * hit
        return (dxp[:, :, pad:pad + h, pad:pad + wd],)

    return _node(out, (x,), back, "maxpool2d")


# -- regularisation ---------------------------------------------------------

def batchnorm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
              mode: Mode, momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Node:
    """Batch normalisation over all axes except the channel axis 1.

    In training mode the running statistics arrays are updated in place as an
    exponential moving average with the given momentum.
    """
    x, gamma, beta = constant(x), constant(gamma), constant(beta)
    if x.ndim not in (2, 4) or gamma.shape != (x.shape[1],) or beta.shape != gamma.shape:
        raise ShapeError(f"batchnorm: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
    m = x.value.size // x.shape[1]
    if Mode(mode) is Mode.TRAINING:
        if x.shape[0] < 2:
            raise DegenerateBatchError("batchnorm in training mode needs a batch of at least 2")
        mu = x.value.mean(axis=axes)
        var = x.value.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.value - mu.reshape(bshape)) * inv.reshape(bshape)
    out = gamma.value.reshape(bshape) * xhat + beta.value.reshape(bshape)
    training = Mode(mode) is Mode.TRAINING

    def back(g):
        dgamma = np.sum(g * xhat, axis=axes)
        dbeta = np.sum(g, axis=axes)
        dxhat = g * gamma.value.reshape(bshape)
        if training:
            dx = (inv.reshape(bshape) / m) * (
                m * dxhat
                - np.sum(dxhat, axis=axes).reshape(bshape)
                - xhat * np.sum(dxhat * xhat, axis=axes).reshape(bshape)
            )
        else:
            dx = dxhat * inv.reshape(bshape)
        return dx, dgamma, dbeta

    return _node(out, (x, gamma, beta), back, "batchnorm")


def dropout(x, p: float, mode: Mode, rng: np.random.Generator | None) -> Node:
    """Inverted dropout: survivors are scaled by ``1 / (1 - p)`` at train time."""
    x = constant(x)
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must be in [0, 1), got {p}")
    if Mode(mode) is Mode.INFERENCE or p == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs a random generator")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _node(x.value * keep, (x,), lambda g: (g * keep,), "dropout")


# -- backward pass ----------------------------------------------------------

def _topological_order(root: Node) -> list[Node]:
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node) -> None:
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    for node in order:
        if node.grad is None:
            node.grad = np.zeros_like(node.value)
    loss.grad = loss.grad + np.ones_like(loss.value)
    for node in reversed(order):
        if node.backward_fn is None:
            continue
        for parent, g in zip(node.parents, node.backward_fn(node.grad)):
            if g is None or not parent.requires_grad:
                continue
            parent.grad = parent.grad + np.reshape(g, parent.shape)


# -- gradient checking ------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    worst: tuple[int, int] | None  # (input position, flat coordinate)
    nan_at: tuple[int, int] | None = None

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        where = f" nan at {self.nan_at}" if self.nan_at else f" worst at {self.worst}"
        return f"grad check {status}: max rel error {self.max_rel_error:.3e}{where}"


def grad_check(fn: Callable[..., Node], inputs: Sequence[np.ndarray], h: float = 1e-5,
               tol: float = 1e-5, floor: float = 1e-2) -> GradCheckReport:
    """Compare analytic gradients of scalar ``fn(*nodes)`` with central differences.

    The per-coordinate error is ``|a - n| / max(|a|, |n|, floor)``; ``floor``
    keeps gradients that are zero up to rounding from producing spurious
    relative errors.
    """
    if h <= 0:
        raise ContractError("grad_check step must be positive")
    base = [np.array(x, dtype=np.float64) for x in inputs]
    nodes = [parameter(x.copy()) for x in base]
    out = fn(*nodes)
    backward(out)
    analytic = [n.grad if n.grad is not None else np.zeros_like(n.value) for n in nodes]

    def evaluate(args):
        return float(fn(*[constant(a) for a in args]).value)

    worst_err, worst = 0.0, None
    for pos, x in enumerate(base):
        for flat in range(x.size):
            args = [b.copy() for b in base]
            args[pos].flat[flat] = x.flat[flat] + h
            fp = evaluate(args)
            args[pos].flat[flat] = x.flat[flat] - h
            fm = evaluate(args)
            numeric = (fp - fm) / (2.0 * h)
            a = analytic[pos].flat[flat]
            if not (np.isfinite(numeric) and np.isfinite(a)):
                return GradCheckReport(float("nan"), False, (pos, flat), nan_at=(pos, flat))
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            if err > worst_err or worst is None:
                worst_err, worst = err, (pos, flat)
    return GradCheckReport(worst_err, worst_err <= tol, worst)
