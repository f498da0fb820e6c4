"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Only the primitives a small vision transformer needs are provided. Every
operation executed while a :class:`Tape` is active (and with at least one
input that requires grad) is appended to that tape together with its
backward rule; :func:`backward` replays the tape in reverse.
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import NumericError, ShapeError

_state = threading.local()

GELU_C = math.sqrt(2.0 / math.pi)
LN_EPS = 1e-5


class Tensor:
    """N-d float64 array that can take part in gradient recording."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_leaf")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data, dtype=np.float64)
        # ascontiguousarray would promote 0-d arrays to 1-d
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._leaf = True

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def _not_scalar(t: Tensor):
    raise ShapeError("item", t.shape, ())


@dataclass
class _Node:
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    op: str


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; nested tapes shadow the outer one.
    """

    nodes: list = field(default_factory=list)

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> Optional[Tape]:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap ``out_data`` as a Tensor and register ``backward_fn`` on the active tape.

    ``backward_fn(g)`` returns one gradient (or None) per input.
    """
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._leaf = False
        tape.nodes.append(_Node(tuple(inputs), out, backward_fn, op))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return record("add", a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return record("sub", a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    return record("mul", ad * bd, (a, b),
                  lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh form: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x**3)))."""
    xd = x.data
    x2 = xd * xd
    u = GELU_C * (xd + 0.044715 * x2 * xd)
    t = np.tanh(u)
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        du = GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return record("gelu", out, (x,), bw)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    def bw(g):
        if bd.ndim == 2:
            # x[..., n] @ W[n, m]: fold leading axes for the weight grad
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            ga = g @ bd.T
        else:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return record("matmul", out, (a, b), bw)


# ---------------------------------------------------------------------------
# normalisation / reductions
# ---------------------------------------------------------------------------

def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    xd = x.data
    e = np.exp(xd - xd.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return record("softmax", s, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Layer norm over the last axis with affine scale/shift.

    Rows with exactly zero spread normalise to 0 before the affine step.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gamma.shape if gamma.shape != (d,) else beta.shape)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    flat = np.ptp(xd, axis=-1, keepdims=True) == 0
    if flat.any():
        xc = np.where(flat, 0.0, xc)
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def bw(g):
        gh = g * gd
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return record("layer_norm", out, (x, gamma, beta), bw)


def sum_(x: Tensor, axis=None) -> Tensor:
    shape = x.shape
    out = x.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return record("sum", np.asarray(out), (x,), bw)


def mean(x: Tensor, axis=None) -> Tensor:
    shape = x.shape
    n = x.data.size if axis is None else np.prod([shape[a] for a in np.atleast_1d(axis)])
    out = x.data.mean(axis=axis)

    def bw(g):
        if axis is None:
            return (np.full(shape, float(g) / n),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape) / n,)

    return record("mean", np.asarray(out), (x,), bw)


def cross_entropy(logits: Tensor, labels, weights=None) -> Tensor:
    """Mean softmax cross-entropy of ``logits`` [B, C] against integer labels.

    With per-class ``weights`` the mean is weighted: sum(w_y * ce) / sum(w_y).
    """
    ld = logits.data
    if ld.ndim != 2:
        raise ShapeError("cross_entropy", ld.shape, np.shape(labels))
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (ld.shape[0],):
        raise ShapeError("cross_entropy", ld.shape, y.shape)
    if y.size and (y.min() < 0 or y.max() >= ld.shape[1]):
        raise ValueError(f"cross_entropy: label out of range [0, {ld.shape[1]})")
    m = ld.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(ld - m).sum(axis=1))
    rows = np.arange(ld.shape[0])
    ce = lse - ld[rows, y]
    w = np.ones(ld.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)[y]
    wsum = w.sum()
    out = np.asarray((w * ce).sum() / wsum)

    def bw(g):
        p = np.exp(ld - lse[:, None])
        p[rows, y] -= 1.0
        return (float(g) * p * (w / wsum)[:, None],)

    return record("cross_entropy", out, (logits,), bw)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", src, shape) from None
    return record("reshape", out, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError("transpose", x.shape, axes)
    inv = tuple(np.argsort(axes))
    return record("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = x.shape
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeError("broadcast_to", src, shape) from None
    return record("broadcast_to", out, (x,), lambda g: (_unbroadcast(g, src),))


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (the token axis for [B, T, D] sequences)."""
    parts = [as_tensor(p) for p in parts]
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != len(ref) or any(
            i != axis % len(ref) and p.shape[i] != ref[i] for i in range(len(ref))
        ):
            raise ShapeError("concat", ref, p.shape)
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([p.data for p in parts], axis=axis)
    return record("concat", out, tuple(parts), lambda g: tuple(np.split(g, cuts, axis=axis)))


def take(x: Tensor, start: int, stop: int, axis: int = 1) -> Tensor:
    """Contiguous slice [start, stop) along ``axis``."""
    n = x.shape[axis]
    if not 0 <= start <= stop <= n:
        raise ShapeError("take", x.shape, (start, stop))
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    src = x.shape

    def bw(g):
        full = np.zeros(src)
        full[idx] = g
        return (full,)

    return record("take", x.data[idx].copy(), (x,), bw)


def scale_grad(x: Tensor, factor: float) -> Tensor:
    """Identity forward; backward multiplies the upstream gradient by ``factor``."""
    return record("scale_grad", x.data.copy(), (x,), lambda g: (g * factor,))


# ---------------------------------------------------------------------------
# backward and gradient check
# ---------------------------------------------------------------------------

def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every recorded leaf requiring grad."""
    if loss.data.size != 1:
        raise ShapeError("backward", loss.shape, ())
    if not tape.nodes:
        raise ValueError("backward: tape is empty")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._leaf:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                grads[key] = gi if key not in grads else grads[key] + gi


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    *,
    reference: Optional[Callable[[], Tensor]] = None,
    max_coords: Optional[int] = 200,
    seed: int = 0,
) -> float:
    """Max relative error between taped gradients of ``f`` and central differences.

    ``reference`` (default ``f``) is the scalar whose finite differences the
    analytic gradient should match; it differs from ``f`` only when the
    backward rules deliberately depart from the true derivative (gradient
    reversal). Coordinates are sampled uniformly over all params when their
    total count exceeds ``max_coords``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"grad_check: eps {eps} outside [1e-7, 1e-3]")
    reference = reference or f
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("grad_check: objective is not finite")
    backward(loss, tape)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad for p in params]

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.data.size)]
    if max_coords is not None and len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[k] for k in np.sort(pick)]

    def value() -> float:
        v = float(reference().data)
        if not math.isfinite(v):
            raise NumericError("grad_check: objective is not finite")
        return v

    worst = 0.0
    for i, j in coords:
        flat = params[i].data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + eps
        fp = value()
        flat[j] = orig - eps
        fm = value()
        flat[j] = orig
        num = (fp - fm) / (2 * eps)
        ana = analytic[i].reshape(-1)[j]
        err = abs(ana - num) / max(1.0, abs(ana), abs(num))
        worst = max(worst, err)
    return worst
