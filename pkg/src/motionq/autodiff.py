"""Reverse-mode differentiation over float64 numpy arrays.

A :class:`Node` wraps a value array plus the closure that maps the output
gradient to input gradients.  Ops accept arbitrary leading batch
dimensions where that is natural (``[..., m, k] @ [k, n]``, softmax over
the last axis, layer norm over the last axis).

Gradients are accumulated additively: a node consumed twice receives the
sum of both contributions, which is what makes the recurrent query (reused
every frame) train correctly.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import DimensionError, NonFiniteError

Tensor = np.ndarray

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

# op names whose backward is deliberately scaled; only used by the
# verification harness to prove it can detect a broken gradient
_CORRUPTED: set[str] = set()


_state = threading.local()


@contextlib.contextmanager
def no_grad():
    """Build no graph inside this block (per thread)."""
    prev = getattr(_state, "no_grad", False)
    _state.no_grad = True
    try:
        yield
    finally:
        _state.no_grad = prev


@contextlib.contextmanager
def corrupt_backward(op: str):
    _CORRUPTED.add(op)
    try:
        yield
    finally:
        _CORRUPTED.discard(op)


def _check_finite(value: np.ndarray, op: str) -> None:
    if not np.isfinite(value).all():
        raise NonFiniteError(f"{op} produced non-finite values")


class Node:
    __slots__ = ("value", "grad", "parents", "backward_fn", "op", "requires_grad")

    def __init__(self, value, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = "leaf"):
        value = np.asarray(value, dtype=np.float64)
        if op == "leaf":
            _check_finite(value, "leaf")
        self.value = value
        self.parents = _parents
        self.backward_fn = _backward
        self.op = op
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(value) if requires_grad and not _parents else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad = np.zeros_like(self.value)

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        return f"Node(op={self.op}, shape={self.shape})"

    def __add__(self, other):
        if isinstance(other, Node):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Node):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, Node):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __pow__(self, p):
        return pow_scalar(self, float(p))

    def sum(self):
        return sum_all(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def param(value) -> Node:
    """Trainable leaf."""
    return Node(np.array(value, dtype=np.float64), requires_grad=True)


def constant(value) -> Node:
    return Node(value, requires_grad=False)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _make(value: np.ndarray, parents: Sequence[Node], backward: Callable, op: str) -> Node:
    _check_finite(value, op)
    if not getattr(_state, "no_grad", False) and any(p.requires_grad for p in parents):
        return Node(value, True, _parents=tuple(parents), _backward=backward, op=op)
    return Node(value, False, op=op)


def _require_same_shape(a: Node, b: Node, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- arithmetic


def add(a: Node, b: Node) -> Node:
    _require_same_shape(a, b, "add")
    return _make(a.value + b.value, (a, b), lambda g: (g, g), "add")


def sub(a: Node, b: Node) -> Node:
    _require_same_shape(a, b, "sub")
    return _make(a.value - b.value, (a, b), lambda g: (g, -g), "sub")


def mul(a: Node, b: Node) -> Node:
    _require_same_shape(a, b, "mul")
    av, bv = a.value, b.value
    return _make(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def add_bias(x: Node, b: Node) -> Node:
    """``x[..., n] + b[n]``."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias: shape mismatch {x.shape} vs {b.shape}")
    n = b.shape[0]
    return _make(x.value + b.value, (x, b), lambda g: (g, g.reshape(-1, n).sum(axis=0)), "add_bias")


def scale(x: Node, c: float) -> Node:
    return _make(x.value * c, (x,), lambda g: (g * c,), "scale")


def add_scalar(x: Node, c: float) -> Node:
    return _make(x.value + c, (x,), lambda g: (g,), "add_scalar")


def relu(x: Node) -> Node:
    mask = x.value > 0
    return _make(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,), "relu")


def gelu(x: Node) -> Node:
    """Exact (erf) GELU."""
    xv = x.value
    cdf = 0.5 * (1.0 + erf(xv / _SQRT2))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xv * xv)
        return (g * (cdf + xv * pdf),)

    return _make(xv * cdf, (x,), backward, "gelu")


def log(x: Node) -> Node:
    xv = x.value
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xv)
    return _make(out, (x,), lambda g: (g / xv,), "log")


def exp(x: Node) -> Node:
    out = np.exp(x.value)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def pow_scalar(x: Node, p: float) -> Node:
    """``x ** p`` for ``x >= 0``; the derivative at 0 is taken as 0 for p != 1."""
    xv = x.value
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.power(xv, p)

    def backward(g):
        if p == 0.0:
            return (np.zeros_like(g),)
        if p == 1.0:
            return (g,)
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(xv > 0, p * np.power(xv, p - 1.0), 0.0)
        return (g * d,)

    return _make(out, (x,), backward, "pow")


def clamp_min(x: Node, lo: float) -> Node:
    """``max(x, lo)`` with the gradient passed straight through the clamp."""
    return _make(np.maximum(x.value, lo), (x,), lambda g: (g,), "clamp_min")


# ------------------------------------------------------------- linear algebra


def matmul(a: Node, b: Node) -> Node:
    """``[..., m, k] @ [k, n]`` or ``[..., m, k] @ [..., k, n]`` with equal batch dims."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    shared_weight = b.ndim == 2
    if not shared_weight and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch dims differ {a.shape} vs {b.shape}")
    av, bv = a.value, b.value

    def backward(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        if shared_weight and av.ndim > 2:
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(av, -1, -2) @ g
        return ga, gb

    return _make(av @ bv, (a, b), backward, "matmul")


def softmax_lastdim(x: Node) -> Node:
    xv = x.value
    if xv.ndim == 0 or xv.shape[-1] < 1:
        raise DimensionError(f"softmax: needs a non-empty last axis, got {xv.shape}")
    e = np.exp(xv - xv.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), backward, "softmax")


def layer_norm(x: Node, gain: Node, bias: Node, eps: float = 1e-5) -> Node:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: affine params {gain.shape}/{bias.shape} vs input {x.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    xv = x.value
    mu = xv.mean(axis=-1, keepdims=True)
    centered = xv - mu
    rstd = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * rstd
    gv = gain.value

    def backward(g):
        dxhat = g * gv
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        g2 = g.reshape(-1, d)
        return dx, (g2 * xhat.reshape(-1, d)).sum(axis=0), g2.sum(axis=0)

    return _make(xhat * gv + bias.value, (x, gain, bias), backward, "layer_norm")


# ------------------------------------------------------------------- shaping


def concat(parts: Sequence[Node], axis: int = 0) -> Node:
    parts = list(parts)
    if not parts:
        raise DimensionError("concat: no parts")
    if len(parts) == 1:
        return parts[0]
    ndim = parts[0].ndim
    ax = axis % ndim
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != ndim or any(p.shape[i] != ref[i] for i in range(ndim) if i != ax):
            raise DimensionError(f"concat: dimension mismatch {ref} vs {p.shape} on axis {axis}")
    bounds = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([p.value for p in parts], axis=ax), parts, backward, "concat")


def getitem(x: Node, idx) -> Node:
    """Basic (slice/integer) indexing."""
    out = x.value[idx]
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _make(np.array(out), (x,), backward, "slice")


def reshape(x: Node, shape) -> Node:
    orig = x.shape
    try:
        out = x.value.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {orig} as {shape}") from exc
    return _make(out, (x,), lambda g: (g.reshape(orig),), "reshape")


def flatten(x: Node) -> Node:
    return reshape(x, (-1,))


def transpose(x: Node, axes: Sequence[int] | None = None) -> Node:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(a % x.ndim for a in axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.value, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def swap_last(x: Node) -> Node:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def broadcast_leading(x: Node, lead: tuple[int, ...]) -> Node:
    """Repeat ``x`` over new leading dims ``lead``."""
    if not lead:
        return x
    k = len(lead)
    out = np.broadcast_to(x.value, tuple(lead) + x.shape).copy()
    return _make(out, (x,), lambda g: (g.sum(axis=tuple(range(k))),), "broadcast")


def sum_all(x: Node) -> Node:
    shape = x.shape
    return _make(np.array(x.value.sum()), (x,), lambda g: (np.full(shape, float(g)),), "sum")


def mean_all(x: Node) -> Node:
    n = x.value.size
    return scale(sum_all(x), 1.0 / n)


def pick(x: Node, index: np.ndarray) -> Node:
    """``x[..., index[...]]`` along the last axis."""
    index = np.asarray(index, dtype=np.int64)
    if index.shape != x.shape[:-1]:
        raise DimensionError(f"pick: index shape {index.shape} vs {x.shape}")
    expanded = index[..., None]
    out = np.take_along_axis(x.value, expanded, axis=-1)[..., 0]
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        np.put_along_axis(full, expanded, g[..., None], axis=-1)
        return (full,)

    return _make(out, (x,), backward, "pick")


# ------------------------------------------------------------------ backward


def _topological(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
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
    """Accumulate d(loss)/d(leaf) into every reachable trainable leaf's ``grad``."""
    if loss.value.size != 1:
        raise DimensionError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            node.grad = node.grad + g
            continue
        parent_grads = node.backward_fn(g)
        if node.op in _CORRUPTED:
            parent_grads = tuple(pg * 1.5 for pg in parent_grads)
        for p, pg in zip(node.parents, parent_grads):
            if not p.requires_grad:
                continue
            key = id(p)
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg


# ---------------------------------------------------------------- verification


def _rel_err(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1.0, abs(numeric))


def grad_check(f: Callable[[Node], Node], x, h: float = 1e-5, coords: Iterable[int] | None = None) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |central difference|)."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=np.float64)
    leaf = param(x)
    backward(f(leaf))
    analytic = leaf.grad.reshape(-1)
    coords = range(x.size) if coords is None else coords
    worst = 0.0
    for i in coords:
        xp = x.copy().reshape(-1)
        xp[i] += h
        xm = x.copy().reshape(-1)
        xm[i] -= h
        fp = f(constant(xp.reshape(x.shape))).item()
        fm = f(constant(xm.reshape(x.shape))).item()
        worst = max(worst, _rel_err(analytic[i], (fp - fm) / (2 * h)))
    return worst


def grad_check_params(loss_fn: Callable[[], Node], probes: Sequence[tuple[Node, int]], h: float = 1e-5) -> float:
    """Finite-difference check of ``loss_fn`` w.r.t. selected coordinates of trainable leaves.

    ``probes`` lists ``(leaf, flat_index)`` pairs.  Leaf values are rebound
    (never mutated) while probing and restored afterwards.
    """
    leaves = {id(n): n for n, _ in probes}
    for n in leaves.values():
        n.zero_grad()
    backward(loss_fn())
    worst = 0.0
    for node, i in probes:
        analytic = node.grad.reshape(-1)[i]
        original = node.value
        try:
            bumped = original.copy().reshape(-1)
            bumped[i] += h
            node.value = bumped.reshape(original.shape)
            fp = loss_fn().item()
            bumped[i] -= 2 * h
            node.value = bumped.reshape(original.shape)
            fm = loss_fn().item()
        finally:
            node.value = original
        worst = max(worst, _rel_err(analytic, (fp - fm) / (2 * h)))
    for n in leaves.values():
        n.zero_grad()
    return worst
