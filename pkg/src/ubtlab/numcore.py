"""Dense float64 tensors with a small reverse-mode gradient engine.

Operations build nodes on the active :class:`GradTape` whenever one of their
inputs requires a gradient.  ``backward`` walks the tape in reverse creation
order (which is already a topological order), returns gradients keyed by
parameter name and clears the tape.
"""

from __future__ import annotations

from collections import OrderedDict
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

DTYPE = np.float64
NORM_EPS = 1e-12


class NumcoreError(Exception):
    """Base class for numerical failures."""


class ZeroNorm(NumcoreError):
    pass


class NonScalarLoss(NumcoreError):
    pass


class NonFiniteGradient(NumcoreError):
    pass


class NonFiniteValue(NumcoreError):
    pass


class ShapeMismatch(NumcoreError):
    pass


_TAPES: list["GradTape"] = []


class Tensor:
    """Immutable array value, optionally a node of the active tape."""

    __slots__ = ("data", "requires_grad", "name", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteValue(f"non-finite value in tensor {name or ''}".strip())
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value: np.ndarray, parents: Sequence[Tensor], vjp) -> Tensor:
    out = Tensor(value)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
        if _TAPES:
            _TAPES[-1].nodes.append(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data / b.data, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * a.data / b.data**2, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    return _node(a.data**2, (a,), lambda g: (2.0 * a.data * g,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out**2),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only where the input lies inside [lo, hi]."""
    inside = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------- structural

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a: Tensor) -> Tensor:
    return _node(a.data.T, (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def diagonal(a: Tensor) -> Tensor:
    n = min(a.shape)

    def vjp(g):
        full = np.zeros(a.shape)
        full[np.arange(n), np.arange(n)] = g
        return (full,)

    return _node(np.diagonal(a.data).copy(), (a,), vjp)


def take_rows(a: Tensor, index) -> Tensor:
    idx = np.asarray(index, dtype=np.int64)

    def vjp(g):
        full = np.zeros(a.shape)
        np.add.at(full, idx, g)
        return (full,)

    return _node(a.data[idx], (a,), vjp)


def total(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    return total(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def logsumexp(a: Tensor, axis: int) -> Tensor:
    m = np.max(a.data, axis=axis, keepdims=True)
    shifted = np.exp(a.data - m)
    s = shifted.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    soft = shifted / s

    def vjp(g):
        return (np.expand_dims(g, axis) * soft,)

    return _node(out, (a,), vjp)


def l2_normalize(v, axis: int = -1) -> Tensor:
    """Scale every slice along ``axis`` to unit Euclidean norm.

    Raises ZeroNorm when any slice norm is at or below 1e-12.
    """
    v = as_tensor(v)
    norm = np.sqrt(np.sum(v.data**2, axis=axis, keepdims=True))
    if np.any(norm <= NORM_EPS):
        raise ZeroNorm("cannot normalize a zero-norm slice")
    out = v.data / norm

    def vjp(g):
        proj = np.sum(g * out, axis=axis, keepdims=True)
        return ((g - out * proj) / norm,)

    return _node(out, (v,), vjp)


def cosine_similarity(u, v) -> float:
    u = np.asarray(u.data if isinstance(u, Tensor) else u, dtype=DTYPE).ravel()
    v = np.asarray(v.data if isinstance(v, Tensor) else v, dtype=DTYPE).ravel()
    if u.shape != v.shape:
        raise ShapeMismatch(f"cosine_similarity {u.shape} vs {v.shape}")
    nu, nv = np.sqrt(u @ u), np.sqrt(v @ v)
    if nu <= NORM_EPS or nv <= NORM_EPS:
        raise ZeroNorm("cosine similarity of a zero vector")
    # product of per-vector scalings keeps the result symmetric bit-for-bit
    return float(np.clip(np.sum(u * v) / (nu * nv), -1.0, 1.0))


# ---------------------------------------------------------------- parameters

class ParamSet:
    """Named parameter arrays with fixed shapes and insertion order."""

    def __init__(self, items=None):
        self._values: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, value in (items.items() if isinstance(items, dict) else items or ()):
            self.add(name, value)

    def add(self, name: str, value) -> None:
        if name in self._values:
            raise KeyError(f"duplicate parameter {name!r}")
        arr = np.array(value, dtype=DTYPE)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteValue(f"parameter {name!r} is not finite")
        self._values[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __setitem__(self, name: str, value) -> None:
        arr = np.array(value, dtype=DTYPE)
        if arr.shape != self._values[name].shape:
            raise ShapeMismatch(f"parameter {name!r}: {arr.shape} != {self._values[name].shape}")
        self._values[name] = arr

    def __contains__(self, name) -> bool:
        return name in self._values

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def names(self) -> list[str]:
        return list(self._values)

    def items(self):
        return self._values.items()

    def copy(self) -> "ParamSet":
        return ParamSet((k, v.copy()) for k, v in self._values.items())

    def zeros_like(self) -> "ParamSet":
        return ParamSet((k, np.zeros_like(v)) for k, v in self._values.items())

    def equal(self, other: "ParamSet") -> bool:
        """Bit-identical comparison of names, shapes and values."""
        return self.names() == other.names() and all(
            np.array_equal(self[k], other[k]) for k in self)

    def __repr__(self) -> str:
        body = ", ".join(f"{k}{list(v.shape)}" for k, v in self._values.items())
        return f"ParamSet({body})"


class GradTape:
    """Records graph nodes created while active; see :func:`backward`."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.leaves: OrderedDict[str, Tensor] = OrderedDict()

    def watch(self, params: ParamSet, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for name, value in params.items():
            leaf = Tensor(value, requires_grad=True, name=prefix + name)
            self.leaves[prefix + name] = leaf
            out[name] = leaf
        return out

    def __enter__(self) -> "GradTape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def clear(self) -> None:
        self.nodes.clear()
        self.leaves.clear()


@contextmanager
def no_tape():
    """Temporarily detach from any active tape."""
    saved = list(_TAPES)
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES.extend(saved)


def backward(tape: GradTape, loss: Tensor) -> ParamSet:
    """Gradients of a scalar ``loss`` for every watched leaf, in watch order."""
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss has shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None or node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    out = ParamSet()
    for name, leaf in tape.leaves.items():
        g = grads.get(id(leaf))
        g = np.zeros_like(leaf.data) if g is None else np.array(g, dtype=DTYPE).reshape(leaf.shape)
        if not np.all(np.isfinite(g)):
            tape.clear()
            raise NonFiniteGradient(f"non-finite gradient for {name!r}")
        out.add(name, g)
    tape.clear()
    return out


def sgd_step(params: ParamSet, grads: ParamSet, lr: float, direction: str = "descend") -> ParamSet:
    """Plain SGD update returning a new ParamSet; ``ascend`` flips the sign."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if direction not in ("descend", "ascend"):
        raise ValueError(f"unknown direction {direction!r}")
    sign = -1.0 if direction == "descend" else 1.0
    out = ParamSet()
    for name, value in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name!r}")
        out.add(name, value + sign * lr * g)
    return out


def finite_difference_grad(fn: Callable[[ParamSet], float], params: ParamSet,
                           h: float = 1e-5) -> ParamSet:
    """Central-difference gradient of a scalar function of ``params``."""
    out = ParamSet()
    for name, value in params.items():
        g = np.zeros_like(value)
        flat = g.reshape(-1)
        for i in range(value.size):
            plus, minus = params.copy(), params.copy()
            plus[name].reshape(-1)[i] += h
            minus[name].reshape(-1)[i] -= h
            flat[i] = (fn(plus) - fn(minus)) / (2.0 * h)
        out.add(name, g)
    return out


def relative_error(a, b, floor: float = 1e-12) -> float:
    """Norm-wise relative error ||a - b|| / max(||a||, ||b||, floor)."""
    a, b = np.asarray(a, dtype=DTYPE).ravel(), np.asarray(b, dtype=DTYPE).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def flatten(params: ParamSet) -> np.ndarray:
    return np.concatenate([v.ravel() for _, v in params.items()]) if len(params) else np.zeros(0)
