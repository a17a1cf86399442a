"""Minimal reverse-mode autodiff substrate shared by the detector and the policy.

Everything is float64 numpy. A forward pass builds a small tape of `Var`
nodes; `backward` walks it once and accumulates gradients into the leaf
nodes. Parameters live in a `ParamStore` (named tensors) and are wrapped
into leaf `Var`s per forward pass, so forward/backward are pure given the
store contents.
"""

from __future__ import annotations

import json
import math
from typing import Callable, Iterable, Mapping

import numpy as np

CHECKPOINT_VERSION = 1

_META_KEY = "__objsearch_meta__"
_VERSION_KEY = "__objsearch_checkpoint_version__"


class ShapeError(ValueError):
    """Input or parameter shape does not match what the graph expects."""


class NonFiniteError(FloatingPointError):
    """A value that must be finite (loss, gradient) is NaN or infinite."""


# ---------------------------------------------------------------------------
# autodiff tape
# ---------------------------------------------------------------------------

class Var:
    """One node of the computation tape.

    `parents` holds (parent, vjp) pairs where vjp maps the upstream gradient
    to this parent's gradient contribution.
    """

    __slots__ = ("data", "grad", "parents")

    # keep numpy from absorbing Var operands; mixed expressions defer to
    # the reflected operators below
    __array_ufunc__ = None

    def __init__(self, data, parents: tuple = ()):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.parents = parents

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    # operator sugar; every op lives in a module-level function below
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

    def __repr__(self) -> str:
        return f"Var(shape={self.data.shape})"


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` to undo numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = Var(a.data + b.data, (
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(g, b.data.shape)),
    ))
    return out


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return Var(a.data - b.data, (
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(-g, b.data.shape)),
    ))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return Var(a.data * b.data, (
        (a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
        (b, lambda g: _unbroadcast(g * a.data, b.data.shape)),
    ))


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    if a.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"matmul mismatch: {a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data

    def grad_a(g):
        return g @ b.data.T

    def grad_b(g):
        if a.data.ndim == 1:
            return np.outer(a.data, g)
        return a.data.T @ g

    return Var(out_data, ((a, grad_a), (b, grad_b)))


def dense(x, w, b) -> Var:
    """Affine layer x @ w + b (x may be a single vector or a batch)."""
    return add(matmul(x, w), b)


def relu(x) -> Var:
    x = as_var(x)
    mask = (x.data > 0).astype(np.float64)
    return Var(x.data * mask, ((x, lambda g: g * mask),))


def sigmoid(x) -> Var:
    x = as_var(x)
    out_data = 1.0 / (1.0 + np.exp(-x.data))
    return Var(out_data, ((x, lambda g: g * out_data * (1.0 - out_data)),))


def log(x) -> Var:
    x = as_var(x)
    return Var(np.log(x.data), ((x, lambda g: g / x.data),))


def square(x) -> Var:
    x = as_var(x)
    return Var(x.data ** 2, ((x, lambda g: g * 2.0 * x.data),))


def clip(x, lo: float, hi: float) -> Var:
    """Clamp; gradient passes through only inside the interval."""
    x = as_var(x)
    mask = ((x.data >= lo) & (x.data <= hi)).astype(np.float64)
    return Var(np.clip(x.data, lo, hi), ((x, lambda g: g * mask),))


def concat(parts: Iterable) -> Var:
    parts = [as_var(p) for p in parts]
    sizes = [p.data.shape[-1] for p in parts]
    offsets = np.cumsum([0] + sizes)
    out_data = np.concatenate([p.data for p in parts], axis=-1)

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]
        return lambda g: g[..., lo:hi]

    return Var(out_data, tuple((p, make_vjp(i)) for i, p in enumerate(parts)))


def softmax(x) -> Var:
    """Softmax over the last axis, numerically shifted."""
    x = as_var(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        return out_data * (g - dot)

    return Var(out_data, ((x, vjp),))


def vsum(x) -> Var:
    x = as_var(x)
    return Var(x.data.sum(), ((x, lambda g: np.full(x.data.shape, g)),))


def sum_last(x) -> Var:
    """Sum over the last axis."""
    x = as_var(x)
    n = x.data.shape[-1]
    return Var(x.data.sum(axis=-1), ((x, lambda g: np.repeat(np.expand_dims(g, -1), n, axis=-1)),))


def vmean(x) -> Var:
    x = as_var(x)
    n = x.data.size
    return Var(x.data.mean(), ((x, lambda g: np.full(x.data.shape, g / n)),))


def pick(x, index: int) -> Var:
    """Select one entry of a 1-d vector."""
    x = as_var(x)
    if x.data.ndim != 1:
        raise ShapeError("pick expects a 1-d vector")

    def vjp(g):
        out = np.zeros_like(x.data)
        out[index] = g
        return out

    return Var(x.data[index], ((x, vjp),))


def backward(root: Var) -> None:
    """Accumulate droot/dleaf into every node's .grad (root must be scalar)."""
    if root.data.shape != ():
        raise ShapeError("backward root must be a scalar")
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    root.grad = np.asarray(1.0)
    for node in reversed(order):
        if node.grad is None:
            continue
        for parent, vjp in node.parents:
            contrib = np.asarray(vjp(node.grad), dtype=np.float64)
            parent.grad = contrib if parent.grad is None else parent.grad + contrib


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

class ParamStore:
    """Named float64 tensors with fixed shapes."""

    def __init__(self, tensors: Mapping[str, np.ndarray] | None = None):
        self._tensors: dict[str, np.ndarray] = {}
        if tensors:
            for name, value in tensors.items():
                self.add(name, value)

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter {name!r}")
        self._tensors[name] = np.array(value, dtype=np.float64)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        current = self._tensors[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != current.shape:
            raise ShapeError(f"shape of {name!r} is fixed at {current.shape}, got {value.shape}")
        self._tensors[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self._tensors.items()})

    def leaves(self) -> dict[str, Var]:
        """Fresh leaf Vars over the current tensor values."""
        return {name: Var(value) for name, value in self._tensors.items()}

    def flat(self) -> np.ndarray:
        """Concatenation of all tensors in name-insertion order."""
        return np.concatenate([v.ravel() for v in self._tensors.values()]) if self._tensors else np.empty(0)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    """Uniform in [-a, a] with a = sqrt(6 / (fan_in + fan_out))."""
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def value_and_grad(fn: Callable[[dict[str, Var]], Var], params: ParamStore) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate a scalar-valued graph over `params` and return (value, grads).

    Parameters that the graph never touches get zero gradients.
    """
    leaves = params.leaves()
    out = fn(leaves)
    backward(out)
    grads = {
        name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data))
        for name, leaf in leaves.items()
    }
    return float(out.data), grads


def sgd_step(params: ParamStore, grads: Mapping[str, np.ndarray], lr: float) -> ParamStore:
    """In-place p <- p - lr * g. Rejects non-finite gradients."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    for name, g in grads.items():
        params[name] = params[name] - lr * np.asarray(g, dtype=np.float64)
    return params


def accumulate_grads(total: dict[str, np.ndarray] | None, grads: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    if total is None:
        return {k: np.array(v, dtype=np.float64) for k, v in grads.items()}
    for k, v in grads.items():
        if k in total:
            total[k] = total[k] + v
        else:
            total[k] = np.array(v, dtype=np.float64)
    return total


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(params: ParamStore, path, meta: Mapping[str, str] | None = None) -> None:
    """Write named tensors plus a JSON metadata blob to an .npz file."""
    payload: dict[str, np.ndarray] = {name: value for name, value in params.items()}
    payload[_VERSION_KEY] = np.asarray(CHECKPOINT_VERSION)
    payload[_META_KEY] = np.asarray(json.dumps(dict(meta or {}), sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path) -> tuple[ParamStore, dict[str, str]]:
    with np.load(path) as z:
        if _VERSION_KEY not in z.files:
            raise ValueError(f"{path}: not an objsearch checkpoint")
        version = int(z[_VERSION_KEY])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        meta = json.loads(str(z[_META_KEY]))
        store = ParamStore()
        for name in z.files:
            if name in (_VERSION_KEY, _META_KEY):
                continue
            store.add(name, z[name])
    return store, meta
