"""Minimal reverse-mode automatic differentiation over dense 2-D arrays.

Everything is float64. A forward pass builds a graph of `Var` nodes; calling
`backward()` on a scalar node replays the recorded local-gradient closures in
reverse topological order. Learnable matrices live in a `ParamStore`, which
also owns the Adam moment buffers.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


class ShapeError(ValueError):
    """Operand shapes incompatible for the requested primitive."""


class ContractError(RuntimeError):
    """An API precondition was violated (non-scalar loss, step before backward, ...)."""


def _as_matrix(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"expected 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError("non-finite values entering the computation graph")
    return arr


class Var:
    """One node of the computation graph: a 2-D value plus backward closure."""

    __slots__ = ("value", "grad", "_parents", "_backward", "name")

    def __init__(self, values, parents=(), backward=None, name: str | None = None):
        self.value = _as_matrix(values)
        self.grad: np.ndarray | None = None
        self._parents = tuple(parents)
        self._backward = backward
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def backward(self) -> None:
        """Accumulate d(self)/d(node) into every reachable node's .grad."""
        if self.value.shape != (1, 1):
            raise ContractError(f"backward requires a scalar (1x1) node, got {self.value.shape}")
        order: list[Var] = []
        seen: set[int] = set()
        stack: list[tuple[Var, bool]] = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        for node in order:
            node.grad = np.zeros_like(node.value)
        self.grad = np.ones((1, 1))
        for node in reversed(order):
            if node._backward is not None:
                if not np.all(np.isfinite(node.grad)):
                    raise FloatingPointError("non-finite gradient during backward pass")
                node._backward(node.grad)


def _check_matmul(a: Var, b: Var) -> None:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul mismatch: {a.shape} @ {b.shape}")


def matmul(a: Var, b: Var) -> Var:
    _check_matmul(a, b)
    out_val = a.value @ b.value

    def bwd(g):
        a.grad += g @ b.value.T
        b.grad += a.value.T @ g

    return Var(out_val, (a, b), bwd)


def _broadcastable(a_shape, b_shape) -> bool:
    return all(x == y or x == 1 or y == 1 for x, y in zip(a_shape, b_shape))


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    out = g
    if shape[0] == 1 and g.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    return out


def add(a: Var, b: Var) -> Var:
    if not _broadcastable(a.shape, b.shape):
        raise ShapeError(f"add mismatch: {a.shape} + {b.shape}")
    out_val = a.value + b.value

    def bwd(g):
        a.grad += _unbroadcast(g, a.shape)
        b.grad += _unbroadcast(g, b.shape)

    return Var(out_val, (a, b), bwd)


def sub(a: Var, b: Var) -> Var:
    if not _broadcastable(a.shape, b.shape):
        raise ShapeError(f"sub mismatch: {a.shape} - {b.shape}")
    out_val = a.value - b.value

    def bwd(g):
        a.grad += _unbroadcast(g, a.shape)
        b.grad -= _unbroadcast(g, b.shape)

    return Var(out_val, (a, b), bwd)


def elementwise_mul(a: Var, b: Var) -> Var:
    if not _broadcastable(a.shape, b.shape):
        raise ShapeError(f"mul mismatch: {a.shape} * {b.shape}")
    out_val = a.value * b.value

    def bwd(g):
        a.grad += _unbroadcast(g * b.value, a.shape)
        b.grad += _unbroadcast(g * a.value, b.shape)

    return Var(out_val, (a, b), bwd)


def scale(a: Var, c: float) -> Var:
    out_val = a.value * c

    def bwd(g):
        a.grad += g * c

    return Var(out_val, (a,), bwd)


def concat_cols(*parts: Var) -> Var:
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols row mismatch: {[p.shape for p in parts]}")
    widths = [p.shape[1] for p in parts]
    out_val = np.concatenate([p.value for p in parts], axis=1)

    def bwd(g):
        lo = 0
        for p, w in zip(parts, widths):
            p.grad += g[:, lo:lo + w]
            lo += w

    return Var(out_val, parts, bwd)


def slice_cols(a: Var, lo: int, hi: int) -> Var:
    if not (0 <= lo < hi <= a.shape[1]):
        raise ShapeError(f"slice_cols [{lo}:{hi}] out of range for {a.shape}")
    out_val = a.value[:, lo:hi]

    def bwd(g):
        a.grad[:, lo:hi] += g

    return Var(out_val, (a,), bwd)


def sigmoid(a: Var) -> Var:
    out_val = 1.0 / (1.0 + np.exp(-a.value))

    def bwd(g):
        a.grad += g * out_val * (1.0 - out_val)

    return Var(out_val, (a,), bwd)


def tanh(a: Var) -> Var:
    out_val = np.tanh(a.value)

    def bwd(g):
        a.grad += g * (1.0 - out_val * out_val)

    return Var(out_val, (a,), bwd)


def relu(a: Var) -> Var:
    out_val = np.maximum(a.value, 0.0)

    def bwd(g):
        a.grad += g * (a.value > 0.0)

    return Var(out_val, (a,), bwd)


def identity(a: Var) -> Var:
    def bwd(g):
        a.grad += g

    return Var(a.value.copy(), (a,), bwd)


def sum_all(a: Var) -> Var:
    out_val = np.array([[a.value.sum()]])

    def bwd(g):
        a.grad += g[0, 0]

    return Var(out_val, (a,), bwd)


ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh, "identity": identity}


def constant(values, name: str | None = None) -> Var:
    """Leaf node with no gradient consumers (graph constants, data)."""
    return Var(values, name=name)


def seeded_init(shape: tuple[int, int], seed: int, scheme: str = "glorot_uniform") -> np.ndarray:
    """Deterministic Glorot-style uniform init; `scheme="zeros"` for biases."""
    rows, cols = shape
    if scheme == "zeros":
        return np.zeros((rows, cols))
    if scheme != "glorot_uniform":
        raise ValueError(f"unknown init scheme {scheme!r}")
    rng = np.random.default_rng(seed)
    a = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-a, a, size=(rows, cols))


class ParamStore:
    """Named learnable matrices plus gradient and Adam moment buffers."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0
        self._has_grad = False

    def add(self, name: str, values: np.ndarray) -> None:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name!r}")
        arr = _as_matrix(values).copy()
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)
        self._m[name] = np.zeros_like(arr)
        self._v[name] = np.zeros_like(arr)

    def names(self) -> list[str]:
        return list(self.params)

    def leaves(self) -> dict[str, Var]:
        """Fresh leaf Vars viewing current parameter values, for one forward pass."""
        return {name: Var(arr, name=name) for name, arr in self.params.items()}

    def accumulate(self, leaves: dict[str, Var]) -> None:
        """Pull gradients out of leaf nodes after a backward pass."""
        for name, leaf in leaves.items():
            if leaf.grad is not None:
                self.grads[name] += leaf.grad
                self._has_grad = True

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g[:] = 0.0
        self._has_grad = False

    def adam_step(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                  eps: float = 1e-8, clip_norm: float | None = None) -> None:
        if not self._has_grad:
            raise ContractError("adam_step called before any backward/accumulate")
        if clip_norm is not None:
            total = np.sqrt(sum(float((g * g).sum()) for g in self.grads.values()))
            if total > clip_norm:
                f = clip_norm / total
                for g in self.grads.values():
                    g *= f
        self.step_count += 1
        t = self.step_count
        for name, p in self.params.items():
            g = self.grads[name]
            m = self._m[name]
            v = self._v[name]
            m[:] = beta1 * m + (1.0 - beta1) * g
            v[:] = beta2 * v + (1.0 - beta2) * g * g
            m_hat = m / (1.0 - beta1 ** t)
            v_hat = v / (1.0 - beta2 ** t)
            p -= lr * m_hat / (np.sqrt(v_hat) + eps)
        self.zero_grads()

    # -- checkpointing ------------------------------------------------------

    def save(self, path: str | Path, meta: dict | None = None) -> None:
        """Value-exact checkpoint (npz container, format version 1)."""
        payload = {f"param/{k}": v for k, v in self.params.items()}
        payload.update({f"adam_m/{k}": v for k, v in self._m.items()})
        payload.update({f"adam_v/{k}": v for k, v in self._v.items()})
        payload["step_count"] = np.array([self.step_count])
        payload["format_version"] = np.array([1])
        payload["meta_json"] = np.frombuffer(
            json.dumps(meta or {}).encode("utf-8"), dtype=np.uint8)
        np.savez(path, **payload)

    @classmethod
    def load(cls, path: str | Path) -> tuple["ParamStore", dict]:
        with np.load(path) as data:
            version = int(data["format_version"][0])
            if version != 1:
                raise ValueError(f"unsupported checkpoint format version {version}")
            store = cls()
            for key in data.files:
                if key.startswith("param/"):
                    store.add(key[len("param/"):], data[key])
            for name in store.params:
                store._m[name] = data[f"adam_m/{name}"].copy()
                store._v[name] = data[f"adam_v/{name}"].copy()
            store.step_count = int(data["step_count"][0])
            meta = json.loads(bytes(data["meta_json"].tobytes()).decode("utf-8") or "{}")
        return store, meta
