"""Dense float64 array numerics with taped reverse-mode differentiation.

Arrays are plain C-order float64 numpy ndarrays. Differentiable primitives
compute eagerly; when a Tape is active and an input requires gradients, the
output records a backward closure on the tape. A backward sweep walks the tape
in reverse creation order (which is a topological order), accumulating adjoints
additively. Tapes are single-use and single-owner; tensors are immutable once
written.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError, DomainError

__all__ = [
    "Array",
    "as_array",
    "Tape",
    "Tensor",
    "Parameter",
    "constant",
    "backward",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "exp",
    "log",
    "absolute",
    "tanh",
    "sigmoid",
    "leaky_relu",
    "reduce_sum",
    "logsumexp",
    "reshape",
    "transpose",
    "concat",
    "flip",
    "clip",
    "diag_part",
    "AdamState",
    "adam_step",
    "clip_global_norm",
    "global_norm",
]

Array = np.ndarray  # row-major float64 carrier


def as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


_LOCAL = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_LOCAL, "tapes", None)
    if stack is None:
        stack = []
        _LOCAL.tapes = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of recorded primitives; single-use."""

    __slots__ = ("nodes", "consumed")

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack().pop()
        if popped is not self:
            raise ContractError("tape stack corrupted: exited a tape that is not innermost")
        return False

    def __len__(self) -> int:
        return len(self.nodes)


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse-mode sweeps."""

    __slots__ = ("data", "grad", "needs_grad", "_parents", "_grad_fn")

    def __init__(self, data, needs_grad: bool = False):
        self.data = as_array(data)
        self.grad: np.ndarray | None = None
        self.needs_grad = needs_grad
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, needs_grad={self.needs_grad})"

    # Arithmetic sugar; mirrors the module-level primitives.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _getitem(self, key)


def constant(x) -> Tensor:
    return Tensor(x)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data: np.ndarray, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(p.needs_grad for p in parents):
        out.needs_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
        tape.nodes.append(out)
    return out


def _acc(t: Tensor, g: np.ndarray) -> None:
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Primitives


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out_data = a.data + b.data

    def grad_fn(g):
        if a.needs_grad:
            _acc(a, _unbroadcast(g, a.data.shape))
        if b.needs_grad:
            _acc(b, _unbroadcast(g, b.data.shape))

    return _record(out_data, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out_data = a.data - b.data

    def grad_fn(g):
        if a.needs_grad:
            _acc(a, _unbroadcast(g, a.data.shape))
        if b.needs_grad:
            _acc(b, _unbroadcast(-g, b.data.shape))

    return _record(out_data, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out_data = a.data * b.data

    def grad_fn(g):
        if a.needs_grad:
            _acc(a, _unbroadcast(g * b.data, a.data.shape))
        if b.needs_grad:
            _acc(b, _unbroadcast(g * a.data, b.data.shape))

    return _record(out_data, (a, b), grad_fn)


def neg(a) -> Tensor:
    a = _lift(a)

    def grad_fn(g):
        if a.needs_grad:
            _acc(a, -g)

    return _record(-a.data, (a,), grad_fn)


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ContractError(f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ContractError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data

    def grad_fn(g):
        if a.needs_grad:
            _acc(a, g @ b.data.T)
        if b.needs_grad:
            _acc(b, a.data.T @ g)

    return _record(out_data, (a, b), grad_fn)


def exp(a) -> Tensor:
    a = _lift(a)
    out_data = np.exp(a.data)

    def grad_fn(g):
        if a.needs_grad:
            _acc(a, g * out_data)

    return _record(out_data, (a,), grad_fn)


def log(a) -> Tensor:
    a = _lift(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log of nonpositive input")

    def grad_fn(g):
        if a.needs_grad:
            _acc(a, g / a.data)

    return _record(np.log(a.data), (a,), grad_fn)


def absolute(a) -> Tensor:
    a = _lift(a)

    def grad_fn(g):
        if a.needs_grad:
            _acc(a, g * np.sign(a.data))

    return _record(np.abs(a.data), (a,), grad_fn)


def tanh(a) -> Tensor:
    a = _lift(a)
    out_data = np.tanh(a.data)

    def grad_fn(g):
        if a.needs_grad:
            _acc(a, g * (1.0 - out_data * out_data))

    return _record(out_data, (a,), grad_fn)


def sigmoid(a) -> Tensor:
    a = _lift(a)
    d = a.data
    out_data = np.empty_like(d)
    pos = d >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ez = np.exp(d[~pos])
    out_data[~pos] = ez / (1.0 + ez)

    def grad_fn(g):
        if a.needs_grad:
            _acc(a, g * out_data * (1.0 - out_data))

    return _record(out_data, (a,), grad_fn)


def leaky_relu(a, alpha: float) -> Tensor:
    """Leaky rectifier; the derivative at exactly 0 is 1 (positive branch)."""
    a = _lift(a)
    d = a.data
    out_data = np.where(d >= 0, d, alpha * d)

    def grad_fn(g):
        if a.needs_grad:
            _acc(a, g * np.where(d >= 0, 1.0, alpha))

    return _record(out_data, (a,), grad_fn)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    in_shape = a.data.shape
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if not a.needs_grad:
            return
        if axis is None:
            _acc(a, np.broadcast_to(g, in_shape))
            return
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(ax % len(in_shape) for ax in axes)
        if not keepdims:
            for ax in sorted(axes):
                g = np.expand_dims(g, ax)
        _acc(a, np.broadcast_to(g, in_shape))

    return _record(out_data, (a,), grad_fn)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Overflow-safe log-sum-exp along one axis via max subtraction."""
    a = _lift(a)
    d = a.data
    m = np.max(d, axis=axis, keepdims=True)
    out_keep = m + np.log(np.sum(np.exp(d - m), axis=axis, keepdims=True))
    out_data = out_keep if keepdims else np.squeeze(out_keep, axis=axis)

    def grad_fn(g):
        if a.needs_grad:
            g_keep = g if keepdims else np.expand_dims(g, axis)
            _acc(a, g_keep * np.exp(d - out_keep))

    return _record(out_data, (a,), grad_fn)


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    in_shape = a.data.shape

    def grad_fn(g):
        if a.needs_grad:
            _acc(a, g.reshape(in_shape))

    return _record(a.data.reshape(shape), (a,), grad_fn)


def transpose(a) -> Tensor:
    a = _lift(a)
    if a.data.ndim != 2:
        raise ContractError(f"transpose expects a 2-D operand, got shape {a.data.shape}")

    def grad_fn(g):
        if a.needs_grad:
            _acc(a, g.T)

    return _record(a.data.T.copy(), (a,), grad_fn)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(_lift(p) for p in parts)
    if not ts:
        raise ContractError("concat of zero tensors")
    out_data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        pieces = np.split(g, offsets, axis=axis)
        for t, piece in zip(ts, pieces):
            if t.needs_grad:
                _acc(t, piece)

    return _record(out_data, ts, grad_fn)


def flip(a, axis: int) -> Tensor:
    a = _lift(a)

    def grad_fn(g):
        if a.needs_grad:
            _acc(a, np.flip(g, axis=axis))

    return _record(np.flip(a.data, axis=axis).copy(), (a,), grad_fn)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes through inside the band."""
    a = _lift(a)
    d = a.data

    def grad_fn(g):
        if a.needs_grad:
            _acc(a, g * ((d >= lo) & (d <= hi)))

    return _record(np.clip(d, lo, hi), (a,), grad_fn)


def diag_part(a) -> Tensor:
    a = _lift(a)
    if a.data.ndim != 2 or a.data.shape[0] != a.data.shape[1]:
        raise ContractError(f"diag_part expects a square matrix, got shape {a.data.shape}")

    def grad_fn(g):
        if a.needs_grad:
            z = np.zeros_like(a.data)
            np.fill_diagonal(z, g)
            _acc(a, z)

    return _record(np.diagonal(a.data).copy(), (a,), grad_fn)


def _getitem(a: Tensor, key) -> Tensor:
    # Basic (slice/int/tuple) indexing only; keys never alias themselves,
    # so the backward scatter is a plain assignment.
    out_data = a.data[key]

    def grad_fn(g):
        if a.needs_grad:
            z = np.zeros_like(a.data)
            z[key] = g
            _acc(a, z)

    return _record(np.ascontiguousarray(out_data), (a,), grad_fn)


# ---------------------------------------------------------------------------
# Parameters and the backward sweep


class Parameter:
    """A named trainable array; names are unique within a model."""

    def __init__(self, name: str, value):
        self.name = name
        self.tensor = Tensor(value, needs_grad=True)

    @property
    def value(self) -> np.ndarray:
        return self.tensor.data

    @value.setter
    def value(self, new) -> None:
        new = as_array(new)
        if new.shape != self.tensor.data.shape:
            raise ContractError(
                f"parameter {self.name}: shape {new.shape} != {self.tensor.data.shape}"
            )
        self.tensor.data = new

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad

    def __repr__(self) -> str:
        return f"Parameter({self.name}, shape={self.tensor.data.shape})"


def backward(tape: Tape, root: Tensor, wrt: Sequence) -> list[np.ndarray]:
    """Sweep the tape once from a scalar root; returns gradients aligned with wrt.

    Gradients accumulate additively from zero for everything the tape touches;
    entries of wrt that do not participate get exact zeros.
    """
    if root.data.ndim != 0:
        raise ContractError(f"backward root must be scalar, got shape {root.data.shape}")
    if tape.consumed:
        raise ContractError("tape is single-use and was already swept")
    tape.consumed = True

    targets = [w.tensor if isinstance(w, Parameter) else w for w in wrt]
    for node in tape.nodes:
        node.grad = None
        for p in node._parents:
            p.grad = None
    for t in targets:
        t.grad = None

    root.grad = np.ones((), dtype=np.float64)
    for node in reversed(tape.nodes):
        if node.grad is not None:
            node._grad_fn(node.grad)

    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in targets]


# ---------------------------------------------------------------------------
# Optimizer


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_global_norm(grads: Sequence[np.ndarray], max_norm: float) -> list[np.ndarray]:
    """Scale all gradients by max_norm/norm when the joint norm exceeds max_norm."""
    if max_norm <= 0:
        raise ContractError("clip norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return list(grads)
    scale = max_norm / norm
    return [g * scale for g in grads]


@dataclass
class AdamState:
    """Per-parameter first/second moments plus the shared step counter."""

    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    step: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Parameter]) -> "AdamState":
        return cls(
            m=[np.zeros_like(p.value) for p in params],
            v=[np.zeros_like(p.value) for p in params],
        )


def adam_step(
    params: Sequence[Parameter],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * (g * g)
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p.value = p.value - lr * m_hat / (np.sqrt(v_hat) + eps)
