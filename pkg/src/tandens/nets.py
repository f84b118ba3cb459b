"""Small trainable building blocks: dense layers and a gated recurrent cell.

Each block exposes the taped forward used for training plus a plain-numpy twin
(`*_np`) for inverse/sampling paths that are never differentiated.
"""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .diffcore import Parameter, Tensor
from .rng import RandomStream

DEFAULT_LEAK = 0.5


def leaky_np(x: np.ndarray, alpha: float) -> np.ndarray:
    return np.where(x >= 0, x, alpha * x)


def _weight(stream: RandomStream, fan_in: int, fan_out: int) -> np.ndarray:
    return stream.normal((fan_in, fan_out), scale=1.0 / np.sqrt(max(fan_in, 1)))


class Dense:
    """Affine layer x @ W + b."""

    def __init__(self, name: str, fan_in: int, fan_out: int, stream: RandomStream,
                 zero_init: bool = False):
        w0 = np.zeros((fan_in, fan_out)) if zero_init else _weight(stream.split("w"), fan_in, fan_out)
        self.w = Parameter(f"{name}.w", w0)
        self.b = Parameter(f"{name}.b", np.zeros(fan_out))

    def __call__(self, x: Tensor) -> Tensor:
        return dc.add(dc.matmul(x, self.w.tensor), self.b.tensor)

    def apply_np(self, x: np.ndarray) -> np.ndarray:
        return x @ self.w.value + self.b.value

    def params(self) -> list[Parameter]:
        return [self.w, self.b]


class GRUCell:
    """Standard gated recurrent cell.

    r = sigmoid(x W_r + s U_r + b_r)
    u = sigmoid(x W_u + s U_u + b_u)
    c = tanh(x W_c + (r * s) U_c + b_c)
    s' = u * s + (1 - u) * c
    """

    def __init__(self, name: str, input_size: int, units: int, stream: RandomStream):
        self.input_size = input_size
        self.units = units
        p = []
        for gate in ("r", "u", "c"):
            w = Parameter(f"{name}.w_{gate}", _weight(stream.split(f"w_{gate}"), input_size, units))
            u = Parameter(f"{name}.u_{gate}", _weight(stream.split(f"u_{gate}"), units, units))
            b = Parameter(f"{name}.b_{gate}", np.zeros(units))
            setattr(self, f"w_{gate}", w)
            setattr(self, f"u_{gate}", u)
            setattr(self, f"b_{gate}", b)
            p += [w, u, b]
        self._params = p

    def initial_state(self, batch: int) -> Tensor:
        return dc.constant(np.zeros((batch, self.units)))

    def __call__(self, x: Tensor, state: Tensor) -> Tensor:
        r = dc.sigmoid(dc.add(dc.add(dc.matmul(x, self.w_r.tensor), dc.matmul(state, self.u_r.tensor)), self.b_r.tensor))
        u = dc.sigmoid(dc.add(dc.add(dc.matmul(x, self.w_u.tensor), dc.matmul(state, self.u_u.tensor)), self.b_u.tensor))
        c = dc.tanh(dc.add(dc.add(dc.matmul(x, self.w_c.tensor), dc.matmul(dc.mul(r, state), self.u_c.tensor)), self.b_c.tensor))
        return dc.add(dc.mul(u, state), dc.mul(dc.sub(1.0, u), c))

    def step_np(self, x: np.ndarray, state: np.ndarray) -> np.ndarray:
        sig = _sigmoid_np
        r = sig(x @ self.w_r.value + state @ self.u_r.value + self.b_r.value)
        u = sig(x @ self.w_u.value + state @ self.u_u.value + self.b_u.value)
        c = np.tanh(x @ self.w_c.value + (r * state) @ self.u_c.value + self.b_c.value)
        return u * state + (1.0 - u) * c

    def params(self) -> list[Parameter]:
        return list(self._params)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ez = np.exp(x[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def gru_cell(cell: GRUCell, x, state) -> Tensor:
    """Functional form of one GRU step; accepts tensors or raw arrays."""
    xt = x if isinstance(x, Tensor) else dc.constant(x)
    st = state if isinstance(state, Tensor) else dc.constant(state)
    return cell(xt, st)
