"""Invertible variable transformations and their composition.

Every transformation maps a batch (n, d) to a same-shaped batch together with
a per-instance log |det dz/dx|, exposes an exact inverse, and owns its
trainable parameters. Forward runs on the tape; inverses are plain numpy since
they are never differentiated.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.linalg import solve_triangular

from . import diffcore as dc
from .diffcore import Parameter, Tensor
from .errors import ContractError, PresetError, SingularTransformError
from .nets import DEFAULT_LEAK, Dense, GRUCell, leaky_np
from .rng import RandomStream

__all__ = [
    "Transformation",
    "LinearLU",
    "Recurrent",
    "RecurrentShift",
    "AdditiveCoupling",
    "Reversal",
    "Rescale",
    "ElementwiseLeaky",
    "Chain",
    "parse_preset",
    "build_chain",
    "PRESET_NAMES",
]

_SINGULAR_EPS = 1e-30


def _zeros_logdet(batch: int) -> Tensor:
    return dc.constant(np.zeros(batch))


def _per_instance(scalar: Tensor, batch: int) -> Tensor:
    return dc.add(scalar, dc.constant(np.zeros(batch)))


class Transformation:
    """Base interface: forward(x) -> (z, logdet), inverse(z) -> x."""

    d: int

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        raise NotImplementedError

    def inverse(self, z: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def params(self) -> list[Parameter]:
        return []


class LinearLU(Transformation):
    """Invertible affine map z = L(Ux) + b stored directly in LU-factored form.

    L is unit lower triangular (strictly-lower entries trainable), U is upper
    triangular with trainable diagonal, so log |det| is sum(log |U_ii|) and the
    inverse is two triangular solves.
    """

    def __init__(self, name: str, d: int, stream: RandomStream, init_scale: float = 0.01):
        self.d = d
        self._slow = np.tril(np.ones((d, d)), k=-1)
        self._upper = np.triu(np.ones((d, d)))
        self._eye = np.eye(d)
        l0 = stream.split("l").normal((d, d), scale=init_scale) * self._slow
        u0 = self._eye + stream.split("u").normal((d, d), scale=init_scale) * self._upper
        self.l_raw = Parameter(f"{name}.l", l0)
        self.u_raw = Parameter(f"{name}.u", u0)
        self.b = Parameter(f"{name}.b", np.zeros(d))

    def params(self) -> list[Parameter]:
        return [self.l_raw, self.u_raw, self.b]

    def _factors_np(self) -> tuple[np.ndarray, np.ndarray]:
        lmat = self.l_raw.value * self._slow + self._eye
        umat = self.u_raw.value * self._upper
        if np.any(np.abs(np.diagonal(umat)) < _SINGULAR_EPS):
            raise SingularTransformError("linear transform has a zero on the U diagonal")
        return lmat, umat

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        self._factors_np()  # singularity guard
        umat = dc.mul(self.u_raw.tensor, dc.constant(self._upper))
        lmat = dc.add(dc.mul(self.l_raw.tensor, dc.constant(self._slow)), dc.constant(self._eye))
        ux = dc.matmul(x, dc.transpose(umat))
        z = dc.add(dc.matmul(ux, dc.transpose(lmat)), self.b.tensor)
        logdet = dc.reduce_sum(dc.log(dc.absolute(dc.diag_part(umat))))
        return z, _per_instance(logdet, x.shape[0])

    def inverse(self, z: np.ndarray) -> np.ndarray:
        lmat, umat = self._factors_np()
        y = solve_triangular(lmat, (z - self.b.value).T, lower=True, unit_diagonal=True)
        return solve_triangular(umat, y, lower=False).T


class Recurrent(Transformation):
    """Leaky-rectified recurrence over dimensions.

    z_i = r_a(y x_i + w . s_{i-1} + b),  s_i = relu(u x_i + v . s_{i-1} + a)

    y, u, b, a are scalars and w, v live in R^rho. With scalar u and a the
    state pre-activation is a scalar, so all rho state units carry the same
    value; the state is kept as that value replicated across units.
    log |det| = d log|y| + sum_i log r_a'(pre_i).
    """

    def __init__(self, name: str, d: int, stream: RandomStream, rho: int = 16,
                 alpha: float = DEFAULT_LEAK, init_scale: float = 0.1):
        self.d = d
        self.rho = rho
        self.alpha = alpha
        self.y = Parameter(f"{name}.y", 1.0)
        self.u = Parameter(f"{name}.u", stream.split("u").normal(scale=init_scale))
        self.b = Parameter(f"{name}.b", stream.split("b").normal(scale=init_scale))
        self.a = Parameter(f"{name}.a", stream.split("a").normal(scale=init_scale))
        self.w = Parameter(f"{name}.w", stream.split("w").normal(rho, scale=init_scale))
        self.v = Parameter(f"{name}.v", stream.split("v").normal(rho, scale=init_scale))

    def params(self) -> list[Parameter]:
        return [self.y, self.u, self.b, self.a, self.w, self.v]

    def _check_y(self) -> float:
        yval = float(self.y.value)
        if abs(yval) < _SINGULAR_EPS:
            raise SingularTransformError("recurrent transform has y = 0")
        return yval

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        self._check_y()
        batch = x.shape[0]
        state = dc.constant(np.zeros((batch, self.rho)))
        ones_rho = dc.constant(np.ones((1, self.rho)))
        cols = []
        neg = np.zeros(batch)
        for i in range(self.d):
            xi = x[:, i]
            pre = dc.add(dc.add(dc.mul(xi, self.y.tensor),
                                dc.reduce_sum(dc.mul(state, self.w.tensor), axis=1)),
                         self.b.tensor)
            neg += pre.data < 0
            cols.append(dc.reshape(dc.leaky_relu(pre, self.alpha), (batch, 1)))
            spre = dc.add(dc.add(dc.mul(xi, self.u.tensor),
                                 dc.reduce_sum(dc.mul(state, self.v.tensor), axis=1)),
                          self.a.tensor)
            state = dc.mul(dc.reshape(dc.leaky_relu(spre, 0.0), (batch, 1)), ones_rho)
        z = dc.concat(cols, axis=1)
        ld_y = dc.mul(dc.log(dc.absolute(self.y.tensor)), float(self.d))
        logdet = dc.add(ld_y, dc.constant(math.log(self.alpha) * neg))
        return z, logdet

    def inverse(self, z: np.ndarray) -> np.ndarray:
        yval = self._check_y()
        n = z.shape[0]
        state = np.zeros((n, self.rho))
        uval, bval, aval = float(self.u.value), float(self.b.value), float(self.a.value)
        x = np.empty_like(z)
        for i in range(self.d):
            pre = np.where(z[:, i] >= 0, z[:, i], z[:, i] / self.alpha)
            x[:, i] = (pre - state @ self.w.value - bval) / yval
            spre = uval * x[:, i] + state @ self.v.value + aval
            state = np.broadcast_to(np.maximum(spre, 0.0)[:, None], (n, self.rho))
        return x


class RecurrentShift(Transformation):
    """Additive shift from a recurrence over prior dimensions.

    z_i = x_i + m(s_{i-1}), s_i = g(x_i, s_{i-1}) with g a gated recurrent
    cell; the Jacobian is unit lower triangular so log |det| = 0 exactly.
    """

    def __init__(self, name: str, d: int, stream: RandomStream, state_units: int = 16,
                 hidden: int = 256, alpha: float = DEFAULT_LEAK):
        self.d = d
        self.alpha = alpha
        self.cell = GRUCell(f"{name}.g", 1, state_units, stream.split("g"))
        self.m1 = Dense(f"{name}.m1", state_units, hidden, stream.split("m1"))
        self.m2 = Dense(f"{name}.m2", hidden, 1, stream.split("m2"), zero_init=True)

    def params(self) -> list[Parameter]:
        return self.cell.params() + self.m1.params() + self.m2.params()

    def _shift(self, state: Tensor) -> Tensor:
        return self.m2(dc.leaky_relu(self.m1(state), self.alpha))

    def _shift_np(self, state: np.ndarray) -> np.ndarray:
        return self.m2.apply_np(leaky_np(self.m1.apply_np(state), self.alpha))

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        batch = x.shape[0]
        state = self.cell.initial_state(batch)
        cols = []
        for i in range(self.d):
            xi = x[:, i : i + 1]
            cols.append(dc.add(xi, self._shift(state)))
            state = self.cell(xi, state)
        return dc.concat(cols, axis=1), _zeros_logdet(batch)

    def inverse(self, z: np.ndarray) -> np.ndarray:
        n = z.shape[0]
        state = np.zeros((n, self.cell.units))
        x = np.empty_like(z)
        for i in range(self.d):
            x[:, i] = z[:, i] - self._shift_np(state)[:, 0]
            state = self.cell.step_np(x[:, i : i + 1], state)
        return x


class AdditiveCoupling(Transformation):
    """Shift the second half of dimensions by a network of the first half.

    The first ceil(d/2) coordinates pass through unchanged; log |det| = 0.
    """

    def __init__(self, name: str, d: int, stream: RandomStream, hidden: int = 256,
                 alpha: float = DEFAULT_LEAK):
        if d < 2:
            raise ContractError(f"additive coupling needs d >= 2, got d={d}")
        self.d = d
        self.d1 = (d + 1) // 2
        self.alpha = alpha
        self.f1 = Dense(f"{name}.f1", self.d1, hidden, stream.split("f1"))
        self.f2 = Dense(f"{name}.f2", hidden, hidden, stream.split("f2"))
        self.f3 = Dense(f"{name}.f3", hidden, d - self.d1, stream.split("f3"), zero_init=True)

    def params(self) -> list[Parameter]:
        return self.f1.params() + self.f2.params() + self.f3.params()

    def _net(self, x1: Tensor) -> Tensor:
        h = dc.leaky_relu(self.f1(x1), self.alpha)
        h = dc.leaky_relu(self.f2(h), self.alpha)
        return self.f3(h)

    def _net_np(self, x1: np.ndarray) -> np.ndarray:
        h = leaky_np(self.f1.apply_np(x1), self.alpha)
        h = leaky_np(self.f2.apply_np(h), self.alpha)
        return self.f3.apply_np(h)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        x1 = x[:, : self.d1]
        x2 = x[:, self.d1 :]
        z = dc.concat([x1, dc.add(x2, self._net(x1))], axis=1)
        return z, _zeros_logdet(x.shape[0])

    def inverse(self, z: np.ndarray) -> np.ndarray:
        z1 = z[:, : self.d1]
        return np.concatenate([z1, z[:, self.d1 :] - self._net_np(z1)], axis=1)


class Reversal(Transformation):
    """Reverse the dimension order; an involution with log |det| = 0."""

    def __init__(self, d: int):
        self.d = d

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        return dc.flip(x, axis=1), _zeros_logdet(x.shape[0])

    def inverse(self, z: np.ndarray) -> np.ndarray:
        return z[:, ::-1].copy()


class Rescale(Transformation):
    """Elementwise x * exp(s) with trainable s; log |det| = sum(s)."""

    def __init__(self, name: str, d: int):
        self.d = d
        self.s = Parameter(f"{name}.s", np.zeros(d))

    def params(self) -> list[Parameter]:
        return [self.s]

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        z = dc.mul(x, dc.exp(self.s.tensor))
        return z, _per_instance(dc.reduce_sum(self.s.tensor), x.shape[0])

    def inverse(self, z: np.ndarray) -> np.ndarray:
        return z * np.exp(-self.s.value)


class ElementwiseLeaky(Transformation):
    """Elementwise leaky rectifier; log |det| counts the negative entries."""

    def __init__(self, d: int, alpha: float = DEFAULT_LEAK):
        self.d = d
        self.alpha = alpha

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        neg = (x.data < 0).sum(axis=1)
        return dc.leaky_relu(x, self.alpha), dc.constant(math.log(self.alpha) * neg)

    def inverse(self, z: np.ndarray) -> np.ndarray:
        return np.where(z >= 0, z, z / self.alpha)


class Chain(Transformation):
    """Composition of transformations; log |det| is the sum over stages."""

    def __init__(self, stages: list[Transformation], d: int):
        for stage in stages:
            if stage.d != d:
                raise ContractError(
                    f"chain stage dimension {stage.d} does not match chain dimension {d}"
                )
        self.stages = stages
        self.d = d

    def params(self) -> list[Parameter]:
        out: list[Parameter] = []
        for stage in self.stages:
            out.extend(stage.params())
        return out

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        logdet = _zeros_logdet(x.shape[0])
        z = x
        for i, stage in enumerate(self.stages):
            try:
                z, ld = stage.forward(z)
            except SingularTransformError as err:
                raise SingularTransformError(
                    f"stage {i} ({type(stage).__name__}): {err}", stage=i
                ) from err
            logdet = dc.add(logdet, ld)
        return z, logdet

    def inverse(self, z: np.ndarray) -> np.ndarray:
        x = z
        for i in reversed(range(len(self.stages))):
            try:
                x = self.stages[i].inverse(x)
            except SingularTransformError as err:
                raise SingularTransformError(
                    f"stage {i} ({type(self.stages[i]).__name__}): {err}", stage=i
                ) from err
        return x


# ---------------------------------------------------------------------------
# Preset grammar

_COUPLING_BLOCK = ["coupling", "reversal"] * 3 + ["coupling", "rescale"]
_SHIFT_BLOCK = ["shift", "reversal"] * 3 + ["shift", "rescale"]

_ATOMS: dict[str, list[str]] = {
    "None": [],
    "RNN": ["recurrent"],
    "2xRNN": ["recurrent", "reversal", "recurrent"],
    "4xAdd+Re": list(_COUPLING_BLOCK),
    "4xSRNN+Re": list(_SHIFT_BLOCK),
    "RNN+4xAdd+Re": ["recurrent"] + _COUPLING_BLOCK,
    "RNN+4xSRNN+Re": ["recurrent"] + _SHIFT_BLOCK,
    "5x L+ReLU+SRNN+Re": ["linear", "leaky", "shift", "rescale"] * 5,
}

PRESET_NAMES = tuple(_ATOMS) + tuple("L " + atom for atom in _ATOMS)


def parse_preset(name: str) -> list[str]:
    """Expand a preset name into the ordered list of stage kinds."""
    text = name.strip()
    stages: list[str] = []
    if text.startswith("L "):
        stages.append("linear")
        text = text[2:].strip()
    if text not in _ATOMS:
        raise PresetError(f"unknown transformation atom '{text}'", atom=text)
    return stages + list(_ATOMS[text])


def build_chain(
    kinds: list[str],
    d: int,
    stream: RandomStream,
    *,
    rnn_hidden: int = 16,
    shift_state: int = 16,
    shift_hidden: int = 256,
    coupling_hidden: int = 256,
    leak: float = DEFAULT_LEAK,
) -> Chain:
    """Instantiate a parsed preset with independent parameters per stage."""
    stages: list[Transformation] = []
    for i, kind in enumerate(kinds):
        name = f"chain.{i}.{kind}"
        sub = stream.split(f"stage{i}")
        if kind == "linear":
            stages.append(LinearLU(name, d, sub))
        elif kind == "recurrent":
            stages.append(Recurrent(name, d, sub, rho=rnn_hidden, alpha=leak))
        elif kind == "shift":
            stages.append(RecurrentShift(name, d, sub, state_units=shift_state,
                                         hidden=shift_hidden, alpha=leak))
        elif kind == "coupling":
            stages.append(AdditiveCoupling(name, d, sub, hidden=coupling_hidden, alpha=leak))
        elif kind == "reversal":
            stages.append(Reversal(d))
        elif kind == "rescale":
            stages.append(Rescale(name, d))
        elif kind == "leaky":
            stages.append(ElementwiseLeaky(d, alpha=leak))
        else:
            raise PresetError(f"unknown stage kind '{kind}'", atom=kind)
    return Chain(stages, d)
