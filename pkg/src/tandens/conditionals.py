"""Autoregressive conditional densities over transformed coordinates.

Each model factorizes p(z) into per-dimension conditionals whose parameters
come from a mixture-of-Gaussians head fed with causal hidden states: LAM uses
untied per-dimension linear maps, TIED shares column-prefix weights, RAM runs
a gated recurrence, MultiInd keeps d static mixtures, and SingleInd is the
fixed standard normal. log_prob runs on the tape; sampling is sequential
plain numpy driven by an explicit random stream.
"""

from __future__ import annotations

import math

import numpy as np

from . import diffcore as dc
from .diffcore import Parameter, Tensor
from .errors import ContractError
from .nets import DEFAULT_LEAK, Dense, GRUCell, gru_cell, leaky_np, _sigmoid_np  # noqa: F401
from .rng import RandomStream

__all__ = [
    "CONDITIONAL_NAMES",
    "MoGHead",
    "Conditional",
    "LAM",
    "RAM",
    "Tied",
    "MultiInd",
    "SingleInd",
    "build_conditional",
    "mog_log_prob",
    "GRUCell",
    "gru_cell",
]

CONDITIONAL_NAMES = ("LAM", "RAM", "TIED", "MultiInd", "SingleInd")

NEG_HALF_LOG_2PI = -0.5 * math.log(2.0 * math.pi)
LOG_SCALE_BOUND = 7.0  # sigma in [e^-7, e^7]; guards degenerate spikes


def _mog_ll(values: Tensor, logits: Tensor, means: Tensor, log_scales: Tensor) -> Tensor:
    """Log density of each value under its K-component Gaussian mixture.

    values: (m,); logits/means/log_scales: (m, K) -> (m,)
    """
    s = dc.clip(log_scales, -LOG_SCALE_BOUND, LOG_SCALE_BOUND)
    zs = dc.mul(dc.sub(dc.reshape(values, (values.shape[0], 1)), means), dc.exp(dc.neg(s)))
    log_w = dc.sub(logits, dc.logsumexp(logits, axis=-1, keepdims=True))
    comp = dc.add(dc.add(dc.sub(dc.mul(dc.mul(zs, zs), -0.5), s), log_w), NEG_HALF_LOG_2PI)
    return dc.logsumexp(comp, axis=-1)


def mog_log_prob(value, logits, means, log_scales) -> np.ndarray:
    """Numpy-facing mixture log density; value (m,) against (m, K) parameters."""
    out = _mog_ll(dc.constant(np.atleast_1d(value)),
                  dc.constant(np.atleast_2d(logits)),
                  dc.constant(np.atleast_2d(means)),
                  dc.constant(np.atleast_2d(log_scales)))
    return out.data


def _sample_mog(logits: np.ndarray, means: np.ndarray, log_scales: np.ndarray,
                stream: RandomStream) -> np.ndarray:
    """Categorical draw over softmax weights, then a Gaussian draw; (n, K) -> (n,)."""
    n, k = logits.shape
    m = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(m)
    probs /= probs.sum(axis=1, keepdims=True)
    u = stream.uniform((n, 1))
    idx = np.minimum((u > np.cumsum(probs, axis=1)).sum(axis=1), k - 1)
    rows = np.arange(n)
    sigma = np.exp(np.clip(log_scales[rows, idx], -LOG_SCALE_BOUND, LOG_SCALE_BOUND))
    return means[rows, idx] + sigma * stream.normal(n)


class MoGHead:
    """Two dense layers mapping a hidden state to K (logit, mean, log-scale) triples."""

    def __init__(self, name: str, p: int, k: int, stream: RandomStream,
                 alpha: float = DEFAULT_LEAK):
        self.p = p
        self.k = k
        self.alpha = alpha
        self.h1 = Dense(f"{name}.h1", p, p, stream.split("h1"))
        self.out = Dense(f"{name}.out", p, 3 * k, stream.split("out"))

    def params(self) -> list[Parameter]:
        return self.h1.params() + self.out.params()

    def mixture_params(self, h: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """(m, p) hidden states -> three (m, K) parameter blocks."""
        raw = self.out(dc.leaky_relu(self.h1(h), self.alpha))
        raw = dc.reshape(raw, (h.shape[0], 3, self.k))
        return raw[:, 0, :], raw[:, 1, :], raw[:, 2, :]

    def mixture_params_np(self, h: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        raw = self.out.apply_np(leaky_np(self.h1.apply_np(h), self.alpha))
        raw = raw.reshape(h.shape[0], 3, self.k)
        return raw[:, 0, :], raw[:, 1, :], raw[:, 2, :]


class Conditional:
    """Base interface: per-instance log density plus sequential sampling."""

    d: int

    def log_prob(self, z: Tensor) -> Tensor:
        raise NotImplementedError

    def sample(self, n: int, stream: RandomStream) -> np.ndarray:
        raise NotImplementedError

    def params(self) -> list[Parameter]:
        return []


class _HeadConditional(Conditional):
    """Shared machinery for models with causal hidden states and a MoG head."""

    head: MoGHead
    p: int

    def hidden_states(self, z: Tensor) -> Tensor:
        """(batch, d) -> (batch, d, p); h[:, i] depends only on z[:, :i]."""
        raise NotImplementedError

    def _hidden_step_np(self, z_prefix: np.ndarray, i: int, state) -> tuple[np.ndarray, object]:
        """Hidden state for dimension i given the sampled prefix; returns (h_i, state)."""
        raise NotImplementedError

    def log_prob(self, z: Tensor) -> Tensor:
        batch, d = z.shape
        h = self.hidden_states(z)
        flat = dc.reshape(h, (batch * d, self.p))
        logits, means, log_scales = self.head.mixture_params(flat)
        ll = _mog_ll(dc.reshape(z, (batch * d,)), logits, means, log_scales)
        return dc.reduce_sum(dc.reshape(ll, (batch, d)), axis=1)

    def sample(self, n: int, stream: RandomStream) -> np.ndarray:
        z = np.zeros((n, self.d))
        state = None
        for i in range(self.d):
            h, state = self._hidden_step_np(z[:, :i], i, state)
            logits, means, log_scales = self.head.mixture_params_np(h)
            z[:, i] = _sample_mog(logits, means, log_scales, stream.split(f"dim{i}"))
        return z


class LAM(_HeadConditional):
    """Untied linear hidden states: h_i = W^(i) z_{<i} + b.

    The per-dimension maps are packed as one (d, d, p) block; entry [j, i]
    weights z_j inside h_i and a causal mask zeroes j >= i.
    """

    def __init__(self, name: str, d: int, stream: RandomStream, p: int = 120, k: int = 40,
                 alpha: float = DEFAULT_LEAK):
        self.d = d
        self.p = p
        j = np.arange(d)[:, None, None]
        i = np.arange(d)[None, :, None]
        self._mask = (j < i).astype(np.float64) * np.ones((1, 1, p))
        scale = 1.0 / math.sqrt(max(d, 1))
        self.w = Parameter(f"{name}.w", stream.split("w").normal((d, d, p), scale=scale))
        self.b = Parameter(f"{name}.b", np.zeros(p))
        self.head = MoGHead(f"{name}.head", p, k, stream.split("head"), alpha=alpha)

    def params(self) -> list[Parameter]:
        return [self.w, self.b] + self.head.params()

    def _packed(self) -> Tensor:
        return dc.reshape(dc.mul(self.w.tensor, dc.constant(self._mask)),
                          (self.d, self.d * self.p))

    def hidden_states(self, z: Tensor) -> Tensor:
        batch = z.shape[0]
        flat = dc.matmul(z, self._packed())
        return dc.add(dc.reshape(flat, (batch, self.d, self.p)), self.b.tensor)

    def _hidden_step_np(self, z_prefix: np.ndarray, i: int, state):
        h = z_prefix @ self.w.value[:i, i, :] + self.b.value
        return h, None


class Tied(_HeadConditional):
    """Column-prefix weight sharing: h_i = W_{<i} z_{<i} + b with one shared W."""

    def __init__(self, name: str, d: int, stream: RandomStream, p: int = 120, k: int = 40,
                 alpha: float = DEFAULT_LEAK):
        self.d = d
        self.p = p
        j = np.arange(d)[:, None, None]
        i = np.arange(d)[None, :, None]
        self._mask = (j < i).astype(np.float64) * np.ones((1, 1, p))
        scale = 1.0 / math.sqrt(max(d, 1))
        self.w = Parameter(f"{name}.w", stream.split("w").normal((d, p), scale=scale))
        self.b = Parameter(f"{name}.b", np.zeros(p))
        self.head = MoGHead(f"{name}.head", p, k, stream.split("head"), alpha=alpha)

    def params(self) -> list[Parameter]:
        return [self.w, self.b] + self.head.params()

    def hidden_states(self, z: Tensor) -> Tensor:
        batch = z.shape[0]
        # Broadcast the shared columns across output dimensions, then run the
        # exact same masked matmul as LAM so the tied model is its restriction.
        w3 = dc.mul(dc.reshape(self.w.tensor, (self.d, 1, self.p)), dc.constant(self._mask))
        flat = dc.matmul(z, dc.reshape(w3, (self.d, self.d * self.p)))
        return dc.add(dc.reshape(flat, (batch, self.d, self.p)), self.b.tensor)

    def _hidden_step_np(self, z_prefix: np.ndarray, i: int, state):
        h = z_prefix @ self.w.value[:i, :] + self.b.value
        return h, None


class RAM(_HeadConditional):
    """Recurrent hidden states: a gated cell scans z left to right.

    h_1 comes from a learned constant start input fed to the cell from a zero
    state; h_i for i > 1 projects the state after consuming z_{i-1}.
    """

    def __init__(self, name: str, d: int, stream: RandomStream, p: int = 120, k: int = 40,
                 gru_units: int = 256, alpha: float = DEFAULT_LEAK):
        self.d = d
        self.p = p
        self.cell = GRUCell(f"{name}.g", 1, gru_units, stream.split("g"))
        self.start = Parameter(f"{name}.start", 0.0)
        self.proj = Dense(f"{name}.proj", gru_units, p, stream.split("proj"))
        self.head = MoGHead(f"{name}.head", p, k, stream.split("head"), alpha=alpha)

    def params(self) -> list[Parameter]:
        return self.cell.params() + [self.start] + self.proj.params() + self.head.params()

    def hidden_states(self, z: Tensor) -> Tensor:
        batch, d = z.shape
        x0 = dc.mul(dc.constant(np.ones((batch, 1))), self.start.tensor)
        state = self.cell(x0, self.cell.initial_state(batch))
        pieces = [dc.reshape(state, (batch, 1, self.cell.units))]
        for i in range(1, d):
            state = self.cell(z[:, i - 1 : i], state)
            pieces.append(dc.reshape(state, (batch, 1, self.cell.units)))
        states = dc.reshape(dc.concat(pieces, axis=1), (batch * d, self.cell.units))
        return dc.reshape(self.proj(states), (batch, d, self.p))

    def _hidden_step_np(self, z_prefix: np.ndarray, i: int, state):
        n = z_prefix.shape[0]
        if i == 0:
            state = self.cell.step_np(np.full((n, 1), float(self.start.value)),
                                      np.zeros((n, self.cell.units)))
        else:
            state = self.cell.step_np(z_prefix[:, i - 1 : i], state)
        return self.proj.apply_np(state), state


class MultiInd(Conditional):
    """d static independent mixtures; conditionals ignore all other coordinates."""

    def __init__(self, name: str, d: int, stream: RandomStream, k: int = 40):
        self.d = d
        self.k = k
        self.logits = Parameter(f"{name}.logits", np.zeros((d, k)))
        self.means = Parameter(f"{name}.means", stream.split("means").normal((d, k)))
        self.log_scales = Parameter(f"{name}.log_scales", np.zeros((d, k)))

    def params(self) -> list[Parameter]:
        return [self.logits, self.means, self.log_scales]

    def _tiled(self, batch: int) -> tuple[Tensor, Tensor, Tensor]:
        ones = dc.constant(np.ones((batch, 1, 1)))
        out = []
        for p in (self.logits, self.means, self.log_scales):
            t = dc.mul(dc.reshape(p.tensor, (1, self.d, self.k)), ones)
            out.append(dc.reshape(t, (batch * self.d, self.k)))
        return tuple(out)

    def log_prob(self, z: Tensor) -> Tensor:
        batch, d = z.shape
        logits, means, log_scales = self._tiled(batch)
        ll = _mog_ll(dc.reshape(z, (batch * d,)), logits, means, log_scales)
        return dc.reduce_sum(dc.reshape(ll, (batch, d)), axis=1)

    def sample(self, n: int, stream: RandomStream) -> np.ndarray:
        z = np.zeros((n, self.d))
        for i in range(self.d):
            z[:, i] = _sample_mog(np.tile(self.logits.value[i], (n, 1)),
                                  np.tile(self.means.value[i], (n, 1)),
                                  np.tile(self.log_scales.value[i], (n, 1)),
                                  stream.split(f"dim{i}"))
        return z


class SingleInd(Conditional):
    """Fixed standard normal per coordinate; no parameters."""

    def __init__(self, d: int):
        self.d = d

    def log_prob(self, z: Tensor) -> Tensor:
        comp = dc.add(dc.mul(dc.mul(z, z), -0.5), NEG_HALF_LOG_2PI)
        return dc.reduce_sum(comp, axis=1)

    def sample(self, n: int, stream: RandomStream) -> np.ndarray:
        return stream.normal((n, self.d))


def canonical_conditional_name(name: str) -> str:
    lookup = {c.lower(): c for c in CONDITIONAL_NAMES}
    key = name.strip().lower()
    if key not in lookup:
        raise ContractError(
            f"unknown conditional model '{name}'; expected one of {', '.join(CONDITIONAL_NAMES)}"
        )
    return lookup[key]


def build_conditional(name: str, d: int, stream: RandomStream, *, p: int = 120, k: int = 40,
                      gru_units: int = 256, leak: float = DEFAULT_LEAK) -> Conditional:
    kind = canonical_conditional_name(name)
    if kind == "LAM":
        return LAM("cond.lam", d, stream, p=p, k=k, alpha=leak)
    if kind == "RAM":
        return RAM("cond.ram", d, stream, p=p, k=k, gru_units=gru_units, alpha=leak)
    if kind == "TIED":
        return Tied("cond.tied", d, stream, p=p, k=k, alpha=leak)
    if kind == "MultiInd":
        return MultiInd("cond.multiind", d, stream, k=k)
    return SingleInd(d)
