"""The density model: a transformation chain composed with one conditional.

Per-instance log density is the chain's accumulated log |det| (data to latent
direction) plus the conditional log density of the transformed coordinates.
Sampling draws latents sequentially from the conditional and inverts the
chain. Checkpoints are self-describing: a text header with the config and a
tensor directory, followed by little-endian float64 payloads, so a round trip
is bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .conditionals import Conditional, build_conditional, canonical_conditional_name
from .diffcore import Parameter, Tensor
from .errors import CheckpointError, ContractError
from .rng import RandomStream
from .transforms import Chain, build_chain, parse_preset

__all__ = ["ModelSpec", "TanModel", "build_model", "save_checkpoint", "load_checkpoint"]

_CKPT_MAGIC = "TANDENS-CKPT"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class ModelSpec:
    """Everything needed to rebuild a model's architecture and initialization."""

    preset: str
    conditional: str
    d: int
    mixture_components: int = 40
    hidden_width: int = 120
    gru_units: int = 256
    rnn_hidden: int = 16
    shift_state: int = 16
    shift_hidden: int = 256
    coupling_hidden: int = 256
    leak: float = 0.5
    seed: int = 0


class TanModel:
    """A transformation chain plus one conditional; the unit of training."""

    def __init__(self, spec: ModelSpec, chain: Chain, conditional: Conditional):
        if chain.d != conditional.d:
            raise ContractError(
                f"chain dimension {chain.d} != conditional dimension {conditional.d}"
            )
        self.spec = spec
        self.chain = chain
        self.conditional = conditional
        self.d = chain.d
        self.params: list[Parameter] = chain.params() + conditional.params()
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ContractError(f"duplicate parameter names: {dupes}")
        self.param_by_name = {p.name: p for p in self.params}

    def log_prob(self, x) -> Tensor:
        """Per-instance log density; records on the active tape if any."""
        xt = x if isinstance(x, Tensor) else dc.constant(x)
        if xt.data.ndim != 2 or xt.data.shape[1] != self.d:
            raise ContractError(f"expected (n, {self.d}) input, got shape {xt.data.shape}")
        z, logdet = self.chain.forward(xt)
        return dc.add(logdet, self.conditional.log_prob(z))

    def log_prob_values(self, x: np.ndarray) -> np.ndarray:
        return self.log_prob(x).data

    def nll(self, x) -> Tensor:
        """Mean negative log density over a nonempty batch; scalar tensor."""
        xt = x if isinstance(x, Tensor) else dc.constant(x)
        n = xt.data.shape[0]
        if n == 0:
            raise ContractError("nll of an empty batch")
        return dc.mul(dc.reduce_sum(dc.neg(self.log_prob(xt))), 1.0 / n)

    def sample(self, n: int, stream: RandomStream | int) -> np.ndarray:
        if isinstance(stream, int):
            stream = RandomStream(stream)
        if n == 0:
            return np.zeros((0, self.d))
        z = self.conditional.sample(n, stream.split("conditional"))
        return self.chain.inverse(z)

    def param_norms(self) -> dict[str, float]:
        return {p.name: float(np.linalg.norm(p.value)) for p in self.params}


def build_model(spec: ModelSpec) -> TanModel:
    spec = ModelSpec(**{**asdict(spec),
                        "conditional": canonical_conditional_name(spec.conditional)})
    root = RandomStream(spec.seed).split("init")
    chain = build_chain(
        parse_preset(spec.preset),
        spec.d,
        root.split("chain"),
        rnn_hidden=spec.rnn_hidden,
        shift_state=spec.shift_state,
        shift_hidden=spec.shift_hidden,
        coupling_hidden=spec.coupling_hidden,
        leak=spec.leak,
    )
    conditional = build_conditional(
        spec.conditional,
        spec.d,
        root.split("conditional"),
        p=spec.hidden_width,
        k=spec.mixture_components,
        gru_units=spec.gru_units,
        leak=spec.leak,
    )
    return TanModel(spec, chain, conditional)


def save_checkpoint(model: TanModel, path, meta: dict | None = None) -> Path:
    path = Path(path)
    directory = []
    offset = 0
    payloads = []
    for p in model.params:
        arr = np.asarray(p.value, dtype="<f8").copy(order="C")
        directory.append({
            "name": p.name,
            "shape": list(arr.shape),
            "offset": offset,
            "count": int(arr.size),
        })
        payloads.append(arr.tobytes())
        offset += arr.size * 8
    header = {
        "spec": asdict(model.spec),
        "meta": meta or {},
        "tensors": directory,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"{_CKPT_MAGIC} {_CKPT_VERSION}\n".encode())
        fh.write(json.dumps(header).encode())
        fh.write(b"\n")
        for chunk in payloads:
            fh.write(chunk)
    return path


def load_checkpoint(path) -> tuple[TanModel, dict]:
    """Rebuild the model from a checkpoint; bit-exact or a descriptive error."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as err:
        raise CheckpointError(f"cannot read checkpoint {path}: {err}") from err
    nl1 = blob.find(b"\n")
    if nl1 < 0 or not blob[:nl1].decode(errors="replace").startswith(_CKPT_MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint file")
    magic = blob[:nl1].decode().split()
    if len(magic) != 2 or not magic[1].isdigit():
        raise CheckpointError(f"{path}: malformed checkpoint version line")
    if int(magic[1]) != _CKPT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format version {magic[1]} is not supported (expected {_CKPT_VERSION})"
        )
    nl2 = blob.find(b"\n", nl1 + 1)
    if nl2 < 0:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(blob[nl1 + 1 : nl2].decode())
        spec = ModelSpec(**header["spec"])
        directory = header["tensors"]
        meta = header.get("meta", {})
    except (json.JSONDecodeError, KeyError, TypeError, UnicodeDecodeError) as err:
        raise CheckpointError(f"{path}: malformed checkpoint header: {err}") from err

    payload = blob[nl2 + 1 :]
    expected = sum(entry["count"] for entry in directory) * 8
    if len(payload) != expected:
        raise CheckpointError(
            f"{path}: payload holds {len(payload)} bytes, directory expects {expected}"
        )

    model = build_model(spec)
    arrays: dict[str, np.ndarray] = {}
    for entry in directory:
        name = entry["name"]
        if name not in model.param_by_name:
            raise CheckpointError(f"{path}: unknown tensor '{name}' for this config")
        want = tuple(model.param_by_name[name].value.shape)
        have = tuple(entry["shape"])
        if want != have:
            raise CheckpointError(f"{path}: tensor '{name}' has shape {have}, expected {want}")
        start = entry["offset"]
        stop = start + entry["count"] * 8
        arrays[name] = np.frombuffer(payload[start:stop], dtype="<f8").reshape(have).copy()
    missing = set(model.param_by_name) - set(arrays)
    if missing:
        raise CheckpointError(f"{path}: checkpoint is missing tensors {sorted(missing)}")
    for name, arr in arrays.items():
        model.param_by_name[name].value = arr
    return model, meta
