"""Maximum-likelihood training: Adam, step-decay schedule, global-norm clipping,
seeded with-replacement minibatches, and validation-based checkpoint selection.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .diffcore import AdamState, Tape, adam_step, backward, clip_global_norm
from .errors import ContractError, TrainingDivergedError
from .model import TanModel, save_checkpoint
from .rng import RandomStream

__all__ = [
    "TrainConfig",
    "TrainHistory",
    "TrainResult",
    "PROFILES",
    "lr_at",
    "evaluate_nll",
    "validation_selection",
    "train",
]


@dataclass
class TrainConfig:
    iterations: int = 30000
    batch_size: int = 256
    learning_rate: float = 0.005
    decay_factor: float = 0.1
    decay_every: int = 5000
    clip_norm: float = 1.0
    val_every: int = 500
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if min(self.iterations, self.batch_size, self.decay_every, self.val_every) <= 0:
            raise ContractError("iterations, batch_size, decay_every, val_every must be positive")
        if self.learning_rate <= 0 or self.clip_norm <= 0:
            raise ContractError("learning_rate and clip_norm must be positive")
        if not (0.0 < self.decay_factor <= 1.0):
            raise ContractError("decay_factor must lie in (0, 1]")
        return self

    def to_file(self, path) -> None:
        lines = [f"{k} = {v}" for k, v in asdict(self).items()]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        cfg = cls()
        fields = {k: type(v) for k, v in asdict(cfg).items()}
        overrides = {}
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ContractError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in fields:
                raise ContractError(f"{path}:{lineno}: unknown config key '{key}'")
            overrides[key] = fields[key](value)
        return replace(cfg, **overrides).validate()


PROFILES: dict[str, TrainConfig] = {
    "default": TrainConfig(),
    "large": TrainConfig(iterations=60000, batch_size=1024),
}


def lr_at(iteration: int, config: TrainConfig) -> float:
    """Step decay: initial rate times factor^(iteration // period)."""
    if iteration < 0:
        raise ContractError("iteration must be nonnegative")
    return config.learning_rate * config.decay_factor ** (iteration // config.decay_every)


@dataclass
class HistoryRecord:
    iteration: int
    train_nll: float
    val_nll: float
    lr: float


@dataclass
class TrainHistory:
    records: list[HistoryRecord] = field(default_factory=list)

    def append(self, iteration: int, train_nll: float, val_nll: float, lr: float) -> None:
        self.records.append(HistoryRecord(iteration, train_nll, val_nll, lr))

    @property
    def best_index(self) -> int:
        return validation_selection([r.val_nll for r in self.records])

    def to_csv(self, path) -> None:
        lines = ["iteration,train_nll,val_nll,lr"]
        lines += [f"{r.iteration},{r.train_nll!r},{r.val_nll!r},{r.lr!r}" for r in self.records]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path) -> "TrainHistory":
        out = cls()
        rows = Path(path).read_text().splitlines()[1:]
        for row in rows:
            it, tr, va, lr = row.split(",")
            out.append(int(it), float(tr), float(va), float(lr))
        return out


@dataclass
class TrainResult:
    history: TrainHistory
    best_iteration: int
    best_val_nll: float
    checkpoint_path: Path


def validation_selection(val_nlls) -> int:
    """Index of the minimal validation NLL; ties break toward the earliest."""
    if len(val_nlls) == 0:
        raise ContractError("validation_selection of an empty sequence")
    return int(np.argmin(np.asarray(val_nlls)))


def evaluate_nll(model: TanModel, data: np.ndarray, batch_size: int = 1024) -> float:
    """Full-dataset mean NLL, reduced in fixed batch order (deterministic)."""
    n = data.shape[0]
    if n == 0:
        raise ContractError("evaluate_nll on an empty split")
    total = 0.0
    for start in range(0, n, batch_size):
        total += float(np.sum(model.log_prob_values(data[start : start + batch_size])))
    return -total / n


def train(
    model: TanModel,
    train_data: np.ndarray,
    val_data: np.ndarray,
    config: TrainConfig,
    run_dir,
    hook=None,
) -> TrainResult:
    """Run the full protocol and return the best-validation checkpoint.

    Each iteration draws a with-replacement minibatch from a stream seeded by
    config.seed, so the whole run is determined by (model spec seed, config).
    """
    config.validate()
    if train_data.shape[0] == 0 or val_data.shape[0] == 0:
        raise ContractError("train/validation splits must be nonempty")
    if train_data.shape[1] != model.d or val_data.shape[1] != model.d:
        raise ContractError(
            f"data dimension {train_data.shape[1]} does not match model dimension {model.d}"
        )
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    best_path = run_dir / "best.ckpt"

    params = model.params
    adam = AdamState.for_params(params)
    batch_stream = RandomStream(config.seed).split("minibatch")
    history = TrainHistory()
    best_val = math.inf
    best_iteration = -1
    n_train = train_data.shape[0]

    for it in range(config.iterations):
        idx = batch_stream.integers(0, n_train, (config.batch_size,))
        with Tape() as tape:
            loss = model.nll(train_data[idx])
        loss_val = float(loss.data)
        if not math.isfinite(loss_val):
            raise TrainingDivergedError(it, model.param_norms())
        grads = backward(tape, loss, params)
        grads = clip_global_norm(grads, config.clip_norm)
        lr = lr_at(it, config)
        adam_step(params, grads, adam, lr)
        if hook is not None:
            hook(it, loss_val, grads)

        done = it + 1 == config.iterations
        if (it + 1) % config.val_every == 0 or done:
            val_nll = evaluate_nll(model, val_data)
            history.append(it + 1, loss_val, val_nll, lr)
            if val_nll < best_val:
                best_val = val_nll
                best_iteration = it + 1
                save_checkpoint(
                    model,
                    best_path,
                    meta={"iteration": it + 1, "val_nll": val_nll, "seed": config.seed},
                )

    return TrainResult(
        history=history,
        best_iteration=best_iteration,
        best_val_nll=best_val,
        checkpoint_path=best_path,
    )
