"""Exception taxonomy shared across the package."""


class TandensError(Exception):
    """Base class for all package errors."""


class ContractError(TandensError):
    """A caller violated an operation's precondition (shape, rank, domain)."""


class DomainError(ContractError):
    """Numeric input outside an operation's mathematical domain."""


class SingularTransformError(TandensError):
    """An invertible transformation hit a singular configuration."""

    def __init__(self, message: str, stage: int | None = None):
        super().__init__(message)
        self.stage = stage


class PresetError(TandensError):
    """A transformation preset string failed to parse."""

    def __init__(self, message: str, atom: str):
        super().__init__(message)
        self.atom = atom


class DataError(TandensError):
    """Malformed input data or an invalid dataset operation."""


class CheckpointError(TandensError):
    """A checkpoint file could not be written or read back."""


class MetricError(TandensError):
    """A metric is undefined for the given inputs."""


class TrainingDivergedError(TandensError):
    """Training hit a non-finite loss."""

    def __init__(self, iteration: int, param_norms: dict[str, float]):
        worst = sorted(param_norms, key=param_norms.get, reverse=True)[:5]
        detail = ", ".join(f"{n}={param_norms[n]:.3e}" for n in worst)
        super().__init__(
            f"non-finite loss at iteration {iteration}; largest parameter norms: {detail}"
        )
        self.iteration = iteration
        self.param_norms = param_norms
