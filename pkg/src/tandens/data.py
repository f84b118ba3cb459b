"""Synthetic generators, delimited-text ingestion, preprocessing, and splits.

Datasets carry standardized train/validation/test splits plus the provenance
needed to reproduce them (generator kind and seed, or source file and the
preprocessing record). Exports use shortest round-trip float text so external
tools read the splits bit-exactly.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError
from .rng import RandomStream

__all__ = [
    "C_HALF",
    "Dataset",
    "GeneratorSpec",
    "generate",
    "gen_markov",
    "gen_star",
    "gen_trimodal",
    "load_delimited",
    "export_delimited",
    "split_matrix",
    "preprocess",
]

# Half-width of the central 50% interval of the standard normal.
C_HALF = 0.6744897501960817

DEFAULT_FRACTIONS = (0.8, 0.1, 0.1)


@dataclass
class Dataset:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    permutation: np.ndarray | None
    provenance: dict

    @property
    def d(self) -> int:
        return self.train.shape[1]

    def split(self, name: str) -> np.ndarray:
        if name not in ("train", "val", "test"):
            raise ContractError(f"unknown split '{name}'")
        return getattr(self, name)

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name in ("train", "val", "test"):
            export_delimited(getattr(self, name), directory / f"{name}.csv")
        sidecar = {
            "d": self.d,
            "rows": {name: int(getattr(self, name).shape[0]) for name in ("train", "val", "test")},
            "mean": [float(v) for v in self.mean],
            "std": [float(v) for v in self.std],
            "permutation": None if self.permutation is None else [int(v) for v in self.permutation],
            "provenance": self.provenance,
        }
        (directory / "provenance.json").write_text(json.dumps(sidecar, indent=2) + "\n")
        return directory

    @classmethod
    def load(cls, directory) -> "Dataset":
        directory = Path(directory)
        sidecar_path = directory / "provenance.json"
        if not sidecar_path.exists():
            raise DataError(f"{directory} is not a dataset directory (missing provenance.json)")
        sidecar = json.loads(sidecar_path.read_text())
        splits = {name: load_delimited(directory / f"{name}.csv") for name in ("train", "val", "test")}
        perm = sidecar.get("permutation")
        return cls(
            train=splits["train"],
            val=splits["val"],
            test=splits["test"],
            mean=np.asarray(sidecar["mean"], dtype=np.float64),
            std=np.asarray(sidecar["std"], dtype=np.float64),
            permutation=None if perm is None else np.asarray(perm, dtype=np.int64),
            provenance=sidecar.get("provenance", {}),
        )


@dataclass
class GeneratorSpec:
    kind: str  # markov | star | trimodal
    d: int = 32
    n: int = 100000
    sigma: float = 0.1
    eps: float = 0.1
    seed: int = 0
    fractions: tuple[float, float, float] = DEFAULT_FRACTIONS


def generate(spec: GeneratorSpec) -> Dataset:
    if spec.n < 1:
        raise DataError("generator needs n >= 1")
    if spec.kind == "markov":
        return gen_markov(spec)
    if spec.kind == "star":
        return gen_star(spec)
    if spec.kind == "trimodal":
        return gen_trimodal(spec)
    raise DataError(f"unknown generator kind '{spec.kind}' (markov, star, trimodal)")


def markov_from_latents(base: np.ndarray, eps_walk: np.ndarray) -> np.ndarray:
    """Assemble markov instances: y_i = y1 sin(y2 g_i + y3) + eps_i for i > 3.

    base is (n, 3) amplitude/frequency/shift draws; eps_walk (n, d-3) is the
    accumulated random walk (eps_3 = 0 anchor, so walk starts at the first step).
    """
    n, extra = eps_walk.shape
    g = np.linspace(0.0, 1.0, extra)
    y1, y2, y3 = base[:, 0:1], base[:, 1:2], base[:, 2:3]
    tail = y1 * np.sin(y2 * g[None, :] + y3) + eps_walk
    return np.concatenate([base, tail], axis=1)


def gen_markov(spec: GeneratorSpec) -> Dataset:
    if spec.d <= 3:
        raise DataError(f"markov generator needs d > 3, got d={spec.d}")
    root = RandomStream(spec.seed).split("markov")
    base = root.split("base").normal((spec.n, 3))
    steps = root.split("walk").normal((spec.n, spec.d - 3), scale=spec.sigma)
    y = markov_from_latents(base, np.cumsum(steps, axis=1))
    perm = root.split("perm").permutation(spec.d)
    x = y[:, perm]
    train, val, test = split_matrix(x, spec.fractions, root.split("split"))
    return _generator_dataset(train, val, test, perm, spec, {"generator": "markov"})


def star_from_latents(centers: np.ndarray, levels: np.ndarray, weights: np.ndarray,
                      noise: np.ndarray, domain: float = 6.0) -> np.ndarray:
    """Assemble star instances: fringe j is a step function of w_j . centers plus noise.

    levels is (fringe, 32) step levels over [-domain, domain], clamped flat
    outside; weights is (fringe, 4); noise is (n, fringe) already scaled.
    """
    n_intervals = levels.shape[1]
    t = centers @ weights.T
    bucket = np.clip(
        np.floor((t + domain) / (2.0 * domain / n_intervals)).astype(np.int64),
        0,
        n_intervals - 1,
    )
    fringe = levels[np.arange(levels.shape[0])[None, :], bucket] + noise
    return np.concatenate([centers, fringe], axis=1)


def gen_star(spec: GeneratorSpec) -> Dataset:
    if spec.d <= 4:
        raise DataError(f"star generator needs d > 4, got d={spec.d}")
    root = RandomStream(spec.seed).split("star")
    n_fringe = spec.d - 4
    centers = root.split("centers").normal((spec.n, 4))
    levels = root.split("levels").normal((n_fringe, 32))
    weights = root.split("weights").normal((n_fringe, 4)) / 2.0
    noise = root.split("noise").normal((spec.n, n_fringe), scale=spec.sigma)
    y = star_from_latents(centers, levels, weights, noise)
    perm = root.split("perm").permutation(spec.d)
    x = y[:, perm]
    train, val, test = split_matrix(x, spec.fractions, root.split("split"))
    return _generator_dataset(train, val, test, perm, spec, {"generator": "star"})


def gen_trimodal(spec: GeneratorSpec) -> Dataset:
    """x1 ~ N(0,1); x2 ~ N(sign(x1), eps); x3 ~ N(1{|x1| < C_HALF}, eps)."""
    if spec.eps <= 0:
        raise DataError("trimodal generator needs eps > 0")
    root = RandomStream(spec.seed).split("trimodal")
    x1 = root.split("x1").normal(spec.n)
    x2 = np.where(x1 >= 0, 1.0, -1.0) + root.split("x2").normal(spec.n, scale=spec.eps)
    x3 = (np.abs(x1) < C_HALF).astype(np.float64) + root.split("x3").normal(spec.n, scale=spec.eps)
    x = np.stack([x1, x2, x3], axis=1)
    train, val, test = split_matrix(x, spec.fractions, root.split("split"))
    return _generator_dataset(train, val, test, None, spec, {"generator": "trimodal"})


def _generator_dataset(train, val, test, perm, spec: GeneratorSpec, extra: dict) -> Dataset:
    d = train.shape[1]
    provenance = {
        **extra,
        "d": d,
        "n": spec.n,
        "sigma": spec.sigma,
        "eps": spec.eps,
        "seed": spec.seed,
        "fractions": list(spec.fractions),
    }
    return Dataset(
        train=train,
        val=val,
        test=test,
        mean=np.zeros(d),
        std=np.ones(d),
        permutation=perm,
        provenance=provenance,
    )


# ---------------------------------------------------------------------------
# Delimited text in/out


def export_delimited(matrix: np.ndarray, path, delimiter: str = ",") -> Path:
    path = Path(path)
    matrix = np.asarray(matrix, dtype=np.float64)
    with open(path, "w") as fh:
        for row in matrix:
            fh.write(delimiter.join(repr(float(v)) for v in row))
            fh.write("\n")
    return path


def load_delimited(path, delimiter: str = ",", header: bool = False,
                   columns: list[int] | None = None) -> np.ndarray:
    """Read a numeric delimited file; errors carry 1-based row/column coordinates."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such data file: {path}")
    rows: list[list[float]] = []
    width: int | None = None
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        for lineno, record in enumerate(reader, start=1):
            if header and lineno == 1:
                continue
            if not record:
                continue
            if columns is not None:
                try:
                    record = [record[c] for c in columns]
                except IndexError:
                    raise DataError(
                        f"{path}: row {lineno} has {len(record)} fields, "
                        f"column subset needs {max(columns) + 1}"
                    ) from None
            if width is None:
                width = len(record)
            elif len(record) != width:
                raise DataError(
                    f"{path}: row {lineno} has {len(record)} fields, expected {width}"
                )
            parsed = []
            for col, cell in enumerate(record, start=1):
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise DataError(
                        f"{path}: non-numeric value {cell!r} at row {lineno}, column {col}"
                    ) from None
            rows.append(parsed)
    if not rows:
        return np.zeros((0, 0))
    return np.asarray(rows, dtype=np.float64)


# ---------------------------------------------------------------------------
# Splitting and preprocessing


def split_matrix(matrix: np.ndarray, fractions, stream) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Seeded shuffle then contiguous slices; every split must be nonempty."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise DataError("fractions must be three positive numbers")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"fractions must sum to 1, got {sum(fractions)}")
    if isinstance(stream, int):
        stream = RandomStream(stream).split("split")
    n = matrix.shape[0]
    order = stream.permutation(n)
    shuffled = matrix[order]
    n_train = int(np.floor(fractions[0] * n))
    n_val = int(np.floor(fractions[1] * n))
    train = shuffled[:n_train]
    val = shuffled[n_train : n_train + n_val]
    test = shuffled[n_train + n_val :]
    if min(train.shape[0], val.shape[0], test.shape[0]) == 0:
        raise DataError(
            f"split of {n} rows by {fractions} leaves an empty split "
            f"({train.shape[0]}/{val.shape[0]}/{test.shape[0]})"
        )
    return train, val, test


def preprocess(matrix: np.ndarray, *, distinct_threshold: int = 32, noise_std: float = 0.01,
               fractions=DEFAULT_FRACTIONS, seed: int = 0, source: str | None = None) -> Dataset:
    """Drop discrete/constant columns, split, standardize by train statistics,
    and add seeded Gaussian noise to the train split only."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] < 2:
        raise DataError("preprocess needs a matrix with at least 2 rows")
    dropped = []
    kept = []
    for col in range(matrix.shape[1]):
        column = matrix[:, col]
        if np.unique(column).size <= distinct_threshold:
            dropped.append({"column": col, "reason": "distinct-count"})
        elif float(np.std(column)) == 0.0:
            dropped.append({"column": col, "reason": "zero-stddev"})
        else:
            kept.append(col)
    if not kept:
        raise DataError("preprocessing dropped every column")
    reduced = matrix[:, kept]

    root = RandomStream(seed).split("preprocess")
    train, val, test = split_matrix(reduced, fractions, root.split("split"))
    mean = train.mean(axis=0)
    std = train.std(axis=0)
    if np.any(std == 0.0):
        bad = [kept[i] for i in np.flatnonzero(std == 0.0)]
        raise DataError(f"train split is constant in source columns {bad}")
    train = (train - mean) / std
    val = (val - mean) / std
    test = (test - mean) / std
    if noise_std > 0:
        train = train + root.split("noise").normal(train.shape, scale=noise_std)

    provenance = {
        "source": source or "matrix",
        "kept_columns": kept,
        "dropped_columns": dropped,
        "distinct_threshold": distinct_threshold,
        "noise_std": noise_std,
        "fractions": list(fractions),
        "seed": seed,
        "standardization": "train-split statistics",
    }
    return Dataset(
        train=train,
        val=val,
        test=test,
        mean=mean,
        std=std,
        permutation=None,
        provenance=provenance,
    )
