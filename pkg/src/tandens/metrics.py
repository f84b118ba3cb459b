"""Evaluation: mean log-likelihood reports, anomaly scores, average precision,
and the cross-dataset fraction-of-top-likelihood score."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import MetricError
from .model import TanModel

__all__ = [
    "EvalReport",
    "mean_ll_report",
    "report_from_values",
    "anomaly_scores",
    "average_precision",
    "grid_score",
]


@dataclass
class EvalReport:
    """Mean test log-likelihood with a 2-sigma standard error of the mean."""

    mean_ll: float
    two_se: float
    n: int
    model_id: str = ""
    dataset_id: str = ""

    def text(self) -> str:
        return (
            f"{self.model_id or 'model'} on {self.dataset_id or 'data'}: "
            f"{self.mean_ll:.4f} +/- {self.two_se:.4f} (n={self.n})"
        )

    def row(self, delimiter: str = ",") -> str:
        return delimiter.join(
            [self.model_id, self.dataset_id, repr(self.mean_ll), repr(self.two_se), str(self.n)]
        )


def report_from_values(lls: np.ndarray, model_id: str = "", dataset_id: str = "") -> EvalReport:
    lls = np.asarray(lls, dtype=np.float64)
    n = lls.shape[0]
    if n == 0:
        raise MetricError("report over an empty split")
    se = float(np.std(lls, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return EvalReport(mean_ll=float(np.mean(lls)), two_se=2.0 * se, n=n,
                      model_id=model_id, dataset_id=dataset_id)


def mean_ll_report(model: TanModel, test_data: np.ndarray, model_id: str = "",
                   dataset_id: str = "", batch_size: int = 1024) -> EvalReport:
    lls = np.concatenate([
        model.log_prob_values(test_data[start : start + batch_size])
        for start in range(0, test_data.shape[0], batch_size)
    ]) if test_data.shape[0] else np.zeros(0)
    return report_from_values(lls, model_id=model_id, dataset_id=dataset_id)


def anomaly_scores(model: TanModel, instances: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    """Higher score = more anomalous; the score is the negative log density."""
    if instances.shape[0] == 0:
        return np.zeros(0)
    return -np.concatenate([
        model.log_prob_values(instances[start : start + batch_size])
        for start in range(0, instances.shape[0], batch_size)
    ])


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """Area under the precision/recall ranking induced by the scores.

    Sorts by score descending with ties broken by stable input order; labels
    must be binary with at least one positive.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise MetricError(f"scores {scores.shape} and labels {labels.shape} must be equal 1-D")
    if not np.isin(labels, (0, 1)).all():
        raise MetricError("labels must be 0 or 1")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise MetricError("average precision is undefined without positive labels")
    order = np.argsort(-scores, kind="stable")
    ranked = labels[order].astype(np.float64)
    cum_pos = np.cumsum(ranked)
    precision_at = cum_pos / np.arange(1, len(ranked) + 1)
    return float(np.sum(precision_at * ranked) / n_pos)


def grid_score(
    lls: dict[tuple[str, str, str], float],
    transformations: list[str],
    conditionals: list[str],
    datasets: list[str],
) -> dict[tuple[str, str], float]:
    """Average per-dataset fraction of the top likelihood, exp(l - max) in log space."""
    for dataset in datasets:
        for t in transformations:
            for m in conditionals:
                if (t, m, dataset) not in lls:
                    raise MetricError(f"grid is missing cell ({t}, {m}, {dataset})")
    out: dict[tuple[str, str], float] = {}
    per_dataset_max = {
        dataset: max(lls[(t, m, dataset)] for t in transformations for m in conditionals)
        for dataset in datasets
    }
    for t in transformations:
        for m in conditionals:
            shares = [
                math.exp(lls[(t, m, dataset)] - per_dataset_max[dataset]) for dataset in datasets
            ]
            out[(t, m)] = float(np.mean(shares))
    return out
