"""OSPA distance and run-level summaries."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment


@dataclass(frozen=True)
class OspaConfig:
    p: float = 1.0
    c: float = 50.0

    def __post_init__(self):
        if self.p < 1 or self.c <= 0:
            raise ValueError("OSPA needs p >= 1 and c > 0")


def ospa(truth: np.ndarray, estimates: np.ndarray, config: OspaConfig = OspaConfig()) -> float:
    """OSPA between equal-size point sets (rows are points)."""
    X = np.atleast_2d(np.asarray(truth, dtype=float))
    Y = np.atleast_2d(np.asarray(estimates, dtype=float))
    if X.shape != Y.shape:
        raise ValueError("OSPA here requires equal cardinalities")
    K = X.shape[0]
    if K == 0:
        return 0.0
    d = np.linalg.norm(X[:, None, :] - Y[None, :, :], axis=-1)
    cost = np.minimum(d, config.c) ** config.p
    rows, cols = linear_sum_assignment(cost)
    return float((cost[rows, cols].sum() / K) ** (1.0 / config.p))


@dataclass
class Summary:
    ospa_mean: float
    ospa_std: float
    cpu_ms_mean: float
    per_dataset: List[float]
    per_step: List[float]

    def as_dict(self) -> Dict:
        return {
            "ospa_mean": self.ospa_mean,
            "ospa_std": self.ospa_std,
            "cpu_ms_mean": self.cpu_ms_mean,
            "per_dataset": self.per_dataset,
            "per_step": self.per_step,
        }


def summarize(ospa_runs: Sequence[Sequence[float]], cpu_ms_runs: Sequence[Sequence[float]]) -> Summary:
    """Average over steps, then over datasets; sample std across datasets."""
    o = np.asarray(ospa_runs, dtype=float)
    if o.size == 0 or o.ndim != 2:
        raise ValueError("summarize needs a non-empty (datasets, steps) array")
    t = np.asarray(cpu_ms_runs, dtype=float)
    per_dataset = o.mean(axis=1)
    std = float(per_dataset.std(ddof=1)) if per_dataset.size > 1 else 0.0
    cpu = float(np.nanmean(t)) if t.size and np.any(np.isfinite(t)) else float("nan")
    return Summary(float(per_dataset.mean()), std, cpu, per_dataset.tolist(), o.mean(axis=0).tolist())
