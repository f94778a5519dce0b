"""Raw covariate-conditional covariance estimates from paired forest weights.

The raw estimate at a query point u is the weighted second moment minus the
outer product of the weighted mean, each weighting coming from its own
honest forest.  The result is symmetric but not necessarily positive
semidefinite; see :mod:`dyncov.thresholding` for the corrected stages.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .forest import Forest, ForestConfig, ResponseKind, train_forest, weight_vector


class Stage(enum.Enum):
    RAW = "raw"
    THRESHOLDED = "thresholded"
    PD_CORRECTED = "pd_corrected"


_SYMMETRY_TOL = 1e-12


@dataclass(frozen=True)
class DynCovEstimate:
    """A symmetric p x p covariance estimate at a query point."""

    u: np.ndarray
    matrix: np.ndarray
    stage: Stage

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("matrix must be square")
        scale = max(1.0, float(np.abs(m).max(initial=0.0)))
        if np.abs(m - m.T).max(initial=0.0) > _SYMMETRY_TOL * scale:
            raise ValueError("matrix is not symmetric within tolerance")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "u", np.asarray(self.u, dtype=float))

    @property
    def p(self) -> int:
        return self.matrix.shape[0]


def _check_forest(forest: Forest, dataset: Dataset, kind: ResponseKind) -> None:
    if forest.response_kind is not kind:
        raise ValueError(f"forest has response kind {forest.response_kind}, need {kind}")
    if forest.dataset_fingerprint != dataset.fingerprint():
        raise ValueError("forest was trained on a different dataset")


def cond_mean(mean_forest: Forest, dataset: Dataset, u: np.ndarray) -> np.ndarray:
    """Weighted conditional mean of the responses at u."""
    _check_forest(mean_forest, dataset, ResponseKind.MEAN)
    w = weight_vector(mean_forest, u)
    return dataset.y[w.indices].T @ w.values


def cond_second_moment(sm_forest: Forest, dataset: Dataset, u: np.ndarray) -> np.ndarray:
    """Weighted conditional second moment sum_i w_i y_i y_i^T at u."""
    _check_forest(sm_forest, dataset, ResponseKind.SECOND_MOMENT)
    w = weight_vector(sm_forest, u)
    ys = dataset.y[w.indices]
    m = ys.T @ (ys * w.values[:, None])
    return (m + m.T) / 2.0


def raw_cov(
    mean_forest: Forest,
    sm_forest: Forest,
    dataset: Dataset,
    u: np.ndarray,
) -> DynCovEstimate:
    """Raw dynamic covariance estimate: second moment minus mean outer product."""
    if mean_forest.dataset_fingerprint != sm_forest.dataset_fingerprint:
        raise ValueError("forests were trained on different datasets")
    mean = cond_mean(mean_forest, dataset, u)
    second = cond_second_moment(sm_forest, dataset, u)
    return DynCovEstimate(u=u, matrix=second - np.outer(mean, mean), stage=Stage.RAW)


def train_cov_forests(
    dataset: Dataset,
    config: ForestConfig,
    shared: bool = False,
    workers: int = 1,
) -> tuple[Forest, Forest]:
    """Train the mean and second-moment forests for raw_cov.

    With ``shared=True`` the second-moment forest reuses the mean forest's
    trees (same partitions for both weightings), which makes raw_cov exactly
    positive semidefinite at the cost of the two-forest structure.
    """
    mean_forest = train_forest(dataset, config, ResponseKind.MEAN, workers=workers)
    if shared:
        sm_forest = Forest(
            trees=mean_forest.trees,
            config=mean_forest.config,
            response_kind=ResponseKind.SECOND_MOMENT,
            n=mean_forest.n,
            d=mean_forest.d,
            dataset_fingerprint=mean_forest.dataset_fingerprint,
        )
    else:
        sm_forest = train_forest(dataset, config, ResponseKind.SECOND_MOMENT, workers=workers)
    return mean_forest, sm_forest


def write_matrix_csv(path, matrix: np.ndarray, header_lines: list[str] | None = None) -> None:
    """Write a matrix as p rows of comma-separated entries (repr floats)."""
    with open(path, "w", encoding="utf-8") as fh:
        for line in header_lines or []:
            fh.write(f"# {line}\n")
        for row in np.asarray(matrix, dtype=float):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_matrix_csv(path) -> np.ndarray:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            rows.append([float(c) for c in line.split(",")])
    return np.asarray(rows, dtype=float)
