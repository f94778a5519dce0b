"""Generalized shrinkage of off-diagonal entries, penalty selection by
cross-validation, positive-definite correction, and the precision matrix.

Every shrinkage rule s_lambda satisfies |s(z)| <= |z|, s(z) = 0 for
|z| <= lambda, and |s(z) - z| <= lambda.  The diagonal is never penalized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _streams
from .covariance import DynCovEstimate, Stage, raw_cov, train_cov_forests
from .data import Dataset
from .forest import Forest, ForestConfig


@dataclass(frozen=True)
class ThresholdRule:
    """One of the four shrinkage rules: hard, soft, scad(a), alasso(eta)."""

    kind: str
    a: float = 3.7
    eta: float = 3.0

    def __post_init__(self):
        if self.kind not in ("hard", "soft", "scad", "alasso"):
            raise ValueError(f"unknown rule kind {self.kind!r}")
        if self.kind == "scad" and self.a <= 2:
            raise ValueError("scad requires a > 2")
        if self.kind == "alasso" and self.eta <= 0:
            raise ValueError("alasso requires eta > 0")

    @classmethod
    def parse(cls, text: str) -> "ThresholdRule":
        """Parse CLI strings: hard | soft | scad[:a] | alasso[:eta]."""
        parts = text.strip().lower().split(":")
        kind = parts[0]
        if kind in ("hard", "soft"):
            if len(parts) > 1:
                raise ValueError(f"rule {kind!r} takes no parameter")
            return cls(kind)
        if kind == "scad":
            return cls("scad", a=float(parts[1])) if len(parts) > 1 else cls("scad")
        if kind == "alasso":
            return cls("alasso", eta=float(parts[1])) if len(parts) > 1 else cls("alasso")
        raise ValueError(f"unknown thresholding rule {text!r}")

    def __str__(self) -> str:
        if self.kind == "scad":
            return f"scad:{self.a:g}"
        if self.kind == "alasso":
            return f"alasso:{self.eta:g}"
        return self.kind


def shrink(z, lam: float, rule: ThresholdRule):
    """Apply the shrinkage rule elementwise; accepts scalars or arrays."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    z = np.asarray(z, dtype=float)
    az = np.abs(z)
    if rule.kind == "hard":
        out = np.where(az > lam, z, 0.0)
    elif rule.kind == "soft":
        out = np.sign(z) * np.maximum(az - lam, 0.0)
    elif rule.kind == "scad":
        a = rule.a
        soft = np.sign(z) * np.maximum(az - lam, 0.0)
        mid = ((a - 1) * z - np.sign(z) * a * lam) / (a - 2)
        out = np.where(az <= 2 * lam, soft, np.where(az <= a * lam, mid, z))
    else:  # alasso
        # lam * (lam/|z|)^eta rather than lam^(eta+1) * |z|^-eta: equal
        # analytically, but exact (penalty == lam) when |z| == lam.
        safe_az = np.where(az > 0, az, 1.0)
        with np.errstate(over="ignore"):  # huge lam/|z| ratios overflow to inf: fine
            penalty = np.where(az > 0, lam * (lam / safe_az) ** rule.eta, np.inf)
        out = np.sign(z) * np.maximum(az - penalty, 0.0)
    return out if out.ndim else float(out)


def apply_threshold(est: DynCovEstimate, lam: float, rule: ThresholdRule) -> DynCovEstimate:
    """Shrink off-diagonal entries; the diagonal is copied verbatim."""
    if est.stage is not Stage.RAW:
        raise ValueError(f"apply_threshold expects a Raw estimate, got {est.stage}")
    return DynCovEstimate(u=est.u, matrix=_shrink_offdiag(est.matrix, lam, rule), stage=Stage.THRESHOLDED)


def _shrink_offdiag(matrix: np.ndarray, lam: float, rule: ThresholdRule) -> np.ndarray:
    out = shrink(matrix, lam, rule)
    np.fill_diagonal(out, np.diagonal(matrix))
    return out


@dataclass(frozen=True)
class LambdaSelection:
    """A selected penalty with the evaluated grid and CV scores."""

    lam: float
    grid: np.ndarray
    cv_scores: np.ndarray

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        if grid[0] != 0.0 or np.any(np.diff(grid) < 0):
            raise ValueError("grid must be ascending and start at 0")
        if self.lam not in grid:
            raise ValueError("selected lambda must belong to the grid")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "cv_scores", np.asarray(self.cv_scores, dtype=float))


def lambda_grid(raw_matrix: np.ndarray, size: int = 20) -> np.ndarray:
    """0 plus `size` log-spaced values up to the max off-diagonal magnitude."""
    off = np.abs(raw_matrix - np.diag(np.diagonal(raw_matrix))).max(initial=0.0)
    if off <= 0:
        return np.array([0.0])
    return np.concatenate([[0.0], np.geomspace(off * 1e-3, off, size)])


def _subset_config(config: ForestConfig, m: int, n_full: int, n_trees: int) -> ForestConfig:
    """Scale a resolved config to an m-row subset (CV fold training)."""
    s = max(2, min(m, round(config.subsample_size * m / n_full)))
    k = min(config.min_leaf, max(1, s // 2))
    return ForestConfig(
        n_trees=n_trees,
        subsample_size=s,
        min_leaf=k,
        regularity=config.regularity,
        random_split_prob=config.random_split_prob,
        mtry=config.mtry,
        seed=config.seed,
    )


class ForestCV:
    """V-fold machinery for selecting the thresholding penalty.

    Fold forests are trained once (with a reduced tree count, since tuning
    needs ranking fidelity rather than final precision) and reused for every
    query point: scoring a candidate lambda at u only requires evaluating the
    per-fold raw estimates there.
    """

    def __init__(
        self,
        dataset: Dataset,
        config: ForestConfig,
        folds: int = 5,
        shared_forests: bool = False,
        tree_divisor: int = 5,
        min_trees: int = 50,
        workers: int = 1,
    ):
        if folds < 2:
            raise ValueError("need at least 2 folds")
        if dataset.n < 2 * folds:
            raise ValueError(f"n={dataset.n} too small for {folds}-fold CV")
        cfg = config.resolve(dataset.n, dataset.d)
        n_cv_trees = max(min_trees, cfg.n_trees // tree_divisor)
        rng = _streams.substream(cfg.seed, _streams.FOLD)
        perm = rng.permutation(dataset.n)
        self.folds = [np.sort(part) for part in np.array_split(perm, folds)]
        self._pairs = []
        for v, fold in enumerate(self.folds):
            train_idx = np.sort(np.setdiff1d(perm, fold))
            if len(train_idx) < 4:
                raise ValueError(f"fold {v}: complement too small to train a forest")
            train_ds = dataset.subset(train_idx)
            hold_ds = dataset.subset(fold)
            train_cfg = _subset_config(cfg, len(train_idx), dataset.n, n_cv_trees)
            hold_cfg = _subset_config(cfg, len(fold), dataset.n, n_cv_trees)
            train_forests = train_cov_forests(train_ds, train_cfg, shared=shared_forests, workers=workers)
            hold_forests = train_cov_forests(hold_ds, hold_cfg, shared=shared_forests, workers=workers)
            self._pairs.append(((train_forests, train_ds), (hold_forests, hold_ds)))

    def select(self, u: np.ndarray, rule: ThresholdRule, grid: np.ndarray) -> LambdaSelection:
        """Pick the grid lambda minimizing the mean held-out Frobenius score at u."""
        grid = np.asarray(grid, dtype=float)
        scores = np.zeros(len(grid))
        for (train_forests, train_ds), (hold_forests, hold_ds) in self._pairs:
            fit = raw_cov(*train_forests, train_ds, u).matrix
            held = raw_cov(*hold_forests, hold_ds, u).matrix
            for g, lam in enumerate(grid):
                diff = _shrink_offdiag(fit, lam, rule) - held
                scores[g] += float(np.sum(diff * diff))
        scores /= len(self._pairs)
        return LambdaSelection(lam=float(grid[int(np.argmin(scores))]), grid=grid, cv_scores=scores)


def select_lambda(
    dataset: Dataset,
    forests: tuple[Forest, Forest],
    u: np.ndarray,
    rule: ThresholdRule,
    folds: int = 5,
    grid_size: int = 20,
    cv: ForestCV | None = None,
) -> LambdaSelection:
    """Cross-validated penalty for the query point u.

    ``forests`` are the full-data mean/second-moment forests; their raw
    estimate at u fixes the grid's upper bound.  Pass a prebuilt ``cv`` to
    amortize fold-forest training across many query points.
    """
    mean_forest, sm_forest = forests
    if cv is None:
        cv = ForestCV(dataset, mean_forest.config, folds=folds)
    grid = lambda_grid(raw_cov(mean_forest, sm_forest, dataset, u).matrix, size=grid_size)
    return cv.select(u, rule, grid)


@dataclass(frozen=True)
class PDCorrection:
    """Outcome of the positive-definiteness correction."""

    delta_hat: float
    c_n: float
    applied: bool


def default_cn(matrix: np.ndarray) -> float:
    """Scale-aware small shift: 1e-4 times the largest diagonal entry."""
    top = float(np.diagonal(matrix).max(initial=0.0))
    return 1e-4 * top if top > 0 else 1e-8


def pd_correct(est: DynCovEstimate, c_n: float | None = None) -> tuple[DynCovEstimate, PDCorrection]:
    """Shift by (delta_hat + c_n) I when the smallest eigenvalue is <= 0."""
    if est.stage is not Stage.THRESHOLDED:
        raise ValueError(f"pd_correct expects a Thresholded estimate, got {est.stage}")
    if c_n is None:
        c_n = default_cn(est.matrix)
    if c_n <= 0:
        raise ValueError("c_n must be > 0")
    mu_min = float(np.linalg.eigvalsh(est.matrix)[0])
    if mu_min > 0:
        out = DynCovEstimate(u=est.u, matrix=est.matrix, stage=Stage.PD_CORRECTED)
        return out, PDCorrection(delta_hat=0.0, c_n=c_n, applied=False)
    delta_hat = -mu_min
    shifted = est.matrix + (delta_hat + c_n) * np.eye(est.p)
    out = DynCovEstimate(u=est.u, matrix=shifted, stage=Stage.PD_CORRECTED)
    return out, PDCorrection(delta_hat=delta_hat, c_n=c_n, applied=True)


def precision(est: DynCovEstimate) -> np.ndarray:
    """Inverse of a PD-corrected estimate via its Cholesky factor."""
    if est.stage is not Stage.PD_CORRECTED:
        raise ValueError(f"precision expects a PDCorrected estimate, got {est.stage}")
    try:
        chol = np.linalg.cholesky(est.matrix)
    except np.linalg.LinAlgError as exc:
        raise ValueError("PD invariant broken upstream: Cholesky failed") from exc
    linv = np.linalg.solve(chol, np.eye(est.p))
    inv = linv.T @ linv
    return (inv + inv.T) / 2.0
