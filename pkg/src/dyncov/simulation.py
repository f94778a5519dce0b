"""Monte Carlo benchmark harness: synthetic generators, loss metrics,
static and kernel-smoothing baselines, and the replicated experiment runner.

Four generators are provided: two scaled AR(1)-style structures driven by
one or two covariate coordinates, and two banded varying-sparsity structures
whose off-diagonal support switches on and off with the covariates.
Accuracy is summarized by the median Frobenius/spectral losses over a fixed
set of 30 query points, and sparsity recovery by median true/false positive
rates.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import _streams
from .covariance import DynCovEstimate, Stage, raw_cov, train_cov_forests
from .data import Dataset
from .forest import ForestConfig
from .thresholding import (
    ForestCV,
    LambdaSelection,
    ThresholdRule,
    _shrink_offdiag,
    lambda_grid,
    pd_correct,
)

N_TEST_POINTS = 30


@dataclass(frozen=True)
class ModelSpec:
    """One of the four synthetic generators with its dimensions."""

    model: int
    p: int
    d: int
    n: int

    def __post_init__(self):
        if self.model not in (1, 2, 3, 4):
            raise ValueError(f"model must be 1..4, got {self.model}")
        if self.p < 1 or self.d < 1 or self.n < 1:
            raise ValueError("p, d and n must be >= 1")
        if self.model in (2, 4) and self.d < 2:
            raise ValueError(f"model {self.model} reads u1 and u2; needs d >= 2")
        if self.model in (3, 4) and self.p < 3:
            raise ValueError(f"model {self.model} has a two-band structure; needs p >= 3")


def _norm_pdf(x: float) -> float:
    return math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def _bump(x: float, center: float, width: float) -> float:
    """Smooth bump supported on (center - width, center + width), 0 outside."""
    gap = width * width - (x - center) ** 2
    if gap <= 0:
        return 0.0
    return math.exp(-((x - center) ** 2) / gap)


def _band_matrix(p: int, coef1: float, coef2: float, scale: float) -> np.ndarray:
    """scale * (I + coef1 on |j-r|=1 + coef2 on |j-r|=2)."""
    m = np.eye(p)
    if coef1 != 0.0:
        m += coef1 * (np.eye(p, k=1) + np.eye(p, k=-1))
    if coef2 != 0.0:
        m += coef2 * (np.eye(p, k=2) + np.eye(p, k=-2))
    return scale * m


def _zeta_coefs(u1: float, u2: float) -> tuple[float, float, float]:
    """(first-band, second-band, scale) of the varying-sparsity structure."""
    c1 = 0.0
    if -0.5 <= u1 <= 1 and -0.5 <= u2 <= 1:
        c1 = 0.5 * _bump(u1, 0.25, 0.75)
    c2 = 0.0
    if 0.3 <= u1 <= 1 and 0.3 <= u2 <= 1:
        c2 = 0.4 * _bump(u1, 0.65, 0.35)
    return c1, c2, math.exp(2.0 * u1)


def true_cov(spec: ModelSpec, u: np.ndarray) -> np.ndarray:
    """Exact population covariance matrix of the generator at u."""
    u = np.asarray(u, dtype=float)
    if u.shape != (spec.d,):
        raise ValueError(f"u must have length d={spec.d}")
    p = spec.p
    if spec.model == 1:
        rho = _norm_pdf(u[0])
        bands = np.abs(np.subtract.outer(np.arange(p), np.arange(p)))
        return math.exp(u[0]) * rho**bands
    if spec.model == 2:
        rho = _norm_pdf(u[0] / 2 + u[1] / 2)
        bands = np.abs(np.subtract.outer(np.arange(p), np.arange(p)))
        return math.exp(u[0] + u[1]) * rho**bands
    if spec.model == 3:
        c1 = 0.5 * _bump(u[0], 0.25, 0.75) if -0.5 <= u[0] <= 1 else 0.0
        c2 = 0.4 * _bump(u[0], 0.65, 0.35) if 0.3 <= u[0] <= 1 else 0.0
        return _band_matrix(p, c1, c2, math.exp(2.0 * u[0]))
    # model 4: symmetrized pair of varying-sparsity structures
    c1a, c2a, sa = _zeta_coefs(u[0], u[1])
    c1b, c2b, sb = _zeta_coefs(u[1], u[0])
    return 0.5 * _band_matrix(p, c1a, c2a, sa) + 0.5 * _band_matrix(p, c1b, c2b, sb)


def sample_dataset(spec: ModelSpec, rng: np.random.Generator) -> Dataset:
    """n iid pairs: u uniform on [-1, 1]^d, y Gaussian with covariance at u."""
    u = rng.uniform(-1.0, 1.0, size=(spec.n, spec.d))
    y = np.empty((spec.n, spec.p))
    for i in range(spec.n):
        sigma = true_cov(spec, u[i])
        try:
            chol = np.linalg.cholesky(sigma)
        except np.linalg.LinAlgError as exc:  # generators are PD by construction
            raise AssertionError(f"generator not PD at u={u[i]}") from exc
        y[i] = chol @ rng.standard_normal(spec.p)
    return Dataset(y, u)


def test_points(d: int, count: int = N_TEST_POINTS) -> np.ndarray:
    """The frozen benchmark query points for dimension d (constant across runs)."""
    rng = _streams.substream(_streams.TEST_POINT_ROOT, _streams.TEST_POINTS, d, count)
    return rng.uniform(-1.0, 1.0, size=(count, d))


def losses(est: np.ndarray, truth: np.ndarray) -> tuple[float, float]:
    """(Frobenius, spectral) distance between two symmetric matrices."""
    est = np.asarray(est, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if est.shape != truth.shape:
        raise ValueError("dimension mismatch")
    diff = est - truth
    fro = float(np.linalg.norm(diff))
    spectral = float(np.abs(np.linalg.eigvalsh((diff + diff.T) / 2.0)).max())
    return fro, spectral


def sparsity_rates(est: np.ndarray, truth: np.ndarray) -> tuple[float, float]:
    """(TPR, FPR) of the estimated support against the true support.

    Counts run over all (j, r) pairs including the diagonal; an empty
    reference set yields TPR = 1 (resp. FPR = 0).
    """
    est = np.asarray(est)
    truth = np.asarray(truth)
    if est.shape != truth.shape:
        raise ValueError("dimension mismatch")
    est_nz = est != 0
    true_nz = truth != 0
    n_pos = int(true_nz.sum())
    n_neg = int((~true_nz).sum())
    tpr = float((est_nz & true_nz).sum() / n_pos) if n_pos else 1.0
    fpr = float((est_nz & ~true_nz).sum() / n_neg) if n_neg else 0.0
    return tpr, fpr


def median_over_test_points(values) -> float:
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("median of empty input")
    return float(np.median(values))


# --- baselines -------------------------------------------------------------


def _sample_cov(y: np.ndarray) -> np.ndarray:
    centered = y - y.mean(axis=0)
    return centered.T @ centered / y.shape[0]


def _cv_threshold(
    raw_full: np.ndarray,
    fit_fn,
    hold_fn,
    n: int,
    rule: ThresholdRule,
    folds: int,
    grid_size: int,
    seed: int,
    canonical_order: np.ndarray | None = None,
) -> tuple[np.ndarray, LambdaSelection]:
    """Generic V-fold penalty selection for weight-based estimators.

    ``fit_fn``/``hold_fn`` map an index subset to a raw matrix estimate.
    ``canonical_order`` makes the fold partition a function of row content
    rather than row position, so the selection is invariant to permuting the
    sample order.
    """
    grid = lambda_grid(raw_full, size=grid_size)
    if len(grid) == 1:  # no off-diagonal mass; nothing to tune
        sel = LambdaSelection(lam=0.0, grid=grid, cv_scores=np.zeros(1))
        return raw_full.copy(), sel
    folds = min(folds, n // 2)
    if folds < 2:
        raise ValueError(f"n={n} too small for cross-validation")
    rng = _streams.substream(seed, _streams.FOLD)
    if canonical_order is not None:
        perm = np.asarray(canonical_order)[rng.permutation(n)]
    else:
        perm = rng.permutation(n)
    scores = np.zeros(len(grid))
    for part in np.array_split(perm, folds):
        hold_idx = np.sort(part)
        fit_idx = np.sort(np.setdiff1d(perm, part))
        fit = fit_fn(fit_idx)
        held = hold_fn(hold_idx)
        for g, lam in enumerate(grid):
            diff = _shrink_offdiag(fit, lam, rule) - held
            scores[g] += float(np.sum(diff * diff))
    scores /= folds
    sel = LambdaSelection(lam=float(grid[int(np.argmin(scores))]), grid=grid, cv_scores=scores)
    return _shrink_offdiag(raw_full, sel.lam, rule), sel


def static_baseline(
    dataset: Dataset,
    rule: ThresholdRule,
    folds: int = 5,
    grid_size: int = 20,
    seed: int = 0,
) -> np.ndarray:
    """Sample covariance (denominator n) with cross-validated thresholding."""
    if dataset.n < 2:
        raise ValueError("static baseline needs n >= 2")
    raw_full = _sample_cov(dataset.y)
    out, _ = _cv_threshold(
        raw_full,
        lambda idx: _sample_cov(dataset.y[idx]),
        lambda idx: _sample_cov(dataset.y[idx]),
        dataset.n,
        rule,
        folds,
        grid_size,
        seed,
        canonical_order=_canonical_row_order(dataset),
    )
    return out


def _canonical_row_order(dataset: Dataset) -> np.ndarray:
    """Content-based row ordering (lexicographic on (y, u) rows)."""
    return np.lexsort(np.vstack([dataset.y.T, dataset.u.T]))


def _epanechnikov(x: np.ndarray) -> np.ndarray:
    return 0.75 * np.maximum(1.0 - x * x, 0.0)


def rule_of_thumb_bandwidth(uj: np.ndarray) -> float:
    sd = float(np.std(uj, ddof=1)) if len(uj) > 1 else 1.0
    return 1.06 * max(sd, 1e-12) * len(uj) ** (-0.2)


def _kernel_raw(y: np.ndarray, uj: np.ndarray, u_target: float, h: float, retries: int = 40) -> np.ndarray:
    for _ in range(retries):
        w = _epanechnikov((uj - u_target) / h)
        total = w.sum()
        if total > 0:
            w = w / total
            mean = y.T @ w
            second = y.T @ (y * w[:, None])
            return (second + second.T) / 2.0 - np.outer(mean, mean)
        h *= 2.0  # widen-bandwidth retry
    raise ValueError("all kernel weights zero even after widening the bandwidth")


def kernel_dcm_baseline(
    dataset: Dataset,
    covariate_index: int,
    u: np.ndarray,
    rule: ThresholdRule,
    bandwidth: float | None = None,
    folds: int = 5,
    grid_size: int = 20,
    seed: int = 0,
) -> np.ndarray:
    """Single-covariate kernel-weighted raw estimate with CV thresholding.

    ``covariate_index`` is 1-based.  Nadaraya-Watson weights built from an
    Epanechnikov kernel replace both the mean and second-moment weightings.
    """
    j = covariate_index - 1
    if not 0 <= j < dataset.d:
        raise ValueError(f"covariate index must be in 1..{dataset.d}")
    uj = dataset.u[:, j]
    target = float(np.asarray(u, dtype=float)[j])
    h = bandwidth if bandwidth is not None else rule_of_thumb_bandwidth(uj)
    raw_full = _kernel_raw(dataset.y, uj, target, h)
    out, _ = _cv_threshold(
        raw_full,
        lambda idx: _kernel_raw(dataset.y[idx], uj[idx], target, h),
        lambda idx: _kernel_raw(dataset.y[idx], uj[idx], target, h),
        dataset.n,
        rule,
        folds,
        grid_size,
        seed,
        canonical_order=_canonical_row_order(dataset),
    )
    return out


# --- experiment runner -----------------------------------------------------

METHOD_NAMES = ("fdcm", "mfdcm", "static", "kernel", "mkernel")


@dataclass(frozen=True)
class MethodSpec:
    """Estimator descriptor: name, thresholding rule, kernel covariate index."""

    name: str
    rule: ThresholdRule
    kernel_covariate: int = 1

    def __post_init__(self):
        if self.name not in METHOD_NAMES:
            raise ValueError(f"unknown method {self.name!r}; choose from {METHOD_NAMES}")
        if self.kernel_covariate < 1:
            raise ValueError("kernel covariate index is 1-based")

    @classmethod
    def parse(cls, text: str) -> "MethodSpec":
        """Parse ``name:rule`` or ``kernel:J:rule`` descriptors."""
        parts = text.strip().split(":")
        name = parts[0].lower()
        rest = parts[1:]
        cov = 1
        if name in ("kernel", "mkernel") and rest and rest[0].isdigit():
            cov = int(rest[0])
            rest = rest[1:]
        if not rest:
            raise ValueError(f"method {text!r} is missing a thresholding rule")
        return cls(name=name, rule=ThresholdRule.parse(":".join(rest)), kernel_covariate=cov)

    def __str__(self) -> str:
        if self.name in ("kernel", "mkernel"):
            return f"{self.name}:{self.kernel_covariate}:{self.rule}"
        return f"{self.name}:{self.rule}"


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelSpec
    methods: tuple[MethodSpec, ...]
    reps: int = 50
    seed: int = 0
    forest: ForestConfig = field(default_factory=ForestConfig)
    folds: int = 5
    grid_size: int = 20
    lambda_mode: str = "per-point"  # or "shared" (select once at the covariate centroid)
    workers: int = 1

    def __post_init__(self):
        if self.reps < 1:
            raise ValueError("reps must be >= 1")
        if self.lambda_mode not in ("per-point", "shared"):
            raise ValueError("lambda_mode must be 'per-point' or 'shared'")
        if not self.methods:
            raise ValueError("at least one method is required")


@dataclass
class MethodResult:
    """Per-replication metric values for one method."""

    method: MethodSpec
    mfl: np.ndarray
    msl: np.ndarray
    mtpr: np.ndarray | None
    mfpr: np.ndarray | None
    # Raw per-(rep, test point) losses, used by sanity checks.
    fro: np.ndarray
    spectral: np.ndarray


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    points: np.ndarray
    results: list[MethodResult]
    runtime_s: float

    def rows(self) -> list[tuple[str, str, float, float]]:
        """(method, metric, mean, sd) rows; sd is 0 for a single replication."""
        out = []
        for res in self.results:
            metrics = [("mfl", res.mfl), ("msl", res.msl)]
            if res.mtpr is not None:
                metrics += [("mtpr", res.mtpr), ("mfpr", res.mfpr)]
            for name, vals in metrics:
                sd = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
                out.append((str(res.method), name, float(np.mean(vals)), sd))
        return out

    def to_csv_lines(self, header_lines=()) -> list[str]:
        lines = [f"# {h}" for h in header_lines]
        lines.append("method,metric,mean,sd")
        lines += [f"{m},{k},{repr(mean)},{repr(sd)}" for m, k, mean, sd in self.rows()]
        return lines

    def to_table(self) -> str:
        width = max(len(str(r.method)) for r in self.results) + 2
        lines = [f"{'method':<{width}}{'metric':<8}{'mean':>12}{'sd':>12}"]
        for m, k, mean, sd in self.rows():
            lines.append(f"{m:<{width}}{k:<8}{mean:>12.4f}{sd:>12.4f}")
        return "\n".join(lines)


def _forest_estimates(
    dataset: Dataset,
    config: ExperimentConfig,
    points: np.ndarray,
    rules: list[ThresholdRule],
) -> dict[ThresholdRule, list[DynCovEstimate]]:
    """Thresholded forest estimates at every query point, one list per rule."""
    forests = train_cov_forests(dataset, config.forest, workers=config.workers)
    cv = ForestCV(dataset, config.forest, folds=config.folds, workers=config.workers)
    raws = [raw_cov(*forests, dataset, u) for u in points]
    out: dict[ThresholdRule, list[DynCovEstimate]] = {}
    for rule in rules:
        if config.lambda_mode == "shared":
            centroid = dataset.u.mean(axis=0)
            grid = lambda_grid(raw_cov(*forests, dataset, centroid).matrix, size=config.grid_size)
            lam = cv.select(centroid, rule, grid).lam
            lams = [lam] * len(points)
        else:
            lams = [
                cv.select(u, rule, lambda_grid(raw.matrix, size=config.grid_size)).lam
                for u, raw in zip(points, raws)
            ]
        out[rule] = [
            DynCovEstimate(u=raw.u, matrix=_shrink_offdiag(raw.matrix, lam, rule), stage=Stage.THRESHOLDED)
            for raw, lam in zip(raws, lams)
        ]
    return out


def _run_rep(config: ExperimentConfig, points: np.ndarray, rep: int):
    """One replication: fresh dataset, every method estimated at every point."""
    rng = _streams.substream(config.seed, _streams.REP, rep)
    dataset = sample_dataset(config.model, rng)
    truths = [true_cov(config.model, u) for u in points]

    forest_rules = sorted(
        {m.rule for m in config.methods if m.name in ("fdcm", "mfdcm")}, key=str
    )
    forest_ests = (
        _forest_estimates(dataset, config, points, forest_rules) if forest_rules else {}
    )

    per_method = []
    for method in config.methods:
        if method.name in ("fdcm", "mfdcm"):
            mats = [e.matrix for e in forest_ests[method.rule]]
            if method.name == "mfdcm":
                mats = [pd_correct(e)[0].matrix for e in forest_ests[method.rule]]
        elif method.name == "static":
            mat = static_baseline(
                dataset, method.rule, folds=config.folds, grid_size=config.grid_size, seed=config.seed
            )
            mats = [mat] * len(points)
        else:  # kernel / mkernel
            mats = [
                kernel_dcm_baseline(
                    dataset,
                    method.kernel_covariate,
                    u,
                    method.rule,
                    folds=config.folds,
                    grid_size=config.grid_size,
                    seed=config.seed,
                )
                for u in points
            ]
            if method.name == "mkernel":
                mats = [
                    pd_correct(DynCovEstimate(u=u, matrix=m, stage=Stage.THRESHOLDED))[0].matrix
                    for u, m in zip(points, mats)
                ]
        fro_sp = np.array([losses(m, t) for m, t in zip(mats, truths)])
        tpr_fpr = np.array([sparsity_rates(m, t) for m, t in zip(mats, truths)])
        per_method.append((fro_sp, tpr_fpr))
    return per_method


def run_experiment(config: ExperimentConfig) -> ExperimentReport:
    """Run the replicated benchmark; fully reproducible from the seed."""
    start = time.perf_counter()
    points = test_points(config.model.d)
    reps = [_run_rep(config, points, r) for r in range(config.reps)]

    sparsity_models = config.model.model in (3, 4)
    results = []
    for mi, method in enumerate(config.methods):
        fro = np.stack([reps[r][mi][0][:, 0] for r in range(config.reps)])
        spectral = np.stack([reps[r][mi][0][:, 1] for r in range(config.reps)])
        mfl = np.median(fro, axis=1)
        msl = np.median(spectral, axis=1)
        mtpr = mfpr = None
        if sparsity_models:
            tpr = np.stack([reps[r][mi][1][:, 0] for r in range(config.reps)])
            fpr = np.stack([reps[r][mi][1][:, 1] for r in range(config.reps)])
            mtpr = np.median(tpr, axis=1)
            mfpr = np.median(fpr, axis=1)
        results.append(
            MethodResult(method=method, mfl=mfl, msl=msl, mtpr=mtpr, mfpr=mfpr, fro=fro, spectral=spectral)
        )
    return ExperimentReport(
        config=config, points=points, results=results, runtime_s=time.perf_counter() - start
    )
