"""Honest, subsampled, regularized trees and forest similarity weights.

Each tree is grown on an s-of-n subsample that is split into two halves:
J1 targets plus J1/J2 covariates choose the splits, J2 alone populates the
leaves.  A query point's weight vector spreads mass 1/B across the J2
members of the leaf it reaches in every tree.

Split quality is the squared distance between child target means scaled by
n1*n2/nP^2.  For second-moment targets the p^2-vectors vec(y y^T) are never
materialized during growth: their inner products reduce to squared response
inner products, so all split scores come from a per-tree Gram matrix.
"""

from __future__ import annotations

import enum
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import _streams
from .data import Dataset


class ResponseKind(enum.Enum):
    """What a forest's trees target: responses y, or second moments vec(y y^T)."""

    MEAN = "mean"
    SECOND_MOMENT = "second_moment"


@dataclass(frozen=True)
class ForestConfig:
    """Tuning knobs for honest-forest training.

    ``subsample_size=None`` resolves to ceil(n/2) and ``mtry=None`` to
    ceil(sqrt(d)) at training time.
    """

    n_trees: int = 500
    subsample_size: int | None = None
    min_leaf: int = 5
    regularity: float = 0.05
    random_split_prob: float = 0.05
    mtry: int | None = None
    seed: int = 0

    def resolve(self, n: int, d: int) -> "ForestConfig":
        s = self.subsample_size if self.subsample_size is not None else math.ceil(n / 2)
        mtry = self.mtry if self.mtry is not None else math.ceil(math.sqrt(d))
        cfg = replace(self, subsample_size=s, mtry=mtry)
        cfg.validate(n, d)
        return cfg

    def validate(self, n: int, d: int) -> None:
        s, mtry = self.subsample_size, self.mtry
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if s is None or not 2 <= s <= n:
            raise ValueError(f"subsample size must satisfy 2 <= s <= n, got s={s}, n={n}")
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be >= 1")
        if not 0 < self.regularity <= 0.2:
            raise ValueError("regularity must lie in (0, 0.2]")
        if not 0 < self.random_split_prob <= 1:
            raise ValueError("random_split_prob must lie in (0, 1]")
        if mtry is None or not 1 <= mtry <= d:
            raise ValueError(f"mtry must satisfy 1 <= mtry <= d, got {mtry}, d={d}")


@dataclass
class Tree:
    """Binary tree over covariate space with J2 index lists at the leaves.

    Internal node i splits on ``feature[i]`` at ``threshold[i]`` (<= goes
    left); leaves have feature -1 and carry the dataset indices of their J2
    members.  ``oversized`` flags leaves kept above the 2k-1 bound because no
    feasible split existed.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaf_members: list[np.ndarray]
    j1_indices: np.ndarray
    j2_indices: np.ndarray
    oversized: np.ndarray

    def route(self, u: np.ndarray) -> int:
        nid = 0
        while self.feature[nid] >= 0:
            nid = self.left[nid] if u[self.feature[nid]] <= self.threshold[nid] else self.right[nid]
        return nid

    def leaf_of(self, u: np.ndarray) -> np.ndarray:
        """Dataset indices of the J2 members co-leafed with u."""
        return self.leaf_members[self.route(u)]


@dataclass
class Forest:
    trees: list[Tree]
    config: ForestConfig
    response_kind: ResponseKind
    n: int
    d: int
    dataset_fingerprint: str

    @property
    def n_trees(self) -> int:
        return len(self.trees)


@dataclass(frozen=True)
class WeightVector:
    """Sparse nonnegative similarity weights over the n training indices."""

    n: int
    indices: np.ndarray
    values: np.ndarray

    def to_dense(self) -> np.ndarray:
        dense = np.zeros(self.n)
        dense[self.indices] = self.values
        return dense

    def total(self) -> float:
        return float(self.values.sum())


def subsample(n: int, s: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform s-of-n index subset without replacement, sorted."""
    if not 2 <= s <= n:
        raise ValueError(f"need 2 <= s <= n, got s={s}, n={n}")
    return np.sort(rng.choice(n, size=s, replace=False))


def split_sample(indices: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random partition into halves of sizes ceil(m/2) and floor(m/2)."""
    indices = np.asarray(indices)
    m = len(indices)
    if m < 2:
        raise ValueError("need at least 2 indices to split")
    perm = rng.permutation(m)
    cut = math.ceil(m / 2)
    return np.sort(indices[perm[:cut]]), np.sort(indices[perm[cut:]])


def delta_criterion(sum1: np.ndarray, n1: int, sum2: np.ndarray, n2: int, n_parent: int) -> float:
    """Split score ||sum1/n1 - sum2/n2||^2 * n1*n2 / n_parent^2."""
    if n1 < 1 or n2 < 1:
        raise ValueError("child counts must be >= 1")
    diff = np.asarray(sum1, dtype=float) / n1 - np.asarray(sum2, dtype=float) / n2
    return float(diff @ diff * n1 * n2 / n_parent**2)


def _target_gram(y_j1: np.ndarray, kind: ResponseKind) -> np.ndarray:
    """Inner products of the (virtual) target vectors of the J1 rows."""
    inner = y_j1 @ y_j1.T
    return inner**2 if kind is ResponseKind.SECOND_MOMENT else inner


def _best_split_on_feature(v1, v2, gram, min_child_j2):
    """Best (delta, threshold) on one feature, or None if nothing is feasible.

    v1/v2 are the node's J1/J2 values of the feature; gram is the node's J1
    target Gram matrix aligned with v1.
    """
    m1, m2 = len(v1), len(v2)
    values = np.unique(np.concatenate([v1, v2]))
    if len(values) < 2:
        return None
    thresholds = (values[:-1] + values[1:]) / 2.0

    order = np.argsort(v1, kind="stable")
    v1s = v1[order]
    g = gram[np.ix_(order, order)]
    # Prefix quantities over the sorted J1 points: after taking the first m
    # points left, ||S_left||^2 is the double prefix sum and S_left . S_total
    # is the prefix of row sums.
    double_prefix = g.cumsum(axis=0).cumsum(axis=1).diagonal()
    row_sums = g.sum(axis=1)
    dot_total_prefix = np.cumsum(row_sums)
    total_norm = float(row_sums.sum())

    n1_left = np.searchsorted(v1s, thresholds, side="right")
    n2_left = np.searchsorted(np.sort(v2), thresholds, side="right")
    feasible = (
        (n1_left >= 1)
        & (n1_left <= m1 - 1)
        & (n2_left >= min_child_j2)
        & (m2 - n2_left >= min_child_j2)
    )
    if not feasible.any():
        return None

    idx = np.flatnonzero(feasible)
    nl = n1_left[idx]
    nr = m1 - nl
    s_left = double_prefix[nl - 1]
    d_left = dot_total_prefix[nl - 1]
    cross = d_left - s_left
    s_right = total_norm - 2.0 * d_left + s_left
    delta = (s_left / nl**2 - 2.0 * cross / (nl * nr) + s_right / nr**2) * nl * nr / m1**2
    best = int(np.argmax(delta))  # first max -> lowest threshold on ties
    return float(delta[best]), float(thresholds[idx[best]])


def best_split(u_j1, gram, u_j2, config: ForestConfig, rng: np.random.Generator, d: int):
    """Choose a split for a node, or None to make it a leaf.

    With probability ``random_split_prob`` one feature is drawn uniformly and
    only it is scanned; otherwise ``mtry`` candidate features compete on the
    delta criterion.  Any split must leave each child >= max(k, ceil(omega *
    node J2 count)) J2 points and >= 1 J1 point.
    """
    m1, m2 = len(u_j1), len(u_j2)
    if m1 < 2 or m2 < 2 * config.min_leaf:
        return None
    min_child_j2 = max(config.min_leaf, math.ceil(config.regularity * m2))

    if rng.random() < config.random_split_prob:
        features = [int(rng.integers(d))]
    else:
        features = sorted(int(f) for f in rng.choice(d, size=config.mtry, replace=False))

    best = None
    for f in features:
        cand = _best_split_on_feature(u_j1[:, f], u_j2[:, f], gram, min_child_j2)
        if cand is None:
            continue
        delta, thr = cand
        if best is None or delta > best[0]:
            best = (delta, f, thr)
    if best is None:
        return None
    return best[1], best[2]


def grow_tree(
    dataset: Dataset,
    j1: np.ndarray,
    j2: np.ndarray,
    response_kind: ResponseKind,
    config: ForestConfig,
    rng: np.random.Generator,
) -> Tree:
    """Grow one honest tree: J1 targets drive splits, J2 fills the leaves."""
    j1 = np.sort(np.asarray(j1, dtype=int))
    j2 = np.sort(np.asarray(j2, dtype=int))
    if len(j2) < config.min_leaf:
        raise ValueError(f"|J2|={len(j2)} below min_leaf={config.min_leaf}")
    u = dataset.u
    gram_all = _target_gram(dataset.y[j1], response_kind)
    d = dataset.d

    feature, threshold, left, right = [], [], [], []
    leaf_members: list[np.ndarray] = []
    oversized: list[bool] = []

    def new_node() -> int:
        feature.append(-1)
        threshold.append(math.nan)
        left.append(-1)
        right.append(-1)
        leaf_members.append(np.empty(0, dtype=int))
        oversized.append(False)
        return len(feature) - 1

    root = new_node()
    stack = [(root, np.arange(len(j1)), np.arange(len(j2)))]
    while stack:
        nid, p1, p2 = stack.pop()
        split = best_split(u[j1[p1]], gram_all[np.ix_(p1, p1)], u[j2[p2]], config, rng, d)
        if split is None:
            leaf_members[nid] = j2[p2]
            oversized[nid] = len(p2) > 2 * config.min_leaf - 1
            continue
        f, thr = split
        feature[nid], threshold[nid] = f, thr
        mask1 = u[j1[p1], f] <= thr
        mask2 = u[j2[p2], f] <= thr
        lid, rid = new_node(), new_node()
        left[nid], right[nid] = lid, rid
        # Push right first so the left branch is grown (and draws RNG) first.
        stack.append((rid, p1[~mask1], p2[~mask2]))
        stack.append((lid, p1[mask1], p2[mask2]))

    return Tree(
        feature=np.asarray(feature, dtype=int),
        threshold=np.asarray(threshold, dtype=float),
        left=np.asarray(left, dtype=int),
        right=np.asarray(right, dtype=int),
        leaf_members=leaf_members,
        j1_indices=j1,
        j2_indices=j2,
        oversized=np.asarray(oversized, dtype=bool),
    )


def _grow_one(dataset, config, response_kind, b):
    kind_tag = 0 if response_kind is ResponseKind.MEAN else 1
    rng = _streams.substream(config.seed, _streams.TREE, kind_tag, b)
    idx = subsample(dataset.n, config.subsample_size, rng)
    j1, j2 = split_sample(idx, rng)
    return grow_tree(dataset, j1, j2, response_kind, config, rng)


def train_forest(
    dataset: Dataset,
    config: ForestConfig,
    response_kind: ResponseKind,
    workers: int = 1,
) -> Forest:
    """Train B honest trees on independent subsamples.

    Each tree draws from its own RNG stream keyed on (seed, kind, tree index),
    so the result is identical for any worker count.
    """
    cfg = config.resolve(dataset.n, dataset.d)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            trees = list(
                pool.map(lambda b: _grow_one(dataset, cfg, response_kind, b), range(cfg.n_trees))
            )
    else:
        trees = [_grow_one(dataset, cfg, response_kind, b) for b in range(cfg.n_trees)]
    return Forest(
        trees=trees,
        config=cfg,
        response_kind=response_kind,
        n=dataset.n,
        d=dataset.d,
        dataset_fingerprint=dataset.fingerprint(),
    )


def weight_vector(forest: Forest, u: np.ndarray) -> WeightVector:
    """Co-leaf similarity weights of the training indices for query point u."""
    u = np.asarray(u, dtype=float)
    if u.shape != (forest.d,):
        raise ValueError(f"query point must have length d={forest.d}, got shape {u.shape}")
    dense = np.zeros(forest.n)
    B = forest.n_trees
    for tree in forest.trees:
        members = tree.leaf_of(u)
        if len(members) == 0:  # cannot occur under the leaf-size invariant
            continue
        dense[members] += 1.0 / (B * len(members))
    idx = np.flatnonzero(dense)
    return WeightVector(n=forest.n, indices=idx, values=dense[idx])


# --- serialization ---------------------------------------------------------

_FORMAT_VERSION = 1


def forest_to_json(forest: Forest) -> str:
    payload = {
        "version": _FORMAT_VERSION,
        "response_kind": forest.response_kind.value,
        "n": forest.n,
        "d": forest.d,
        "dataset_fingerprint": forest.dataset_fingerprint,
        "config": {
            "n_trees": forest.config.n_trees,
            "subsample_size": forest.config.subsample_size,
            "min_leaf": forest.config.min_leaf,
            "regularity": forest.config.regularity,
            "random_split_prob": forest.config.random_split_prob,
            "mtry": forest.config.mtry,
            "seed": forest.config.seed,
        },
        "trees": [
            {
                "feature": t.feature.tolist(),
                "threshold": [repr(float(x)) for x in t.threshold],
                "left": t.left.tolist(),
                "right": t.right.tolist(),
                "leaf_members": [m.tolist() for m in t.leaf_members],
                "j1": t.j1_indices.tolist(),
                "j2": t.j2_indices.tolist(),
                "oversized": t.oversized.astype(int).tolist(),
            }
            for t in forest.trees
        ],
    }
    return json.dumps(payload)


def forest_from_json(text: str) -> Forest:
    payload = json.loads(text)
    if payload.get("version") != _FORMAT_VERSION:
        raise ValueError(f"unsupported forest format version {payload.get('version')}")
    trees = [
        Tree(
            feature=np.asarray(t["feature"], dtype=int),
            threshold=np.asarray([float(x) for x in t["threshold"]], dtype=float),
            left=np.asarray(t["left"], dtype=int),
            right=np.asarray(t["right"], dtype=int),
            leaf_members=[np.asarray(m, dtype=int) for m in t["leaf_members"]],
            j1_indices=np.asarray(t["j1"], dtype=int),
            j2_indices=np.asarray(t["j2"], dtype=int),
            oversized=np.asarray(t["oversized"], dtype=bool),
        )
        for t in payload["trees"]
    ]
    cfg = ForestConfig(**payload["config"])
    return Forest(
        trees=trees,
        config=cfg,
        response_kind=ResponseKind(payload["response_kind"]),
        n=payload["n"],
        d=payload["d"],
        dataset_fingerprint=payload["dataset_fingerprint"],
    )
