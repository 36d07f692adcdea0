"""DBSCAN pseudo-labels on a precomputed cosine-distance matrix."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass

import numpy as np

from fancl.errors import ConfigError, ContractError, ShapeError

log = logging.getLogger(__name__)

OUTLIER = -1


@dataclass
class DbscanConfig:
    eps: float = 0.6
    min_pts: int = 4

    def __post_init__(self):
        if not self.eps > 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")
        if self.min_pts < 1:
            raise ConfigError(f"min_pts must be >= 1, got {self.min_pts}")


@dataclass
class PseudoLabeling:
    labels: np.ndarray  # int, OUTLIER for noise points

    @property
    def n_clusters(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size and self.labels.max() >= 0 else 0

    @property
    def n_outliers(self) -> int:
        return int((self.labels == OUTLIER).sum())

    def members(self, cluster: int) -> np.ndarray:
        return np.flatnonzero(self.labels == cluster)


def pairwise_cosine_distance(features: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """``1 - f_i . f_j`` for unit-norm rows, clipped to [0, 2] with zero diagonal."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2:
        raise ShapeError(f"features must be (N, D), got dims {list(f.shape)}")
    norms = np.linalg.norm(f, axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > tol)
    if bad.size:
        raise ContractError(f"row {bad[0]} has norm {norms[bad[0]]:.8g}, expected unit norm")
    d = 1.0 - f @ f.T
    d = 0.5 * (d + d.T)
    np.clip(d, 0.0, 2.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def _compact(labels: np.ndarray) -> np.ndarray:
    # renumber clusters by their first member index
    out = np.full_like(labels, OUTLIER)
    next_id = 0
    seen: dict[int, int] = {}
    for i, lab in enumerate(labels):
        if lab == OUTLIER:
            continue
        if lab not in seen:
            seen[lab] = next_id
            next_id += 1
        out[i] = seen[lab]
    return out


def dbscan(dist: np.ndarray, config: DbscanConfig) -> PseudoLabeling:
    """Density clustering with deterministic border assignment.

    A point is core when at least ``min_pts`` points (itself included) lie
    within ``eps``. Core points within ``eps`` of each other share a
    cluster; a border point joins the cluster of its lowest-index core
    neighbor. Cluster ids follow the order of each cluster's first member.
    """
    dist = np.asarray(dist)
    n = dist.shape[0]
    if dist.ndim != 2 or dist.shape[1] != n:
        raise ShapeError(f"distance matrix must be square, got dims {list(dist.shape)}")
    adj = dist <= config.eps
    core = adj.sum(axis=1) >= config.min_pts
    labels = np.full(n, OUTLIER, dtype=np.int64)

    cluster = 0
    for seed in np.flatnonzero(core):
        if labels[seed] != OUTLIER:
            continue
        labels[seed] = cluster
        queue = deque([seed])
        while queue:
            p = queue.popleft()
            for q in np.flatnonzero(adj[p] & core):
                if labels[q] == OUTLIER:
                    labels[q] = cluster
                    queue.append(q)
        cluster += 1

    for p in np.flatnonzero(~core):
        core_nbrs = np.flatnonzero(adj[p] & core)
        if core_nbrs.size:
            labels[p] = labels[core_nbrs[0]]
    return PseudoLabeling(_compact(labels))


@dataclass
class LabeledView:
    """Index-aligned pseudo-labels shared by the three feature spaces."""

    labels: np.ndarray
    features: np.ndarray
    features_noised: np.ndarray
    features_fused: np.ndarray
    pool: np.ndarray  # indices of non-outlier samples
    n_clusters: int


def assign_pseudo_labels(labeling: PseudoLabeling, f, f_noised, f_fused) -> LabeledView:
    """Replicate the labeling across spaces and drop outliers from the pool."""
    sizes = {len(f), len(f_noised), len(f_fused), len(labeling.labels)}
    if len(sizes) != 1:
        raise ContractError(f"batch sizes differ across spaces: {sorted(sizes)}")
    pool = np.flatnonzero(labeling.labels != OUTLIER)
    if pool.size == 0:
        log.warning("every sample is an outlier; the training pool is empty")
    return LabeledView(
        labels=labeling.labels.copy(),
        features=np.asarray(f),
        features_noised=np.asarray(f_noised),
        features_fused=np.asarray(f_fused),
        pool=pool,
        n_clusters=labeling.n_clusters,
    )


def cluster_purity(labeling: PseudoLabeling, truth) -> float:
    """Fraction of clustered samples belonging to their cluster's majority class."""
    labels = np.asarray(labeling.labels)
    truth = np.asarray(truth)
    keep = labels != OUTLIER
    if not keep.any():
        raise ContractError("purity is undefined when every sample is an outlier")
    total = 0
    for c in np.unique(labels[keep]):
        _, counts = np.unique(truth[labels == c], return_counts=True)
        total += counts.max()
    return total / int(keep.sum())
