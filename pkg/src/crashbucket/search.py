"""Epsilon search over hybrid extractions and best-clustering selection."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .hierarchy import (
    NOISE,
    Clustering,
    CondensedHierarchy,
    ExtractionSweep,
    build_hierarchy,
    pairwise_distances,
    positive_distance_range,
    prim_mst,
    _coords,
)

DBCV_TOLERANCE = 0.2
PERSISTENCE_TOLERANCE = 0.2
MAX_DBCV_SURVIVORS = 10


def effective_count(clustering: Clustering) -> int:
    """Clusters plus noise points, each noise point counting as its own cluster."""
    return clustering.n_clusters + clustering.n_noise


@dataclass(frozen=True, eq=False)
class CandidateClustering:
    clustering: Clustering
    dbcv: float
    persistence: float
    effective_count: int

    @property
    def epsilon(self) -> float:
        return self.clustering.epsilon

    def summary(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "dbcv": self.dbcv,
            "persistence": self.persistence,
            "effective_count": self.effective_count,
            "clusters": self.clustering.n_clusters,
            "noise": self.clustering.n_noise,
        }


@dataclass(frozen=True)
class SearchParams:
    num_steps: int = 64
    min_dist: float | None = None
    max_dist: float | None = None

    def __post_init__(self) -> None:
        if self.num_steps < 1:
            raise ValueError("num_steps must be positive")
        if self.min_dist is not None and self.max_dist is not None and self.min_dist > self.max_dist:
            raise ValueError("min_dist exceeds max_dist")


# --- DBCV ----------------------------------------------------------------

def _all_points_core(sub: np.ndarray, dim: int) -> np.ndarray:
    """All-points core distance of each member, from the within-cluster
    distance matrix ``sub``. Computed in log space because the exponent is
    the data dimension."""
    m = sub.shape[0]
    with np.errstate(divide="ignore"):
        logs = -dim * np.log(sub)
    np.fill_diagonal(logs, -np.inf)
    with np.errstate(over="ignore", invalid="ignore"):
        log_mean = logsumexp(logs, axis=1) - np.log(m - 1)
        core = np.exp(-log_mean / dim)
    return np.where(np.isinf(log_mean), 0.0, core)


def _cluster_shape(sub: np.ndarray, coords: np.ndarray):
    """(core distances, internal member mask, density sparseness).

    Mutual reachability ties are common (a large core distance dominates
    many pairs), and which tied edge enters the MST decides which members
    count as internal. Ties are therefore broken by a ranking of the
    members on (core distance, coordinates) rather than by input position,
    so the index does not depend on point order.
    """
    core = _all_points_core(sub, coords.shape[1])
    rank = np.lexsort(coords.T[::-1].tolist() + [core])
    mr = np.maximum(sub, np.maximum.outer(core, core))[np.ix_(rank, rank)]
    np.fill_diagonal(mr, 0.0)
    tree = prim_mst(mr)
    a, b = rank[tree.a], rank[tree.b]
    degree = np.bincount(np.concatenate([a, b]), minlength=sub.shape[0])
    internal = degree > 1
    if not internal.any():
        internal = np.ones(sub.shape[0], dtype=bool)
    inner_edges = internal[a] & internal[b]
    weights = tree.weight[inner_edges] if inner_edges.any() else tree.weight
    return core, internal, float(weights.max())


def dbcv(points, labels, distances: np.ndarray | None = None) -> float:
    """Density-based clustering validation index in [-1, 1].

    Noise points and one-point clusters score 0 but still count in the
    size weighting. With fewer than two clusters of two or more points the
    index is 0.
    """
    x = _coords(points)
    labels = np.asarray(getattr(labels, "labels", labels))
    n = x.shape[0]
    if distances is None:
        distances = pairwise_distances(x)

    members = [np.flatnonzero(labels == lab) for lab in np.unique(labels[labels != NOISE])]
    members = [m for m in members if m.size >= 2]
    if len(members) < 2:
        return 0.0

    shapes = []
    for m in members:
        core, internal, sparseness = _cluster_shape(distances[np.ix_(m, m)], x[m])
        shapes.append((m[internal], core[internal], sparseness))

    k = len(members)
    separation = np.full((k, k), np.inf)
    for i in range(k):
        idx_i, core_i, _ = shapes[i]
        for j in range(i + 1, k):
            idx_j, core_j, _ = shapes[j]
            block = distances[np.ix_(idx_i, idx_j)]
            block = np.maximum(block, np.maximum.outer(core_i, core_j))
            separation[i, j] = separation[j, i] = block.min()

    score = 0.0
    for i in range(k):
        sep = separation[i].min()
        sparse = shapes[i][2]
        denom = max(sep, sparse)
        validity = 0.0 if denom == 0 else (sep - sparse) / denom
        score += members[i].size / n * validity
    return float(score)


# --- selection -----------------------------------------------------------

def choose_best(candidates: list[CandidateClustering]) -> CandidateClustering:
    """Three-stage pick: near-best DBCV, then near-best persistence, then fewest clusters."""
    if not candidates:
        raise ValueError("no candidates to choose from")

    top = max(c.dbcv for c in candidates)
    floor = top - DBCV_TOLERANCE * abs(top)
    stage1 = [c for c in candidates if c.dbcv >= floor] if top != 0 else list(candidates)
    stage1.sort(key=lambda c: (-c.dbcv, c.effective_count, -c.persistence, c.epsilon))
    stage1 = stage1[:MAX_DBCV_SURVIVORS]

    best_p = max(c.persistence for c in stage1)
    stage2 = [c for c in stage1 if c.persistence >= (1 - PERSISTENCE_TOLERANCE) * best_p]

    return min(stage2, key=lambda c: (c.effective_count, -c.persistence, -c.dbcv, c.epsilon))


# --- epsilon search ------------------------------------------------------

@dataclass
class SearchResult:
    best: CandidateClustering
    candidates: list[CandidateClustering]
    evaluated_epsilons: list[float] = field(default_factory=list)
    iterations: int = 0


def epsilon_search(extract, min_dist: float, max_dist: float, num_steps: int) -> tuple[list[Clustering], int]:
    """Divide-and-conquer scan of the epsilon range.

    ``extract(eps)`` returns a clustering. Intervals whose two endpoints
    agree are not split further. Returns every clustering produced (in
    evaluation order) and the number of iterations run.
    """
    queue = deque([(min_dist, max_dist)])
    clusterings: list[Clustering] = []
    steps = 0
    while queue and steps < num_steps:
        start, end = queue.popleft()
        first, last = extract(start), extract(end)
        clusterings.append(first)
        clusterings.append(last)
        if not first.same_partition(last):
            mid = (start + end) / 2
            step = (mid - start) / num_steps
            queue.append((start + step, mid))
            queue.append((mid + step, end - step))
        steps += 1
    return clusterings, steps


def score(points, clusterings: list[Clustering], sweep: ExtractionSweep, distances: np.ndarray) -> list[CandidateClustering]:
    """DBCV and persistence for each distinct partition (smallest epsilon kept)."""
    unique: dict[bytes, Clustering] = {}
    for c in clusterings:
        known = unique.get(c.key)
        if known is None or c.epsilon < known.epsilon:
            unique[c.key] = c
    return [
        CandidateClustering(c, dbcv(points, c.labels, distances), sweep.persistence(c.epsilon), effective_count(c))
        for c in unique.values()
    ]


def search(points, hierarchy: CondensedHierarchy | None = None, params: SearchParams = SearchParams()) -> SearchResult:
    x = _coords(points)
    n = x.shape[0]
    if n == 0:
        raise ValueError("cannot cluster an empty point set")
    if n == 1:
        single = CandidateClustering(Clustering(np.zeros(1, dtype=np.int64), 0.0, "single"), 0.0, 1.0, 1)
        return SearchResult(single, [single])

    distances = pairwise_distances(x)
    if hierarchy is None:
        _, _, hierarchy = build_hierarchy(x, m_pts=1, min_cluster_size=2, distances=distances)
    d_min, d_max = positive_distance_range(distances)
    sweep = ExtractionSweep(hierarchy, d_min, d_max)
    lo = d_min if params.min_dist is None else params.min_dist
    hi = d_max if params.max_dist is None else params.max_dist

    clusterings, steps = epsilon_search(sweep.extract, lo, hi, params.num_steps)
    candidates = score(x, clusterings, sweep, distances)
    return SearchResult(choose_best(candidates), candidates, [c.epsilon for c in clusterings], steps)


def cluster_search(points, hierarchy: CondensedHierarchy | None = None, params: SearchParams = SearchParams()) -> CandidateClustering:
    return search(points, hierarchy, params).best
