"""Mutual reachability, minimum spanning tree, condensed cluster tree and
hybrid (HDBSCAN / DBSCAN*) flat-cluster extraction.

Conventions used throughout:

* Distances, not lambdas, are stored. Stability uses ``lambda = 1/distance``
  with zero distances mapped to a finite cap.
* Cluster nodes of a condensed tree are numbered ``n, n+1, ...``; the root is
  ``n`` and every parent has a smaller id than its children.
* ``NOISE`` (-1) marks unclustered points.
"""

from __future__ import annotations

import bisect
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist

NOISE = -1


@dataclass(frozen=True, eq=False)
class PointSet:
    coords: np.ndarray
    ids: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        coords = np.array(self.coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[0] < 1:
            raise ValueError("a point set needs at least one row vector")
        norms = np.linalg.norm(coords, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("points must be unit-norm")
        coords.flags.writeable = False
        object.__setattr__(self, "coords", coords)
        ids = tuple(self.ids) or tuple(str(i) for i in range(coords.shape[0]))
        if len(ids) != coords.shape[0]:
            raise ValueError("one id per point required")
        object.__setattr__(self, "ids", ids)

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    @property
    def dim(self) -> int:
        return self.coords.shape[1]


def _coords(points) -> np.ndarray:
    if isinstance(points, PointSet):
        return points.coords
    return np.asarray(points, dtype=np.float64)


def pairwise_distances(points) -> np.ndarray:
    x = _coords(points)
    d = cdist(x, x)
    np.fill_diagonal(d, 0.0)
    return d


def positive_distance_range(distances: np.ndarray) -> tuple[float, float]:
    """(min, max) over positive off-diagonal distances; (0, 0) if none."""
    upper = distances[np.triu_indices_from(distances, k=1)]
    upper = upper[upper > 0]
    if upper.size == 0:
        return 0.0, 0.0
    return float(upper.min()), float(upper.max())


@dataclass(frozen=True, eq=False)
class MutualReachability:
    distances: np.ndarray
    core: np.ndarray
    m_pts: int

    def __call__(self, a: int, b: int) -> float:
        if a == b:
            return 0.0
        return float(max(self.core[a], self.core[b], self.distances[a, b]))

    @cached_property
    def matrix(self) -> np.ndarray:
        mr = np.maximum(self.distances, np.maximum.outer(self.core, self.core))
        np.fill_diagonal(mr, 0.0)
        return mr

    @property
    def n(self) -> int:
        return self.distances.shape[0]


def core_distances(distances: np.ndarray, m_pts: int) -> np.ndarray:
    """Distance from each point to its ``m_pts``-th nearest other point."""
    n = distances.shape[0]
    if n < 2:
        return np.zeros(n)
    if not 1 <= m_pts <= n - 1:
        raise ValueError(f"m_pts must be in [1, {n - 1}], got {m_pts}")
    others = distances.copy()
    np.fill_diagonal(others, np.inf)
    return np.partition(others, m_pts - 1, axis=1)[:, m_pts - 1]


def mutual_reachability(points, m_pts: int = 1, distances: np.ndarray | None = None) -> MutualReachability:
    if distances is None:
        distances = pairwise_distances(points)
    return MutualReachability(distances, core_distances(distances, m_pts), m_pts)


# --- minimum spanning tree ----------------------------------------------

@dataclass(frozen=True, eq=False)
class MSTree:
    n: int
    a: np.ndarray
    b: np.ndarray
    weight: np.ndarray

    @property
    def total_weight(self) -> float:
        return float(self.weight.sum())

    def edges(self) -> list[tuple[int, int, float]]:
        return list(zip(self.a.tolist(), self.b.tolist(), self.weight.tolist()))


def _lex_less(lo1, hi1, lo2, hi2):
    return (lo1 < lo2) | ((lo1 == lo2) & (hi1 < hi2))


def prim_mst(weights: np.ndarray) -> MSTree:
    """Exact MST of a dense symmetric weight matrix.

    Edges are ordered by ``(weight, min endpoint, max endpoint)``; under that
    strict total order the tree is unique, so ties never depend on the
    traversal. The result is sorted by the same key.
    """
    n = weights.shape[0]
    if n < 2:
        return MSTree(n, np.zeros(0, int), np.zeros(0, int), np.zeros(0))
    idx = np.arange(n)
    in_tree = np.zeros(n, dtype=bool)
    in_tree[0] = True
    best_w = weights[0].astype(np.float64).copy()
    best_src = np.zeros(n, dtype=np.int64)
    best_w[0] = np.inf

    a_out, b_out, w_out = [], [], []
    for _ in range(n - 1):
        masked = np.where(in_tree, np.inf, best_w)
        w_min = masked.min()
        ties = np.flatnonzero(masked == w_min)
        if ties.size > 1:
            lo = np.minimum(best_src[ties], ties)
            hi = np.maximum(best_src[ties], ties)
            v = int(ties[np.lexsort((hi, lo))[0]])
        else:
            v = int(ties[0])
        u = int(best_src[v])
        a_out.append(min(u, v))
        b_out.append(max(u, v))
        w_out.append(float(best_w[v]))
        in_tree[v] = True

        row = weights[v]
        lo_new, hi_new = np.minimum(idx, v), np.maximum(idx, v)
        lo_old, hi_old = np.minimum(idx, best_src), np.maximum(idx, best_src)
        better = (row < best_w) | ((row == best_w) & _lex_less(lo_new, hi_new, lo_old, hi_old))
        better &= ~in_tree
        best_w = np.where(better, row, best_w)
        best_src = np.where(better, v, best_src)

    a, b, w = np.array(a_out), np.array(b_out), np.array(w_out)
    order = np.lexsort((b, a, w))
    return MSTree(n, a[order], b[order], w[order])


def build_mst(points, m_pts: int = 1) -> MSTree:
    mr = points if isinstance(points, MutualReachability) else mutual_reachability(points, m_pts)
    if mr.n < 2:
        raise ValueError("an MST needs at least two points")
    return prim_mst(mr.matrix)


# --- condensed tree ------------------------------------------------------

def _lambda(distance: np.ndarray, cap: float) -> np.ndarray:
    with np.errstate(divide="ignore"):
        lam = np.where(distance > 0, 1.0 / np.where(distance > 0, distance, 1.0), cap)
    return np.where(np.isinf(distance), 0.0, lam)


@dataclass(frozen=True, eq=False)
class CondensedHierarchy:
    """Condensed cluster tree.

    ``rows`` are ``(parent, child, distance, size)``: a cluster child is born
    at ``distance``; a point child leaves its parent at ``distance``.
    """

    n_points: int
    min_cluster_size: int
    parent: np.ndarray  # rows
    child: np.ndarray
    distance: np.ndarray
    size: np.ndarray

    @property
    def root(self) -> int:
        return self.n_points

    @cached_property
    def n_clusters(self) -> int:
        return 1 + int(np.sum(self.child >= self.n_points))

    @cached_property
    def cluster_parent(self) -> np.ndarray:
        """Parent id per cluster node (index ``node - n``); root maps to -1."""
        out = np.full(self.n_clusters, -1, dtype=np.int64)
        mask = self.child >= self.n_points
        out[self.child[mask] - self.n_points] = self.parent[mask]
        return out

    @cached_property
    def birth(self) -> np.ndarray:
        out = np.full(self.n_clusters, np.inf)
        mask = self.child >= self.n_points
        out[self.child[mask] - self.n_points] = self.distance[mask]
        return out

    @cached_property
    def death(self) -> np.ndarray:
        out = np.full(self.n_clusters, np.inf)
        np.minimum.at(out, self.parent - self.n_points, self.distance)
        return out

    @cached_property
    def cluster_size(self) -> np.ndarray:
        out = np.zeros(self.n_clusters, dtype=np.int64)
        out[0] = self.n_points
        mask = self.child >= self.n_points
        out[self.child[mask] - self.n_points] = self.size[mask]
        return out

    @cached_property
    def children(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in range(self.n_clusters)]
        for p, c in zip(self.parent.tolist(), self.child.tolist()):
            if c >= self.n_points:
                out[p - self.n_points].append(c)
        return out

    @cached_property
    def point_parent(self) -> np.ndarray:
        out = np.full(self.n_points, self.root, dtype=np.int64)
        mask = self.child < self.n_points
        out[self.child[mask]] = self.parent[mask]
        return out

    @cached_property
    def point_distance(self) -> np.ndarray:
        out = np.full(self.n_points, np.inf)
        mask = self.child < self.n_points
        out[self.child[mask]] = self.distance[mask]
        return out

    @cached_property
    def lambda_cap(self) -> float:
        positive = self.distance[self.distance > 0]
        return 2.0 / positive.min() if positive.size else 1.0

    @cached_property
    def stability(self) -> np.ndarray:
        lam_row = _lambda(self.distance, self.lambda_cap)
        lam_birth = _lambda(self.birth, self.lambda_cap)
        out = np.zeros(self.n_clusters)
        idx = self.parent - self.n_points
        np.add.at(out, idx, (lam_row - lam_birth[idx]) * self.size)
        return out

    @cached_property
    def eom_selection(self) -> tuple[int, ...]:
        """Excess-of-mass choice: the stability-maximizing antichain.

        The root is only chosen when it has no child clusters at all; its
        stability is measured from distance infinity and would otherwise
        swamp every real split. On a tie the parent wins.
        """
        k = self.n_clusters
        if not self.children[0]:
            return (self.root,)
        best = self.stability.copy()
        chosen = np.ones(k, dtype=bool)
        chosen[0] = False
        for i in range(k - 1, 0, -1):
            kids = [c - self.n_points for c in self.children[i]]
            if not kids:
                continue
            subtree = sum(best[c] for c in kids)
            if subtree > best[i]:
                chosen[i] = False
                best[i] = subtree
            else:
                stack = list(kids)
                while stack:
                    c = stack.pop()
                    chosen[c] = False
                    stack.extend(x - self.n_points for x in self.children[c])
        return tuple(int(i + self.n_points) for i in np.flatnonzero(chosen))

    @cached_property
    def critical_distances(self) -> np.ndarray:
        """Sorted distinct finite distances at which extraction can change."""
        return np.unique(self.distance[np.isfinite(self.distance)])

    def is_ancestor(self, a: int, b: int) -> bool:
        """True when cluster ``a`` is a strict ancestor of cluster ``b``."""
        up = self.cluster_parent
        x = int(up[b - self.n_points])
        while x >= 0:
            if x == a:
                return True
            x = int(up[x - self.n_points])
        return False

    def node_records(self) -> list[dict]:
        records = []
        for i in range(self.n_clusters):
            parent = int(self.cluster_parent[i])
            records.append(
                {
                    "node": i + self.n_points,
                    "parent": parent if parent >= 0 else None,
                    "birth": None if np.isinf(self.birth[i]) else float(self.birth[i]),
                    "death": float(self.death[i]),
                    "size": int(self.cluster_size[i]),
                }
            )
        return records

    def dump(self, path: str | Path) -> None:
        """Write one JSON line per cluster node."""
        with open(path, "w", encoding="utf-8") as fh:
            for record in self.node_records():
                fh.write(json.dumps(record) + "\n")


def single_linkage(mst: MSTree) -> np.ndarray:
    """Merge table ``(left, right, distance, size)`` from ascending MST edges.

    Merged nodes are numbered ``n, n+1, ...`` in merge order.
    """
    n = mst.n
    parent = list(range(2 * n - 1))
    size = [1] * n + [0] * (n - 1)

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    merges = np.zeros((n - 1, 4))
    for k, (a, b, w) in enumerate(mst.edges()):
        ra, rb = find(a), find(b)
        new = n + k
        parent[ra] = parent[rb] = new
        size[new] = size[ra] + size[rb]
        merges[k] = (ra, rb, w, size[new])
    return merges


def condense(mst: MSTree, min_cluster_size: int = 2) -> CondensedHierarchy:
    """Condensed tree of the single-linkage dendrogram built from ``mst``.

    Walking top-down, a split in which both sides keep at least
    ``min_cluster_size`` points creates two new clusters; otherwise the
    small side's points drop out of the current cluster at the split
    distance and the large side carries on under the same label.
    """
    if min_cluster_size < 2:
        raise ValueError("min_cluster_size must be at least 2")
    n = mst.n
    if n < 2:
        raise ValueError("condensing needs at least two points")
    merges = single_linkage(mst)
    top = 2 * n - 2

    def node_size(node: int) -> int:
        return 1 if node < n else int(merges[node - n, 3])

    def leaves(node: int) -> list[int]:
        out, stack = [], [node]
        while stack:
            x = stack.pop()
            if x < n:
                out.append(x)
            else:
                stack.append(int(merges[x - n, 0]))
                stack.append(int(merges[x - n, 1]))
        return sorted(out)

    rows: list[tuple[int, int, float, int]] = []
    label = {top: n}
    next_label = n + 1
    queue = [top]
    head = 0
    while head < len(queue):
        node = queue[head]
        head += 1
        left, right, dist = int(merges[node - n, 0]), int(merges[node - n, 1]), float(merges[node - n, 2])
        current = label[node]
        sides = []
        for side in (left, right):
            sides.append((side, node_size(side)))
        big = [s for s, size in sides if size >= min_cluster_size]
        if len(big) == 2:
            for side, size in sides:
                label[side] = next_label
                rows.append((current, next_label, dist, size))
                next_label += 1
                queue.append(side)
        else:
            for side, size in sides:
                if size >= min_cluster_size:
                    label[side] = current
                    if side >= n:
                        queue.append(side)
                else:
                    for p in leaves(side):
                        rows.append((current, p, dist, 1))

    arr = np.array(rows, dtype=object)
    return CondensedHierarchy(
        n_points=n,
        min_cluster_size=min_cluster_size,
        parent=arr[:, 0].astype(np.int64),
        child=arr[:, 1].astype(np.int64),
        distance=arr[:, 2].astype(np.float64),
        size=arr[:, 3].astype(np.int64),
    )


# --- flat extraction -----------------------------------------------------

@dataclass(frozen=True, eq=False)
class Clustering:
    labels: np.ndarray
    epsilon: float = 0.0
    mode: str = "hybrid"

    def __post_init__(self) -> None:
        labels = np.asarray(self.labels, dtype=np.int64).copy()
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)

    @property
    def n_clusters(self) -> int:
        return int(self.labels.max() + 1) if self.labels.size and self.labels.max() >= 0 else 0

    @property
    def n_noise(self) -> int:
        return int(np.sum(self.labels == NOISE))

    @property
    def key(self) -> bytes:
        return canonical_labels(self.labels).tobytes()

    def same_partition(self, other: Clustering) -> bool:
        return self.key == other.key


def canonical_labels(labels: Sequence[int]) -> np.ndarray:
    """Relabel clusters 0..k-1 in order of first appearance; noise stays."""
    labels = np.asarray(labels, dtype=np.int64)
    out = np.full(labels.shape, NOISE, dtype=np.int64)
    mapping: dict[int, int] = {}
    for i, lab in enumerate(labels.tolist()):
        if lab == NOISE:
            continue
        if lab not in mapping:
            mapping[lab] = len(mapping)
        out[i] = mapping[lab]
    return out


def extract_hybrid(hierarchy: CondensedHierarchy, epsilon: float) -> Clustering:
    """Flat clustering at threshold ``epsilon``.

    Starts from the excess-of-mass selection. A selected cluster born below
    ``epsilon`` is replaced by its nearest ancestor born at or above it,
    which undoes every split below ``epsilon``. Clusters reached that way,
    and the root, keep only the points still attached at level ``epsilon``
    (departure distance below it), exactly as DBSCAN* would at that level;
    the root additionally always keeps the points present at its last level.
    Clusters selected without replacement keep their whole subtree.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    h = hierarchy
    n, root = h.n_points, h.root

    images: dict[int, bool] = {}
    for s in h.eom_selection:
        x, moved = s, False
        while x != root and h.birth[x - n] < epsilon:
            x = int(h.cluster_parent[x - n])
            moved = True
        images[x] = images.get(x, False) or moved or x == root

    def covered(x: int) -> bool:
        up = int(h.cluster_parent[x - n])
        while up >= 0:
            if up in images:
                return True
            up = int(h.cluster_parent[up - n])
        return False

    final = {x: t for x, t in images.items() if not covered(x)}

    owner = np.full(h.n_clusters, -1, dtype=np.int64)
    parents = h.cluster_parent
    for i in range(h.n_clusters):
        node = i + n
        if node in final:
            owner[i] = node
        elif i > 0:
            owner[i] = owner[parents[i] - n]

    pp = h.point_parent
    labels = owner[pp - n]
    for node, treated in final.items():
        if not treated:
            continue
        direct = pp == node
        d = h.point_distance
        detached = direct & ~((d < epsilon) | (d <= h.death[node - n]))
        labels = np.where(detached, NOISE, labels)
    mode = "eom" if epsilon == 0 else "hybrid"
    return Clustering(canonical_labels(labels), float(epsilon), mode)


class ExtractionSweep:
    """Extraction over every epsilon, one representative per stable stretch.

    Extraction only changes when ``epsilon`` passes a critical distance of
    the hierarchy, so the epsilon axis splits into stretches
    ``[0, c1], (c1, c2], ..., (cK, inf)``. Each is extracted lazily once.
    """

    def __init__(self, hierarchy: CondensedHierarchy, d_min: float, d_max: float):
        self.hierarchy = hierarchy
        self.crit = hierarchy.critical_distances.tolist()
        self.d_min = d_min
        self.d_max = d_max
        self._cache: dict[int, Clustering] = {}

    @property
    def n_states(self) -> int:
        return len(self.crit) + 1

    def state_of(self, epsilon: float) -> int:
        return bisect.bisect_left(self.crit, epsilon)

    def bounds(self, state: int) -> tuple[float, float]:
        lo = 0.0 if state == 0 else self.crit[state - 1]
        hi = self.crit[state] if state < len(self.crit) else np.inf
        return lo, hi

    def representative(self, state: int) -> float:
        lo, hi = self.bounds(state)
        if state == 0:
            return 0.0
        if np.isinf(hi):
            return lo + max(1.0, lo)
        return (lo + hi) / 2.0

    def at_state(self, state: int) -> Clustering:
        if state not in self._cache:
            self._cache[state] = extract_hybrid(self.hierarchy, self.representative(state))
        return self._cache[state]

    def extract(self, epsilon: float) -> Clustering:
        base = self.at_state(self.state_of(epsilon))
        return Clustering(base.labels, float(epsilon), "eom" if epsilon == 0 else "hybrid")

    def all_states(self) -> list[Clustering]:
        return [self.at_state(s) for s in range(self.n_states)]

    def stable_interval(self, epsilon: float) -> tuple[float, float]:
        state = self.state_of(epsilon)
        key = self.at_state(state).key
        lo = state
        while lo > 0 and self.at_state(lo - 1).key == key:
            lo -= 1
        hi = state
        while hi < self.n_states - 1 and self.at_state(hi + 1).key == key:
            hi += 1
        return self.bounds(lo)[0], self.bounds(hi)[1]

    def persistence(self, epsilon: float) -> float:
        """Width of the epsilon range yielding the same partition, as a
        fraction of the data's positive distance span, clamped to [0, 1]."""
        if self.d_max <= self.d_min:
            return 1.0
        lo, hi = self.stable_interval(epsilon)
        width = min(hi, self.d_max) - max(lo, self.d_min)
        return float(min(1.0, max(0.0, width / (self.d_max - self.d_min))))


def clustering_persistence(sweep: ExtractionSweep, clustering: Clustering) -> float:
    return sweep.persistence(clustering.epsilon)


def build_hierarchy(points, m_pts: int = 1, min_cluster_size: int = 2, distances: np.ndarray | None = None):
    """MST and condensed tree in one call; returns ``(mr, mst, hierarchy)``."""
    mr = mutual_reachability(points, m_pts, distances=distances)
    mst = prim_mst(mr.matrix)
    return mr, mst, condense(mst, min_cluster_size)
