"""Patch grouping and the patch-dependence matrix.

Patches are partitioned once by k-means on a guide image. Within a group,
two patches are neighbours when their top-left pixels are at most ``R1``
pixels apart (plain Euclidean distance, no wraparound). The dependence
matrix ``A`` is the row-normalised similarity kernel restricted to that
neighbour graph, stored per group in local indices.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

try:
    from numba import njit
except ImportError:  # pragma: no cover - optional accelerator
    njit = None

log = logging.getLogger(__name__)


@dataclass
class PatchGrouping:
    """Assignment of every patch to one of ``n_groups`` groups (0-based ids)."""

    assignment: np.ndarray
    centroids: np.ndarray
    guide_frame: int = 1
    objective: list[float] = field(default_factory=list)

    @property
    def n_groups(self) -> int:
        return self.centroids.shape[0]

    @property
    def n(self) -> int:
        return self.assignment.size

    def members(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == j)

    def groups(self) -> list[np.ndarray]:
        return [self.members(j) for j in range(self.n_groups)]

    @classmethod
    def single(cls, patches: np.ndarray, guide_frame: int = 1) -> "PatchGrouping":
        n = patches.shape[1]
        return cls(np.zeros(n, dtype=np.int64), patches.mean(axis=1)[None, :], guide_frame)


# --------------------------------------------------------------------------
# k-means
# --------------------------------------------------------------------------

def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeanspp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    closest = _sq_dists(X, centers[0][None, :])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(X[idx])
        closest = np.minimum(closest, _sq_dists(X, X[idx][None, :])[:, 0])
    return np.array(centers)


def wcss(X: np.ndarray, labels: np.ndarray, C: np.ndarray) -> float:
    return float(((X - C[labels]) ** 2).sum())


def _repair_empty(X, labels, C):
    k = C.shape[0]
    counts = np.bincount(labels, minlength=k)
    for empty in np.flatnonzero(counts == 0):
        largest = int(np.argmax(counts))
        pts = np.flatnonzero(labels == largest)
        far = pts[np.argmax(((X[pts] - C[largest]) ** 2).sum(1))]
        labels[far] = empty
        C[empty] = X[far]
        counts[largest] -= 1
        counts[empty] = 1
        C[largest] = X[labels == largest].mean(0)
    return labels, C


def kmeans_group(patches: np.ndarray, n_groups: int, seed: int = 0,
                 max_iters: int = 100, guide_frame: int = 1) -> PatchGrouping:
    """Lloyd's k-means with k-means++ seeding on the patch columns.

    Empty clusters are repaired by moving the point farthest from the
    centroid of the largest cluster into them. ``objective`` holds the
    within-cluster sum of squares after every iteration.
    """
    X = np.ascontiguousarray(np.asarray(patches, dtype=float).T)
    n = X.shape[0]
    if n_groups < 1 or n_groups > n:
        raise ValueError(f"n_groups={n_groups} must lie in [1, {n}]")
    rng = np.random.default_rng(seed)
    C = _kmeanspp(X, n_groups, rng)
    labels = np.argmin(_sq_dists(X, C), axis=1)
    history = []
    for _ in range(max_iters):
        labels, C = _repair_empty(X, labels, C)
        C = np.array([X[labels == j].mean(0) for j in range(n_groups)])
        history.append(wcss(X, labels, C))
        new = np.argmin(_sq_dists(X, C), axis=1)
        # keep the current label on ties so the objective cannot rise
        cur = ((X - C[labels]) ** 2).sum(1)
        best = ((X - C[new]) ** 2).sum(1)
        new = np.where(best < cur, new, labels)
        if np.array_equal(new, labels):
            break
        labels = new
    labels, C = _repair_empty(X, labels, C)
    return PatchGrouping(labels.astype(np.int64), C, guide_frame, history)


# --------------------------------------------------------------------------
# Kernel and dependence
# --------------------------------------------------------------------------

def similarity_kernel(p_i, p_j, loc_i, loc_j, group_i, group_j,
                      sigma: float, radius: float) -> float:
    """Patch similarity: ``exp(-||p_i - p_j|| / sigma)`` for same-group neighbours, else 0."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if group_i != group_j:
        return 0.0
    if math.dist(loc_i, loc_j) > radius:
        return 0.0
    return float(np.exp(-np.linalg.norm(np.asarray(p_i) - np.asarray(p_j)) / sigma))


def patch_locations(side: int) -> np.ndarray:
    """Top-left pixel ``(row, col)`` of every patch, row-major."""
    r, c = np.divmod(np.arange(side * side), side)
    return np.stack([r, c], axis=1)


@dataclass
class NeighborGraph:
    """Same-group spatial neighbourhoods, one CSR pattern per group.

    ``patterns[j]`` is a binary ``|G_j| x |G_j|`` matrix (local indices,
    diagonal included); ``members[j]`` maps local to global patch index.
    """

    members: list[np.ndarray]
    patterns: list[sp.csr_matrix]
    radius: float

    @property
    def nnz(self) -> int:
        return sum(p.nnz for p in self.patterns)

    @classmethod
    def build(cls, grouping: PatchGrouping, side: int, radius: float) -> "NeighborGraph":
        n = side * side
        if grouping.n != n:
            raise ValueError("grouping does not match the image size")
        labels = grouping.assignment
        rows, cols = np.divmod(np.arange(n), side)
        r = int(math.floor(radius))
        src, dst = [], []
        for dy in range(-r, r + 1):
            for dx in range(-r, r + 1):
                if dy * dy + dx * dx > radius * radius:
                    continue
                ok = (rows + dy >= 0) & (rows + dy < side) & (cols + dx >= 0) & (cols + dx < side)
                i = np.flatnonzero(ok)
                j = i + dy * side + dx
                same = labels[i] == labels[j]
                src.append(i[same])
                dst.append(j[same])
        src = np.concatenate(src)
        dst = np.concatenate(dst)
        members = grouping.groups()
        local = np.empty(n, dtype=np.int64)
        for m in members:
            local[m] = np.arange(m.size)
        patterns = []
        g_of_src = labels[src]
        for j, m in enumerate(members):
            sel = g_of_src == j
            pat = sp.csr_matrix((np.ones(int(sel.sum())), (local[src[sel]], local[dst[sel]])),
                                shape=(m.size, m.size))
            pat.sort_indices()
            patterns.append(pat)
        return cls(members, patterns, float(radius))


@dataclass
class DependenceMatrix:
    """Row-stochastic ``A`` per group (local indices) on a neighbour graph."""

    blocks: list[sp.csr_matrix]
    graph: NeighborGraph | None
    sigma: float
    radius: float

    @property
    def is_identity(self) -> bool:
        return self.graph is None

    def dense(self, grouping: PatchGrouping) -> np.ndarray:
        """Full ``n x n`` matrix in global indices (small problems only)."""
        n = grouping.n
        out = np.zeros((n, n))
        for m, blk in zip(grouping.groups(), self.blocks):
            out[np.ix_(m, m)] = blk.toarray()
        return out

    @classmethod
    def identity(cls, grouping: PatchGrouping) -> "DependenceMatrix":
        blocks = [sp.identity(m.size, format="csr") for m in grouping.groups()]
        return cls(blocks, None, math.nan, 0.0)


def _pair_distances_numpy(P, Q, rows, cols, chunk: int = 1 << 17) -> np.ndarray:
    out = np.empty(rows.size)
    for s in range(0, rows.size, chunk):
        diff = P[:, rows[s:s + chunk]] - Q[:, cols[s:s + chunk]]
        out[s:s + chunk] = np.sqrt(np.einsum("ij,ij->j", diff, diff))
    return out


if njit is not None:
    @njit(cache=True)
    def _pair_distances_jit(PT, QT, rows, cols):  # pragma: no cover - compiled
        out = np.empty(rows.size)
        dim = PT.shape[1]
        for e in range(rows.size):
            a, b = rows[e], cols[e]
            acc = 0.0
            for d in range(dim):
                t = PT[a, d] - QT[b, d]
                acc += t * t
            out[e] = math.sqrt(acc)
        return out


def _pair_distances(P: np.ndarray, Q: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Euclidean distances between columns ``P[:, rows[e]]`` and ``Q[:, cols[e]]``."""
    if njit is None:
        return _pair_distances_numpy(P, Q, rows, cols)
    return _pair_distances_jit(np.ascontiguousarray(P.T, dtype=float),
                               np.ascontiguousarray(Q.T, dtype=float),
                               np.asarray(rows, dtype=np.int64), np.asarray(cols, dtype=np.int64))


def median_sigma(patches: np.ndarray, graph: NeighborGraph, max_pairs: int = 20000,
                 seed: int = 0) -> float:
    """Median distance over off-diagonal neighbour pairs (1.0 if degenerate)."""
    rng = np.random.default_rng(seed)
    dists = []
    budget = max(max_pairs // max(len(graph.patterns), 1), 1)
    for m, pat in zip(graph.members, graph.patterns):
        coo = pat.tocoo()
        off = coo.row != coo.col
        r, c = coo.row[off], coo.col[off]
        if r.size == 0:
            continue
        if r.size > budget:
            pick = rng.choice(r.size, budget, replace=False)
            r, c = r[pick], c[pick]
        dists.append(_pair_distances(patches, patches, m[r], m[c]))
    if not dists:
        return 1.0
    sigma = float(np.median(np.concatenate(dists)))
    return sigma if sigma > 0 else 1.0


def build_dependence(patches_t: np.ndarray, patches_ref: np.ndarray, graph: NeighborGraph,
                     sigma: float) -> DependenceMatrix:
    """``A_il = K(p_i^t, p_l^ref) / sum_l' K(p_i^t, p_l'^ref)`` on the neighbour graph.

    Rows whose kernel sum vanishes fall back to weight 1 on the patch itself.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    blocks = []
    for m, pat in zip(graph.members, graph.patterns):
        nrow = m.size
        row_of = np.repeat(np.arange(nrow), np.diff(pat.indptr))
        d = _pair_distances(patches_t, patches_ref, m[row_of], m[pat.indices])
        k = np.exp(-d / sigma)
        sums = np.bincount(row_of, weights=k, minlength=nrow)
        dead = sums <= 0
        if dead.any():
            k[dead[row_of]] = 0.0
            k[dead[row_of] & (pat.indices == row_of)] = 1.0
            sums[dead] = 1.0
        k /= sums[row_of]
        blocks.append(sp.csr_matrix((k, pat.indices.copy(), pat.indptr.copy()), shape=(nrow, nrow)))
    return DependenceMatrix(blocks, graph, float(sigma), graph.radius)


# --------------------------------------------------------------------------
# Sidecar
# --------------------------------------------------------------------------

def save_grouping(path: str | Path, grouping: PatchGrouping,
                  dependence: DependenceMatrix | None = None) -> None:
    """Binary ``.npz`` sidecar with the grouping and, optionally, ``A``."""
    arrays = {
        "assignment": grouping.assignment,
        "centroids": grouping.centroids,
        "guide_frame": np.array(grouping.guide_frame),
        "objective": np.array(grouping.objective, dtype=float),
    }
    if dependence is not None:
        arrays["sigma"] = np.array(dependence.sigma)
        arrays["radius"] = np.array(dependence.radius)
        arrays["identity"] = np.array(dependence.is_identity)
        for j, blk in enumerate(dependence.blocks):
            arrays[f"A{j}_data"] = blk.data
            arrays[f"A{j}_indices"] = blk.indices
            arrays[f"A{j}_indptr"] = blk.indptr
    np.savez(path, **arrays)


def load_grouping(path: str | Path) -> tuple[PatchGrouping, DependenceMatrix | None]:
    with np.load(path) as z:
        grouping = PatchGrouping(z["assignment"], z["centroids"], int(z["guide_frame"]),
                                 list(z["objective"]))
        if "sigma" not in z:
            return grouping, None
        blocks = []
        for j, m in enumerate(grouping.groups()):
            blocks.append(sp.csr_matrix((z[f"A{j}_data"], z[f"A{j}_indices"], z[f"A{j}_indptr"]),
                                        shape=(m.size, m.size)))
        identity = bool(z["identity"])
        graph = None
        if not identity:
            patterns = [sp.csr_matrix((np.ones_like(b.data), b.indices, b.indptr), shape=b.shape)
                        for b in blocks]
            graph = NeighborGraph(grouping.groups(), patterns, float(z["radius"]))
        return grouping, DependenceMatrix(blocks, graph, float(z["sigma"]), float(z["radius"]))
