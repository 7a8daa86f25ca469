"""Track-level clustering: agglomerative (HAC) and affinity propagation."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from faceadapt.core import ValidationError, pairwise

LINKAGES = ("average", "single", "complete", "ward")


@dataclass(frozen=True)
class ClusteringResult:
    labels: np.ndarray  # cluster id per input point, contiguous from 0
    n_clusters: int
    method: str
    exemplars: tuple[int, ...] | None = None
    converged: bool = True
    track_ids: tuple | None = None

    @property
    def assignments(self) -> dict:
        ids = self.track_ids if self.track_ids is not None else range(len(self.labels))
        return {t: int(c) for t, c in zip(ids, self.labels)}

    def with_ids(self, track_ids: Sequence) -> ClusteringResult:
        if len(track_ids) != len(self.labels):
            raise ValidationError("track id count does not match labels")
        return ClusteringResult(self.labels, self.n_clusters, self.method, self.exemplars,
                                self.converged, tuple(track_ids))


def relabel_first_seen(labels) -> np.ndarray:
    """Map arbitrary labels to 0..K-1 in order of first appearance."""
    _, first, inv = np.unique(np.asarray(labels), return_index=True, return_inverse=True)
    rank = np.empty(first.size, dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(first.size)
    return rank[inv.ravel()]


def _lance_williams(linkage: str, d_ik, d_jk, d_ij, n_i, n_j, n_k):
    if linkage == "single":
        return np.minimum(d_ik, d_jk)
    if linkage == "complete":
        return np.maximum(d_ik, d_jk)
    if linkage == "average":
        return (n_i * d_ik + n_j * d_jk) / (n_i + n_j)
    t = n_i + n_j + n_k
    val = ((n_i + n_k) * d_ik**2 + (n_j + n_k) * d_jk**2 - n_k * d_ij**2) / t
    return np.sqrt(np.maximum(val, 0.0))


def hac_from_distances(D, n_clusters: int, linkage: str = "average") -> ClusteringResult:
    """Agglomerate until ``n_clusters`` remain.

    Always merges the lexicographically smallest (i, j) pair at the minimum
    linkage distance; the merged cluster keeps index i.  ``ward`` expects
    Euclidean input distances.
    """
    if linkage not in LINKAGES:
        raise ValidationError(f"unknown linkage {linkage!r}; choose from {LINKAGES}")
    D = np.array(D, dtype=np.float64)
    n = D.shape[0]
    if n < 1:
        raise ValidationError("nothing to cluster")
    if not 1 <= n_clusters <= n:
        raise ValidationError(f"n_clusters={n_clusters} must lie in [1, {n}]")
    np.fill_diagonal(D, np.inf)
    active = np.ones(n, dtype=bool)
    size = np.ones(n)
    parent = np.arange(n)
    nn_d = np.full(n, np.inf)
    nn_j = np.full(n, -1, dtype=np.int64)

    def refresh(k):
        cols = np.flatnonzero(active[k + 1:]) + k + 1
        if cols.size == 0:
            nn_d[k], nn_j[k] = np.inf, -1
        else:
            m = int(np.argmin(D[k, cols]))
            nn_d[k], nn_j[k] = D[k, cols[m]], cols[m]

    for k in range(n):
        refresh(k)

    for _ in range(n - n_clusters):
        i = int(np.argmin(np.where(active, nn_d, np.inf)))
        j = int(nn_j[i])
        d_ij = D[i, j]
        others = np.flatnonzero(active)
        others = others[(others != i) & (others != j)]
        new = _lance_williams(linkage, D[i, others], D[j, others], d_ij, size[i], size[j], size[others])
        D[i, others] = new
        D[others, i] = new
        active[j] = False
        D[j, :] = np.inf
        D[:, j] = np.inf
        size[i] += size[j]
        parent[parent == j] = i
        refresh(i)
        lo = others[others < i]
        stale = np.isin(nn_j[lo], (i, j))
        rest = lo[~stale]
        better = (D[rest, i] < nn_d[rest]) | ((D[rest, i] == nn_d[rest]) & (i < nn_j[rest]))
        nn_d[rest[better]] = D[rest[better], i]
        nn_j[rest[better]] = i
        mid = others[(others > i) & (others < j)]
        for k in np.concatenate([lo[stale], mid[nn_j[mid] == j]]):
            refresh(int(k))

    labels = relabel_first_seen(parent)
    return ClusteringResult(labels, int(labels.max()) + 1, f"hac-{linkage}")


def hac(embeddings, n_clusters: int, linkage: str = "average", metric: str = "norm_euclidean") -> ClusteringResult:
    """HAC over the columns of a d x N embedding matrix."""
    X = np.asarray(embeddings, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] < 1:
        raise ValidationError("embeddings must be a non-empty d x N matrix")
    if linkage == "ward" and metric == "cosine":
        raise ValidationError("ward linkage needs a Euclidean metric")
    if X.shape[1] == 1:
        if n_clusters != 1:
            raise ValidationError(f"n_clusters={n_clusters} must lie in [1, 1]")
        return ClusteringResult(np.zeros(1, dtype=np.int64), 1, f"hac-{linkage}")
    return hac_from_distances(pairwise(X, metric), n_clusters, linkage)


def similarity_matrix(embeddings, metric: str = "norm_euclidean") -> np.ndarray:
    """Negative squared distances between columns, the usual AP input.

    For the cosine metric the (already squared-scale) cosine distance is used.
    """
    D = pairwise(embeddings, metric)
    return -D if metric == "cosine" else -(D * D)


def affinity_propagation(similarity, preference=None, damping: float = 0.9, max_iter: int = 1000,
                         convergence_iter: int = 50, seed: int = 0) -> ClusteringResult:
    """Frey-Dueck responsibility/availability message passing.

    ``preference`` (scalar or per-point) goes on the diagonal; it defaults
    to the median off-diagonal similarity.  A tiny seeded perturbation breaks
    exact ties between identical points.  An unconverged run is still
    returned with ``converged=False``.
    """
    S = np.array(similarity, dtype=np.float64)
    n = S.shape[0]
    if S.ndim != 2 or S.shape[1] != n or n < 1:
        raise ValidationError("similarity must be a square matrix")
    if not np.allclose(S, S.T, atol=1e-12, rtol=0):
        raise ValidationError("similarity must be symmetric")
    if not 0.5 <= damping < 1.0:
        raise ValidationError("damping must lie in [0.5, 1)")
    if n == 1:
        return ClusteringResult(np.zeros(1, dtype=np.int64), 1, "ap", (0,))
    if preference is None:
        preference = float(np.median(S[~np.eye(n, dtype=bool)]))
    S[np.diag_indices(n)] = preference
    rng = np.random.default_rng(seed)
    tiny = np.finfo(np.float64).tiny * 100
    S = S + (np.finfo(np.float64).eps * S + tiny) * rng.standard_normal((n, n))

    A = np.zeros((n, n))
    R = np.zeros((n, n))
    rows = np.arange(n)
    history = np.zeros((n, convergence_iter), dtype=bool)
    converged = False
    for it in range(max_iter):
        AS = A + S
        I = np.argmax(AS, axis=1)
        Y = AS[rows, I]
        AS[rows, I] = -np.inf
        Y2 = np.max(AS, axis=1)
        Rn = S - Y[:, None]
        Rn[rows, I] = S[rows, I] - Y2
        R = damping * R + (1 - damping) * Rn

        Rp = np.maximum(R, 0)
        Rp[rows, rows] = R[rows, rows]
        An = Rp.sum(axis=0)[None, :] - Rp
        dA = np.diag(An).copy()
        An = np.minimum(An, 0)
        An[rows, rows] = dA
        A = damping * A + (1 - damping) * An

        E = (np.diag(A) + np.diag(R)) > 0
        history[:, it % convergence_iter] = E
        if it >= convergence_iter - 1:
            se = history.sum(axis=1)
            stable = np.all((se == convergence_iter) | (se == 0))
            if stable and E.any():
                converged = True
                break

    exemplars = np.flatnonzero((np.diag(A) + np.diag(R)) > 0)
    if exemplars.size == 0:
        exemplars = np.array([int(np.argmax(np.diag(A) + np.diag(R)))])
        converged = False
    c = np.argmax(S[:, exemplars], axis=1)
    c[exemplars] = np.arange(exemplars.size)
    # refine each exemplar to the member maximizing within-cluster similarity
    for k in range(exemplars.size):
        members = np.flatnonzero(c == k)
        exemplars[k] = members[np.argmax(S[np.ix_(members, members)].sum(axis=0))]
    c = np.argmax(S[:, exemplars], axis=1)
    c[exemplars] = np.arange(exemplars.size)
    labels = relabel_first_seen(c)
    # reorder exemplars to match the relabelled cluster ids
    ex = np.empty(exemplars.size, dtype=np.int64)
    for k in range(exemplars.size):
        ex[labels[exemplars[k]]] = exemplars[k]
    return ClusteringResult(labels, int(labels.max()) + 1, "ap", tuple(int(e) for e in ex), converged)
