"""Hard-positive tracklets and hard-negative tracks by nearest-neighbour search."""

from __future__ import annotations

import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Hashable

import numpy as np
from scipy.spatial import cKDTree

from faceadapt.core import (
    EmbeddingMatrix,
    FaceTrack,
    TrackSet,
    ValidationError,
    cross_distances,
    l2_normalize,
    metric_space,
    pairwise,
    track_mean,
)
from faceadapt.harvest import ConstraintGraph

log = logging.getLogger(__name__)

KDTREE_MAX_DIM = 32


class MiningError(ValidationError):
    pass


@dataclass(frozen=True)
class Tracklet:
    source_track_id: Hashable
    member_columns: tuple[int, ...]
    mean_vector: np.ndarray
    role: str  # "anchor" or "positive<i>"

    @property
    def k(self) -> int:
        return len(self.member_columns)


@dataclass(frozen=True)
class MultiviewSample:
    """One mined training example: P views of a track plus its hard negative."""

    track_id: Hashable
    anchor: np.ndarray
    positives: tuple[np.ndarray, ...]
    hard_negative: np.ndarray
    negative_source_track_id: Hashable

    @property
    def dim(self) -> int:
        return self.anchor.shape[0]

    @property
    def views(self) -> tuple[np.ndarray, ...]:
        return (self.anchor, *self.positives)


def _as_array(H) -> np.ndarray:
    if isinstance(H, EmbeddingMatrix):
        return H.data
    return np.asarray(H)


def pairwise_distances(H, metric: str = "norm_euclidean") -> np.ndarray:
    X = _as_array(H)
    if X.ndim != 2 or X.shape[1] < 2:
        raise MiningError("pairwise distances need at least 2 columns")
    return pairwise(X, metric)


def farthest_pair(D: np.ndarray) -> tuple[int, int]:
    """Lexicographically smallest (i, j), i != j, attaining max D."""
    D = np.asarray(D, dtype=np.float64)
    n = D.shape[0]
    if D.ndim != 2 or n < 2 or D.shape[1] != n:
        raise MiningError("farthest_pair needs a square matrix with N >= 2")
    masked = D.copy()
    np.fill_diagonal(masked, -np.inf)
    flat = int(np.argmax(masked))
    return divmod(flat, n)


def _nearest(Z: np.ndarray, query: int, k: int, candidates: np.ndarray, method: str = "auto") -> np.ndarray:
    """k candidate columns of Z closest to column ``query``; ties by index.

    ``candidates`` must be sorted ascending.
    """
    if k > candidates.size:
        raise MiningError(f"need {k} neighbours but only {candidates.size} columns remain")
    if k < 1:
        raise MiningError("k must be >= 1")
    z = Z[:, query]
    if method == "auto":
        method = "kdtree" if Z.shape[0] <= KDTREE_MAX_DIM and candidates.size > 64 else "scan"
    if method == "kdtree":
        pts = Z[:, candidates].T
        tree = cKDTree(pts)
        dd, _ = tree.query(z, k=k)
        kth = float(np.atleast_1d(dd)[-1])
        # widen the radius so boundary ties are all collected, then rank exactly
        pool = np.asarray(sorted(tree.query_ball_point(z, kth * (1 + 1e-9) + 1e-12)), dtype=np.int64)
        pool_idx = candidates[pool]
    elif method == "scan":
        pool_idx = candidates
    else:
        raise ValidationError(f"unknown knn method {method!r}")
    if query not in pool_idx:
        pool_idx = np.append(pool_idx, query)
    dist = np.linalg.norm(Z[:, pool_idx] - z[:, None], axis=0)
    # the query always leads its own neighbour list, even against exact duplicates
    dist[pool_idx == query] = -1.0
    order = np.lexsort((pool_idx, dist))[:k]
    return pool_idx[order]


def knn_indices(H, query_index: int, k: int, exclude=(), metric: str = "norm_euclidean",
                method: str = "auto") -> np.ndarray:
    """Indices of the k columns nearest ``query_index`` (itself included)."""
    X = _as_array(H)
    n = X.shape[1]
    excluded = set(int(e) for e in exclude)
    if query_index in excluded:
        raise MiningError("query column is excluded")
    if not 0 <= query_index < n:
        raise MiningError(f"query index {query_index} out of range")
    candidates = np.array([i for i in range(n) if i not in excluded], dtype=np.int64)
    Z = metric_space(X, metric)
    return _nearest(Z, query_index, k, candidates, method)


def mine_hard_positives(track: FaceTrack, emb: EmbeddingMatrix, P: int = 3,
                        metric: str = "norm_euclidean", knn_method: str = "auto") -> list[Tracklet]:
    """Split a track into P equal-size, mutually distant tracklets.

    The seed pair is the farthest pair of frames; each later seed is the
    remaining frame farthest from the anchor seed.  Every tracklet is the
    seed's k nearest remaining frames, k = N // P, and its frames are removed
    before the next seed is picked.  Leftover N mod P frames stay unused.
    """
    N = track.length
    if P < 1:
        raise MiningError("P must be positive")
    if N < P:
        raise MiningError(f"track {track.track_id!r}: {N} frames < P={P}")
    H = emb.columns(track.col_start, track.col_end).astype(np.float64)
    k = N // P
    if N == 1:
        return [Tracklet(track.track_id, (track.col_start,), l2_normalize(H[:, 0]), "anchor")]

    D = pairwise(H, metric)
    a, _ = farthest_pair(D)
    Z = metric_space(H, metric)
    remaining = np.ones(N, dtype=bool)
    out = []
    seed = a
    for i in range(P):
        if i > 0:
            cand = np.flatnonzero(remaining)
            # farthest remaining frame from the anchor seed; argmax keeps the lowest index on ties
            seed = int(cand[np.argmax(D[a, cand])])
        members = _nearest(Z, seed, k, np.flatnonzero(remaining), knn_method)
        remaining[members] = False
        members = np.sort(members)
        vec = l2_normalize(H[:, members].mean(axis=1))
        role = "anchor" if i == 0 else f"positive{i}"
        out.append(Tracklet(track.track_id, tuple(int(track.col_start + m) for m in members), vec, role))
    unused = int(remaining.sum())
    if unused:
        log.debug("track %r: %d frames left out of tracklets", track.track_id, unused)
    return out


def mine_hard_negative(anchor, graph: ConstraintGraph, track_means: dict,
                       metric: str = "norm_euclidean", track_id=None) -> tuple[np.ndarray, Hashable]:
    """Mean of the cannot-link track closest to ``anchor``.

    ``anchor`` is a Tracklet or a bare vector (then ``track_id`` is required).
    Returns ``(vector, source_track_id)``; ties go to the smallest track id.
    """
    if isinstance(anchor, Tracklet):
        vec, tid = anchor.mean_vector, anchor.source_track_id
    else:
        vec, tid = np.asarray(anchor, dtype=np.float64), track_id
    neigh = graph.neighbors.get(tid, ())
    if not neigh:
        raise MiningError(f"track {tid!r}: no cannot-link neighbor")
    cand = np.column_stack([np.asarray(track_means[n], dtype=np.float64) for n in neigh])
    dist = cross_distances(vec[:, None], cand, metric)[0]
    best = int(np.argmin(dist))
    return np.asarray(track_means[neigh[best]], dtype=np.float64), neigh[best]


def _id_key(x):
    return (isinstance(x, str), x)


def mine_corpus(tracks: TrackSet, embeddings: dict, graph: ConstraintGraph, P: int = 3,
                metric: str = "norm_euclidean", anchor_mode: str = "tracklet",
                threads: int = 1, knn_method: str = "auto") -> tuple[list[MultiviewSample], dict]:
    """Mine one MultiviewSample per eligible track.

    ``anchor_mode`` picks the reference for the hard negative: the anchor
    tracklet mean ("tracklet") or the full-track mean ("track").
    Ineligible tracks are skipped and tallied in the returned report.
    """
    if anchor_mode not in ("tracklet", "track"):
        raise ValidationError(f"unknown anchor_mode {anchor_mode!r}")
    tracks.validate_against(embeddings)
    means = {t.track_id: track_mean(t, embeddings[t.video_id]).vector for t in tracks}

    def work(t: FaceTrack):
        if t.length < P:
            return None, "too_short", 0
        if graph.degree(t.track_id) < 1:
            return None, "no_cannot_link", 0
        tls = mine_hard_positives(t, embeddings[t.video_id], P, metric, knn_method)
        ref = tls[0].mean_vector if anchor_mode == "tracklet" else means[t.track_id]
        neg, src = mine_hard_negative(ref, graph, means, metric, track_id=t.track_id)
        sample = MultiviewSample(
            track_id=t.track_id,
            anchor=tls[0].mean_vector,
            positives=tuple(tl.mean_vector for tl in tls[1:]),
            hard_negative=l2_normalize(neg),
            negative_source_track_id=src,
        )
        return sample, None, t.length - P * (t.length // P)

    ordered = sorted(tracks, key=lambda t: _id_key(t.track_id))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(work, ordered))
    else:
        results = [work(t) for t in ordered]

    samples = []
    skipped: Counter = Counter()
    skipped_ids = []
    unused = 0
    for t, (s, why, left) in zip(ordered, results):
        if s is None:
            skipped[why] += 1
            skipped_ids.append(t.track_id)
        else:
            samples.append(s)
            unused += left
    report = {
        "n_tracks": len(tracks),
        "n_samples": len(samples),
        "n_skipped": sum(skipped.values()),
        "skipped": dict(sorted(skipped.items())),
        "skipped_track_ids": skipped_ids,
        "P": P,
        "metric": metric,
        "anchor_mode": anchor_mode,
        "unused_frames": unused,
    }
    return samples, report


def hard_distances(samples, metric: str = "norm_euclidean", transform=None) -> tuple[np.ndarray, np.ndarray]:
    """Anchor-to-first-positive and anchor-to-negative distances per sample.

    ``transform`` maps a d x n matrix of vectors to adapted vectors first.
    """
    A = np.column_stack([s.anchor for s in samples])
    Pp = np.column_stack([s.positives[0] for s in samples])
    Q = np.column_stack([s.hard_negative for s in samples])
    if transform is not None:
        A, Pp, Q = transform(A), transform(Pp), transform(Q)
    za, zp, zq = (metric_space(M, metric) for M in (A, Pp, Q))
    pos = np.linalg.norm(za - zp, axis=0)
    neg = np.linalg.norm(za - zq, axis=0)
    if metric == "cosine":
        pos, neg = pos**2 / 2, neg**2 / 2
    return pos, neg
