"""Domain types and elementary vector operations.

Embedding matrices are stored column-major in the mathematical sense: an
``EmbeddingMatrix`` of shape ``(d, N)`` holds one d-dimensional embedding per
column, and every batch matrix elsewhere in the package follows the same
features-by-samples layout.
"""

from __future__ import annotations

from collections.abc import Callable, Iterable, Iterator, Sequence
from dataclasses import dataclass, field
from typing import Hashable

import numpy as np
from scipy.spatial.distance import cdist, pdist, squareform

DEFAULT_EPS = 1e-12
DEFAULT_FPS = 24


class FaceAdaptError(Exception):
    """Base class for all package errors."""


class ValidationError(FaceAdaptError, ValueError):
    """Input violates a documented precondition."""


@dataclass(frozen=True)
class EmbeddingMatrix:
    """Per-frame embeddings of one video, one column per frame."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ValidationError(f"embedding matrix must be 2-D and non-empty, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValidationError("embedding matrix contains non-finite values")
        data = data.copy()
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def dim(self) -> int:
        return self.data.shape[0]

    @property
    def count(self) -> int:
        return self.data.shape[1]

    def columns(self, start: int, stop: int) -> np.ndarray:
        return self.data[:, start:stop]


@dataclass(frozen=True)
class FaceTrack:
    """Frame span of one face track.

    ``col_start``/``col_end`` are a half-open range of columns in the
    video's EmbeddingMatrix; ``frame_end`` is inclusive.
    """

    track_id: Hashable
    video_id: Hashable
    frame_start: int
    frame_end: int
    col_start: int
    col_end: int
    label: Hashable | None = None

    def __post_init__(self):
        if self.frame_start < 0:
            raise ValidationError(f"track {self.track_id!r}: negative frame_start")
        if self.frame_end < self.frame_start:
            raise ValidationError(f"track {self.track_id!r}: frame_end < frame_start")
        if self.col_start < 0 or self.col_end - self.col_start != self.length:
            raise ValidationError(
                f"track {self.track_id!r}: column range [{self.col_start}, {self.col_end}) "
                f"does not match {self.length} frames"
            )

    @property
    def length(self) -> int:
        return self.frame_end - self.frame_start + 1

    @property
    def embedding_columns(self) -> range:
        return range(self.col_start, self.col_end)

    def to_dict(self) -> dict:
        out = {
            "track_id": self.track_id,
            "video_id": self.video_id,
            "frame_start": self.frame_start,
            "frame_end": self.frame_end,
            "col_start": self.col_start,
            "col_end": self.col_end,
        }
        if self.label is not None:
            out["label"] = self.label
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> FaceTrack:
        return cls(
            track_id=obj["track_id"],
            video_id=obj["video_id"],
            frame_start=int(obj["frame_start"]),
            frame_end=int(obj["frame_end"]),
            col_start=int(obj["col_start"]),
            col_end=int(obj["col_end"]),
            label=obj.get("label"),
        )


@dataclass(frozen=True)
class TrackSet:
    tracks: tuple[FaceTrack, ...]
    _by_id: dict = field(init=False, repr=False, compare=False)
    _by_video: dict = field(init=False, repr=False, compare=False)

    def __init__(self, tracks: Iterable[FaceTrack]):
        tracks = tuple(tracks)
        by_id: dict = {}
        by_video: dict = {}
        for t in tracks:
            if t.track_id in by_id:
                raise ValidationError(f"duplicate track_id {t.track_id!r}")
            by_id[t.track_id] = t
            by_video.setdefault(t.video_id, []).append(t)
        object.__setattr__(self, "tracks", tracks)
        object.__setattr__(self, "_by_id", by_id)
        object.__setattr__(self, "_by_video", {k: tuple(v) for k, v in by_video.items()})

    def __len__(self) -> int:
        return len(self.tracks)

    def __iter__(self) -> Iterator[FaceTrack]:
        return iter(self.tracks)

    def __getitem__(self, track_id) -> FaceTrack:
        return self._by_id[track_id]

    def __contains__(self, track_id) -> bool:
        return track_id in self._by_id

    @property
    def video_ids(self) -> list:
        return list(self._by_video)

    def by_video(self, video_id) -> tuple[FaceTrack, ...]:
        return self._by_video.get(video_id, ())

    def subset(self, keep: Callable[[FaceTrack], bool]) -> TrackSet:
        return TrackSet(t for t in self.tracks if keep(t))

    def validate_against(self, embeddings: dict) -> None:
        """Check column ranges are in bounds and disjoint within each video."""
        for vid, members in self._by_video.items():
            if vid not in embeddings:
                raise ValidationError(f"no embeddings for video {vid!r}")
            n = embeddings[vid].count
            spans = sorted((t.col_start, t.col_end, t.track_id) for t in members)
            prev_end = 0
            for start, end, tid in spans:
                if end > n:
                    raise ValidationError(f"track {tid!r}: columns exceed matrix width {n}")
                if start < prev_end:
                    raise ValidationError(f"track {tid!r}: columns overlap another track")
                prev_end = end


@dataclass(frozen=True)
class TrackEmbedding:
    track_id: Hashable
    vector: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        if not np.all(np.isfinite(v)):
            raise ValidationError(f"track {self.track_id!r}: non-finite embedding")
        if self.normalized and abs(np.linalg.norm(v) - 1.0) > 1e-9:
            raise ValidationError(f"track {self.track_id!r}: flagged normalized but norm != 1")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "vector", v)

    def unit(self) -> TrackEmbedding:
        if self.normalized:
            return self
        return TrackEmbedding(self.track_id, l2_normalize(self.vector), normalized=True)


def track_mean(track: FaceTrack, emb: EmbeddingMatrix) -> TrackEmbedding:
    if track.col_end <= track.col_start:
        raise ValidationError(f"track {track.track_id!r}: empty column range")
    if track.col_end > emb.count:
        raise ValidationError(f"track {track.track_id!r}: columns exceed matrix width {emb.count}")
    cols = emb.columns(track.col_start, track.col_end).astype(np.float64)
    return TrackEmbedding(track.track_id, cols.mean(axis=1))


def l2_normalize(v, eps: float = DEFAULT_EPS) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if not n > eps:
        raise ValidationError(f"cannot normalize vector with norm {n:.3g} <= {eps:g}")
    return v / n


def normalize_columns(X, eps: float = DEFAULT_EPS) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    norms = np.linalg.norm(X, axis=0)
    if np.any(~(norms > eps)):
        bad = int(np.argmin(norms))
        raise ValidationError(f"column {bad} has norm {norms[bad]:.3g} <= {eps:g}")
    return X / norms


def _check_pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValidationError(f"dimension mismatch: {x.shape} vs {y.shape}")
    return x, y


def norm_euclidean_distance(x, y) -> float:
    """Euclidean distance between the unit-normalized inputs, in [0, 2]."""
    x, y = _check_pair(x, y)
    return float(np.linalg.norm(l2_normalize(x) - l2_normalize(y)))


def euclidean_distance(x, y) -> float:
    x, y = _check_pair(x, y)
    return float(np.linalg.norm(x - y))


def cosine_distance(x, y) -> float:
    x, y = _check_pair(x, y)
    return float(max(0.0, 1.0 - l2_normalize(x) @ l2_normalize(y)))


METRICS: dict[str, Callable[[np.ndarray, np.ndarray], float]] = {
    "norm_euclidean": norm_euclidean_distance,
    "euclidean": euclidean_distance,
    "cosine": cosine_distance,
}


def get_metric(name: str) -> Callable[[np.ndarray, np.ndarray], float]:
    try:
        return METRICS[name]
    except KeyError:
        raise ValidationError(f"unknown metric {name!r}; choose from {sorted(METRICS)}") from None


def metric_space(X, metric: str) -> np.ndarray:
    """Map columns of X into the space where ``metric`` is plain Euclidean.

    Cosine distance is monotone in the Euclidean distance of unit vectors, so
    nearest-neighbour orderings for it are computed in the normalized space.
    """
    X = np.asarray(X, dtype=np.float64)
    get_metric(metric)
    if metric == "euclidean":
        return X
    return normalize_columns(X)


def pairwise(X, metric: str = "norm_euclidean") -> np.ndarray:
    """All-pairs distances between the columns of X."""
    Z = metric_space(X, metric)
    D = squareform(pdist(Z.T, "euclidean"))
    if metric == "cosine":
        D = D * D / 2.0
    return D


def cross_distances(X, Y, metric: str = "norm_euclidean") -> np.ndarray:
    """Distances between every column of X and every column of Y."""
    Zx = metric_space(X, metric)
    Zy = metric_space(Y, metric)
    D = cdist(Zx.T, Zy.T, "euclidean")
    if metric == "cosine":
        D = D * D / 2.0
    return D


def stack_columns(vectors: Sequence[np.ndarray]) -> np.ndarray:
    return np.column_stack([np.asarray(v, dtype=np.float64) for v in vectors])
