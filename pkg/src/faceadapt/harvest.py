"""Cannot-link constraints from temporal co-occurrence of face tracks."""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Hashable

import numpy as np

from faceadapt.core import DEFAULT_FPS, TrackSet, ValidationError


@dataclass(frozen=True)
class ConstraintGraph:
    """Cannot-link pairs between temporally overlapping tracks of one video."""

    nodes: tuple
    cannot_link: frozenset  # of frozenset({a, b})
    neighbors: dict  # track_id -> tuple of neighbor ids, sorted

    def degree(self, track_id: Hashable) -> int:
        return len(self.neighbors.get(track_id, ()))

    @property
    def degrees(self) -> dict:
        return {n: len(self.neighbors[n]) for n in self.nodes}

    def edge_list(self) -> list[tuple]:
        return sorted(tuple(sorted(e)) for e in self.cannot_link)

    @classmethod
    def from_edges(cls, nodes, edges) -> ConstraintGraph:
        nodes = tuple(nodes)
        adj: dict = {n: set() for n in nodes}
        pairs = set()
        for a, b in edges:
            if a == b:
                raise ValidationError(f"self cannot-link on {a!r}")
            adj[a].add(b)
            adj[b].add(a)
            pairs.add(frozenset((a, b)))
        return cls(nodes, frozenset(pairs), {n: tuple(sorted(adj[n])) for n in nodes})


def min_frames_for(seconds: float = 1.0, fps: int = DEFAULT_FPS) -> int:
    return max(1, int(round(seconds * fps)))


def filter_min_length(tracks: TrackSet, min_frames: int = 24) -> TrackSet:
    if min_frames < 1:
        raise ValidationError("min_frames must be positive")
    return tracks.subset(lambda t: t.length >= min_frames)


def build_constraints(tracks: TrackSet, min_overlap: int = 1) -> ConstraintGraph:
    """Link every pair of same-video tracks sharing at least ``min_overlap`` frames.

    Per-video sweep over tracks sorted by start frame; a min-heap of end
    frames keeps only tracks that can still overlap the current one.
    """
    if min_overlap < 1:
        raise ValidationError("min_overlap must be >= 1")
    edges = []
    for vid in tracks.video_ids:
        members = sorted(tracks.by_video(vid), key=lambda t: (t.frame_start, t.frame_end))
        active: list = []  # heap of (frame_end, seq, track)
        for seq, t in enumerate(members):
            while active and active[0][0] < t.frame_start:
                heapq.heappop(active)
            for end, _, other in active:
                shared = min(end, t.frame_end) - t.frame_start + 1
                if shared >= min_overlap:
                    edges.append((other.track_id, t.track_id))
            heapq.heappush(active, (t.frame_end, seq, t))
    return ConstraintGraph.from_edges([t.track_id for t in tracks], edges)


def filter_cooccurring(tracks: TrackSet, graph: ConstraintGraph) -> TrackSet:
    return tracks.subset(lambda t: graph.degree(t.track_id) >= 1)


def harvest_stats(graph: ConstraintGraph, tracks: TrackSet) -> dict:
    """Co-occurrence summary; degree and length figures cover linked tracks only."""
    n = len(tracks)
    deg = np.array([graph.degree(t.track_id) for t in tracks], dtype=np.int64)
    linked = deg >= 1
    lengths = np.array([t.length for t in tracks], dtype=np.float64)
    d = deg[linked]
    lens = lengths[linked]

    def _summ(a):
        if a.size == 0:
            return {"min": None, "max": None, "mean": None, "std": None}
        return {"min": float(a.min()), "max": float(a.max()), "mean": float(a.mean()), "std": float(a.std())}

    return {
        "n_tracks": n,
        "n_videos": len(tracks.video_ids),
        "n_cooccurring": int(linked.sum()),
        "n_cannot_link": len(graph.cannot_link),
        "pct_cooccurring": 100.0 * float(linked.mean()) if n else 0.0,
        "degree": _summ(d),
        "pct_single_link": 100.0 * float((d == 1).mean()) if d.size else 0.0,
        "faces_per_track": {"mean": _summ(lens)["mean"], "std": _summ(lens)["std"]},
    }


def harvest(tracks: TrackSet, min_frames: int = 24, min_overlap: int = 1):
    """Length filter, then co-occurrence filter.

    Returns ``(kept, graph, stats)``; the graph and stats describe the
    length-filtered population the co-occurrence filter was applied to.
    """
    long_enough = filter_min_length(tracks, min_frames)
    graph = build_constraints(long_enough, min_overlap)
    kept = filter_cooccurring(long_enough, graph)
    stats = harvest_stats(graph, long_enough)
    stats["n_input_tracks"] = len(tracks)
    stats["n_after_min_length"] = len(long_enough)
    stats["n_kept"] = len(kept)
    stats["min_frames"] = min_frames
    return kept, graph, stats


def format_stats(stats: dict) -> str:
    deg = stats["degree"]
    fpt = stats["faces_per_track"]

    def f(x, spec=".1f"):
        return "-" if x is None else format(x, spec)

    rows = [
        ("input tracks", str(stats.get("n_input_tracks", stats["n_tracks"]))),
        (f"tracks >= {stats.get('min_frames', '?')} frames", str(stats["n_tracks"])),
        ("co-occurring tracks", f"{stats['n_cooccurring']} ({stats['pct_cooccurring']:.1f}%)"),
        ("cannot-link pairs", str(stats["n_cannot_link"])),
        ("cannot-links per track", f"{f(deg['mean'], '.2f')} +/- {f(deg['std'], '.2f')} [{f(deg['min'], '.0f')}, {f(deg['max'], '.0f')}]"),
        ("single cannot-link", f"{stats['pct_single_link']:.1f}%"),
        ("faces per track", f"{f(fpt['mean'])} +/- {f(fpt['std'])}"),
    ]
    w = max(len(k) for k, _ in rows)
    return "\n".join(f"{k.ljust(w)}  {v}" for k, v in rows)
