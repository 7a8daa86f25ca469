"""Synthetic face-track corpora with planted identities.

Each identity has a prototype on the unit sphere.  A track of that identity
sees the prototype through a per-track random linear distortion, split into
a few temporal segments that may each carry a "pose" offset drawn from a
nuisance subspace shared by every identity, plus per-frame Gaussian noise.
Tracks are laid out in scenes of 2-3 different identities with overlapping
frame spans, so every track has at least one cannot-link partner.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from faceadapt import formats
from faceadapt.core import EmbeddingMatrix, FaceTrack, TrackSet, ValidationError


@dataclass(frozen=True)
class SyntheticSpec:
    n_identities: int = 5  # per video
    tracks_per_identity: int = 10
    frames_min: int = 24
    frames_max: int = 96
    dim: int = 64
    n_videos: int = 1
    noise: float = 0.05  # per-frame additive sigma
    distortion: float = 0.1  # per-track linear distortion strength
    shift_prob: float = 0.7  # chance a segment carries a pose offset
    shift_scale: float = 0.5  # std of pose offsets along each nuisance axis
    nuisance_rank: int = 6
    segments: int = 3  # max pose segments per track
    cooccur_density: float = 0.3  # chance a scene holds 3 tracks instead of 2
    seed: int = 0

    def __post_init__(self):
        counts = (self.n_identities, self.tracks_per_identity, self.frames_min, self.dim,
                  self.n_videos, self.segments)
        if min(counts) < 1:
            raise ValidationError("synthetic counts must be positive")
        if self.n_identities < 2:
            raise ValidationError("need at least 2 identities per video for co-occurrence")
        if self.frames_max < self.frames_min:
            raise ValidationError("frames_max < frames_min")
        if self.noise < 0 or self.distortion < 0 or self.shift_scale < 0:
            raise ValidationError("noise, distortion and shift_scale must be >= 0")
        if not 0 <= self.shift_prob <= 1 or not 0 <= self.cooccur_density <= 1:
            raise ValidationError("probabilities must lie in [0, 1]")
        if not 0 <= self.nuisance_rank <= self.dim:
            raise ValidationError("nuisance_rank must lie in [0, dim]")


@dataclass
class SyntheticCorpus:
    tracks: TrackSet
    embeddings: dict  # video_id -> EmbeddingMatrix
    prototypes: dict  # label -> unit vector
    spec: SyntheticSpec


def _scenes(items: list, rng: np.random.Generator, density: float) -> list[list]:
    """Group (label, idx) items into scenes of 2-3 distinct labels."""
    pool = [items[i] for i in rng.permutation(len(items))]
    scenes: list[list] = []
    while pool:
        size = 3 if rng.random() < density else 2
        scene = [pool.pop(0)]
        i = 0
        while len(scene) < size and i < len(pool):
            if all(pool[i][0] != s[0] for s in scene):
                scene.append(pool.pop(i))
            else:
                i += 1
        if len(scene) == 1:
            # leftovers all share one label: attach to earlier scenes without it
            for sc in scenes:
                if all(s[0] != scene[0][0] for s in sc):
                    sc.append(scene[0])
                    break
            else:
                raise ValidationError("cannot place track in a co-occurring scene")
        else:
            scenes.append(scene)
    return scenes


def generate(spec: SyntheticSpec) -> SyntheticCorpus:
    rng = np.random.default_rng(spec.seed)
    d = spec.dim
    U = np.linalg.qr(rng.standard_normal((d, max(spec.nuisance_rank, 1))))[0][:, :spec.nuisance_rank]
    tracks = []
    embeddings = {}
    prototypes = {}
    tid = 0
    for v in range(spec.n_videos):
        vid = f"v{v:03d}"
        labels = [f"{vid}/c{c:02d}" for c in range(spec.n_identities)]
        for lab in labels:
            p = rng.standard_normal(d)
            prototypes[lab] = p / np.linalg.norm(p)
        items = [(lab, k) for lab in labels for k in range(spec.tracks_per_identity)]
        cols = []
        cursor = 0
        col = 0
        for scene in _scenes(items, rng, spec.cooccur_density):
            scene_end = cursor
            for lab, _ in scene:
                n = int(rng.integers(spec.frames_min, spec.frames_max + 1))
                start = cursor + int(rng.integers(0, 6))
                G = rng.standard_normal((d, d)) / np.sqrt(d)
                base = prototypes[lab] + spec.distortion * (G @ prototypes[lab])
                n_seg = int(rng.integers(1, spec.segments + 1))
                cuts = np.sort(rng.choice(np.arange(1, n), size=min(n_seg - 1, n - 1), replace=False))
                frames = np.empty((d, n))
                for seg in np.split(np.arange(n), cuts):
                    offset = np.zeros(d)
                    if spec.nuisance_rank and rng.random() < spec.shift_prob:
                        offset = U @ (spec.shift_scale * rng.standard_normal(spec.nuisance_rank))
                    frames[:, seg] = (base + offset)[:, None]
                frames += spec.noise * rng.standard_normal((d, n))
                cols.append(frames)
                tracks.append(FaceTrack(tid, vid, start, start + n - 1, col, col + n, lab))
                tid += 1
                col += n
                scene_end = max(scene_end, start + n - 1)
            cursor = scene_end + 1 + int(rng.integers(1, 48))
        embeddings[vid] = EmbeddingMatrix(np.hstack(cols).astype(np.float32))
    return SyntheticCorpus(TrackSet(tracks), embeddings, prototypes, spec)


def write_corpus(corpus: SyntheticCorpus, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    formats.write_tracks(out / "tracks.jsonl", corpus.tracks)
    for vid, emb in corpus.embeddings.items():
        formats.write_embeddings(formats.embedding_path(out / "emb", vid), emb)
    return {
        "tracks": str(out / "tracks.jsonl"),
        "embeddings": str(out / "emb"),
        "n_tracks": len(corpus.tracks),
        "n_videos": len(corpus.embeddings),
        "spec": asdict(corpus.spec),
    }
