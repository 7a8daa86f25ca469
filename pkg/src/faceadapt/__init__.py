"""Self-supervised adaptation of video face-track embeddings.

Pipeline: harvest co-occurring tracks, mine hard tracklets, learn a
multiview-correlation subspace (closed form or gradient trained), then
cluster and score the adapted track embeddings.
"""

from faceadapt.core import (
    EmbeddingMatrix,
    FaceTrack,
    TrackEmbedding,
    TrackSet,
    l2_normalize,
    norm_euclidean_distance,
    track_mean,
)

__version__ = "0.1.0"

__all__ = [
    "EmbeddingMatrix",
    "FaceTrack",
    "TrackEmbedding",
    "TrackSet",
    "l2_normalize",
    "norm_euclidean_distance",
    "track_mean",
]
