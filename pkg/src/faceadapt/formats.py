"""Binary and JSON-lines file formats.

Every binary file starts with a 4-byte magic and a little-endian u16
format version; all floating-point payloads are little-endian float32.

    embeddings  TMEB  u16 ver, u32 d, u32 N, N*d floats column by column
    samples     TMSP  u16 ver, u32 d, u32 P, u32 count, then per record:
                      u16+utf8 json track id, u16+utf8 json negative id,
                      (P + 1) * d floats (anchor, P-1 positives, negative)
    subspace    TMSS  u16 ver, u32 d, u32 r, u32 M, f64 eps,
                      mean (d), eigenvalues (r), V (d x r column by column)
    checkpoint  TMCK  u16 ver, u32 n, n bytes of JSON header, then the
                      tensors listed in the header, each in C order
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from faceadapt.core import EmbeddingMatrix, FaceAdaptError, FaceTrack, TrackSet, ValidationError

FORMAT_VERSION = 1
F32 = np.dtype("<f4")

EMB_MAGIC = b"TMEB"
SAMPLES_MAGIC = b"TMSP"
SUBSPACE_MAGIC = b"TMSS"
CHECKPOINT_MAGIC = b"TMCK"


class FormatError(FaceAdaptError):
    """A file does not follow its declared format."""


class MagicMismatch(FormatError):
    pass


class VersionMismatch(FormatError):
    pass


class TruncatedPayload(FormatError):
    pass


class NonFiniteValue(FormatError):
    pass


class _Reader:
    def __init__(self, path, magic: bytes):
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"no such file: {path}")
        self.path = path
        self.buf = path.read_bytes()
        self.pos = 0
        got = self.take(len(magic), "magic")
        if got != magic:
            raise MagicMismatch(f"{path}: magic {got!r} != {magic!r}")
        (ver,) = self.unpack("<H", "version")
        if ver != FORMAT_VERSION:
            raise VersionMismatch(f"{path}: format version {ver}, expected {FORMAT_VERSION}")

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            if what in ("magic", "version"):
                raise TruncatedPayload(f"{self.path}: truncated header")
            raise TruncatedPayload(f"{self.path}: truncated payload reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str = "header"):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def floats(self, count: int, what: str) -> np.ndarray:
        raw = np.frombuffer(self.take(count * 4, what), dtype=F32)
        if not np.all(np.isfinite(raw)):
            raise NonFiniteValue(f"{self.path}: non-finite value in {what}")
        return raw.copy()

    def json_str(self, what: str):
        (n,) = self.unpack("<H", what)
        return json.loads(self.take(n, what).decode("utf-8"))

    def done(self):
        if self.pos != len(self.buf):
            raise FormatError(f"{self.path}: {len(self.buf) - self.pos} trailing bytes")


def _write(path, chunks) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        for c in chunks:
            f.write(c)
    os.replace(tmp, path)


def _f32(a) -> bytes:
    a = np.asarray(a)
    if not np.all(np.isfinite(a)):
        raise ValidationError("refusing to write non-finite values")
    return np.ascontiguousarray(a, dtype=F32).tobytes()


def _json_str(obj) -> bytes:
    raw = json.dumps(obj).encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


# -- embeddings ---------------------------------------------------------------

def write_embeddings(path, emb) -> None:
    data = emb.data if isinstance(emb, EmbeddingMatrix) else np.asarray(emb)
    d, n = data.shape
    header = EMB_MAGIC + struct.pack("<HII", FORMAT_VERSION, d, n)
    _write(path, [header, _f32(data.T)])


def load_embeddings(path) -> EmbeddingMatrix:
    r = _Reader(path, EMB_MAGIC)
    d, n = r.unpack("<II")
    if d < 1 or n < 1:
        raise FormatError(f"{path}: empty matrix d={d} N={n}")
    vals = r.floats(d * n, "embedding payload")
    r.done()
    return EmbeddingMatrix(vals.reshape(n, d).T)


def embedding_path(directory, video_id) -> Path:
    return Path(directory) / f"{video_id}.tmeb"


def load_video_embeddings(directory, video_ids) -> dict:
    return {vid: load_embeddings(embedding_path(directory, vid)) for vid in video_ids}


# -- track metadata -------------------------------------------------------------

def write_tracks(path, tracks) -> None:
    lines = [json.dumps(t.to_dict(), sort_keys=True) + "\n" for t in tracks]
    _write(path, [("".join(lines)).encode("utf-8")])


def read_tracks(path) -> TrackSet:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                out.append(FaceTrack.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise FormatError(f"{path}:{lineno}: bad track record ({e})") from None
    return TrackSet(out)


# -- mined samples ------------------------------------------------------------

def write_samples(path, samples, report: dict | None = None) -> None:
    if not samples:
        raise ValidationError("no samples to write")
    d = samples[0].dim
    P = len(samples[0].views)
    chunks = [SAMPLES_MAGIC + struct.pack("<HIII", FORMAT_VERSION, d, P, len(samples))]
    for s in samples:
        chunks.append(_json_str(s.track_id))
        chunks.append(_json_str(s.negative_source_track_id))
        chunks.append(_f32(np.concatenate([*s.views, s.hard_negative])))
    _write(path, chunks)
    if report is not None:
        sidecar = Path(str(path) + ".json")
        _write(sidecar, [(json.dumps(report, indent=2, sort_keys=True) + "\n").encode()])


def load_samples(path) -> list:
    from faceadapt.mining import MultiviewSample

    r = _Reader(path, SAMPLES_MAGIC)
    d, P, count = r.unpack("<III")
    out = []
    for _ in range(count):
        tid = r.json_str("track id")
        nid = r.json_str("negative id")
        v = r.floats((P + 1) * d, "sample vectors").astype(np.float64).reshape(P + 1, d)
        out.append(MultiviewSample(tid, v[0], tuple(v[1:P]), v[P], nid))
    r.done()
    return out


# -- subspace model -------------------------------------------------------------

def write_subspace(path, model) -> None:
    header = SUBSPACE_MAGIC + struct.pack("<HIIId", FORMAT_VERSION, model.dim, model.r, model.M, model.epsilon)
    _write(path, [header, _f32(model.mean), _f32(model.eigenvalues), _f32(model.V.T)])


def load_subspace(path):
    from faceadapt.mvcorr import SubspaceModel

    r = _Reader(path, SUBSPACE_MAGIC)
    d, rank, M, eps = r.unpack("<IIId")
    mean = r.floats(d, "mean").astype(np.float64)
    ev = r.floats(rank, "eigenvalues").astype(np.float64)
    V = r.floats(d * rank, "projection").astype(np.float64).reshape(rank, d).T
    r.done()
    return SubspaceModel(np.ascontiguousarray(V), ev, eps, M, mean)


# -- network checkpoint ---------------------------------------------------------

def write_checkpoint(path, header: dict, tensors: dict) -> None:
    header = dict(header)
    header["tensors"] = [{"name": k, "shape": list(np.shape(v))} for k, v in tensors.items()]
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC + struct.pack("<HI", FORMAT_VERSION, len(raw)), raw]
    chunks += [_f32(v) for v in tensors.values()]
    _write(path, chunks)


def load_checkpoint(path) -> tuple[dict, dict]:
    r = _Reader(path, CHECKPOINT_MAGIC)
    (n,) = r.unpack("<I")
    try:
        header = json.loads(r.take(n, "checkpoint header").decode("utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: bad checkpoint header ({e})") from None
    tensors = {}
    for spec in header.get("tensors", []):
        shape = tuple(spec["shape"])
        size = int(np.prod(shape)) if shape else 1
        tensors[spec["name"]] = r.floats(size, spec["name"]).astype(np.float64).reshape(shape)
    r.done()
    return header, tensors


def sniff(path) -> bytes:
    """First four bytes of a file, to tell formats apart."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    with open(path, "rb") as f:
        return f.read(4)
