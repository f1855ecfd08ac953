"""Face-speaker enrollment library.

Face tracks are grouped into identities by cosine similarity of their face
signatures (greedy first match against each cluster's founding track), and
every identity collects the speech its tracks contain while labelled active.
A lookup returns one randomly chosen segment of the query's identity that did
not come from the query track itself, or ``None`` when nothing qualifies.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np

from .errors import ConfigError, EmptyTrack, IoError, ParseError
from .features import FACE_SIZE, AudioClip, FaceTrack, read_wav

LIBRARY_VERSION = 1


class FaceEmbedderInterface(Protocol):
    name: str

    def embed_frames(self, frames: np.ndarray) -> np.ndarray:
        """(T, 112, 112) intensities in [0, 1] -> (T, D_f) embeddings."""
        ...


class StubFaceEmbedder:
    """Deterministic stand-in for a face recognition network.

    Block-averages the upper half of the crop (forehead/eyes, away from the
    mouth) to 8x16, standardises it, and applies a fixed random projection.
    """

    name = "stub"

    def __init__(self, dim: int = 128):
        self.dim = dim
        rng = np.random.default_rng(zlib.crc32(b"tsasd-stub-face-embedder"))
        self._proj = rng.standard_normal((dim, 8 * 16)) / np.sqrt(8 * 16)

    def embed_frames(self, frames: np.ndarray) -> np.ndarray:
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 3 or frames.shape[1:] != (FACE_SIZE, FACE_SIZE):
            raise ConfigError(f"expected (T, {FACE_SIZE}, {FACE_SIZE}) frames, got {frames.shape}")
        upper = frames[:, : FACE_SIZE // 2, :]
        blocks = upper.reshape(len(frames), 8, 7, 16, 7).mean(axis=(2, 4)).reshape(len(frames), -1)
        blocks = blocks - blocks.mean(axis=1, keepdims=True)
        blocks = blocks / (blocks.std(axis=1, keepdims=True) + 1e-8)
        return blocks @ self._proj.T


def load_face_embedder(spec: str = "stub") -> StubFaceEmbedder:
    if spec == "stub":
        return StubFaceEmbedder()
    raise ConfigError(f"unknown face embedder backend {spec!r}")


@dataclass
class FaceSignature:
    vector: np.ndarray
    source_track: str

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)


@dataclass
class SpeechSegment:
    source_track: str
    span: tuple[float, float]
    clip: AudioClip | None = None
    audio_path: str | None = None

    @property
    def duration(self) -> float:
        return self.span[1] - self.span[0]

    def load_clip(self) -> AudioClip:
        if self.clip is None:
            if self.audio_path is None:
                raise IoError(f"segment of {self.source_track!r} has neither audio nor a path")
            self.clip = read_wav(self.audio_path).slice(*self.span)
        return self.clip


@dataclass
class Cluster:
    representative: FaceSignature
    members: list[FaceSignature] = field(default_factory=list)
    segments: list[SpeechSegment] = field(default_factory=list)

    @property
    def track_ids(self) -> list[str]:
        return [m.source_track for m in self.members]


@dataclass
class FaceSpeakerLibrary:
    clusters: list[Cluster]
    threshold: float = 0.7
    embedder_id: str = "stub"
    version: int = LIBRARY_VERSION

    def cluster_of_track(self, track_id: str) -> Cluster | None:
        for c in self.clusters:
            if track_id in c.track_ids:
                return c
        return None

    def match(self, signature: FaceSignature) -> Cluster | None:
        for c in self.clusters:
            if cosine(signature.vector, c.representative.vector) >= self.threshold:
                return c
        return None

    def signature_of(self, track_id: str) -> FaceSignature | None:
        for c in self.clusters:
            for m in c.members:
                if m.source_track == track_id:
                    return m
        return None


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def face_signature(track: FaceTrack, embedder: FaceEmbedderInterface) -> FaceSignature:
    """Unit-norm mean of the per-frame (unit-norm) face embeddings."""
    if len(track) == 0:
        raise EmptyTrack(f"track {track.track_id!r} has no frames")
    per_frame = np.asarray(embedder.embed_frames(track.frames.frames), dtype=np.float64)
    per_frame = per_frame / np.maximum(np.linalg.norm(per_frame, axis=1, keepdims=True), 1e-12)
    mean = per_frame.mean(axis=0)
    return FaceSignature(mean / max(np.linalg.norm(mean), 1e-12), track.track_id)


def active_runs(labels: Sequence[int]) -> list[tuple[int, int]]:
    """Maximal runs of consecutive 1-labels as half-open frame ranges."""
    y = np.r_[0, np.asarray(labels, dtype=np.int64).reshape(-1), 0]
    edges = np.flatnonzero(np.diff(y))
    return [(int(a), int(b)) for a, b in zip(edges[::2], edges[1::2])]


def extract_active_segments(track: FaceTrack, audio: AudioClip | None = None, min_duration: float = 0.2,
                            audio_path: str | None = None) -> list[SpeechSegment]:
    """Audio spans under each run of active frames, dropping runs shorter than ``min_duration`` seconds."""
    if track.labels is None:
        raise ConfigError(f"track {track.track_id!r} has no ground-truth labels")
    segments = []
    for a, b in active_runs(track.labels):
        start, end = a / track.fps, b / track.fps
        if end - start < min_duration:
            continue
        clip = audio.slice(start, end) if audio is not None else None
        segments.append(SpeechSegment(track.track_id, (start, end), clip, audio_path))
    return segments


def cluster_signatures(signatures: Sequence[FaceSignature],
                       segments: Mapping[str, list[SpeechSegment]] | None = None,
                       threshold: float = 0.7, embedder_id: str = "stub") -> FaceSpeakerLibrary:
    """Greedy clustering in sorted track-id order; the founding track stays the representative."""
    segments = segments or {}
    clusters: list[Cluster] = []
    for sig in sorted(signatures, key=lambda s: s.source_track):
        home = None
        for c in clusters:
            if cosine(sig.vector, c.representative.vector) >= threshold:
                home = c
                break
        if home is None:
            home = Cluster(representative=sig)
            clusters.append(home)
        home.members.append(sig)
        home.segments.extend(segments.get(sig.source_track, []))
    return FaceSpeakerLibrary(clusters, threshold, embedder_id)


def build_library(tracks: Sequence[FaceTrack], audios: Sequence[AudioClip | None] | Mapping[str, AudioClip],
                  embedder: FaceEmbedderInterface, threshold: float = 0.7, min_duration: float = 0.2,
                  audio_paths: Mapping[str, str] | None = None) -> FaceSpeakerLibrary:
    audio_paths = audio_paths or {}
    if not isinstance(audios, Mapping):
        audios = {t.track_id: a for t, a in zip(tracks, audios)}
    sigs = [face_signature(t, embedder) for t in tracks]
    segs = {t.track_id: extract_active_segments(t, audios.get(t.track_id), min_duration,
                                                audio_paths.get(t.track_id)) for t in tracks}
    return cluster_signatures(sigs, segs, threshold, getattr(embedder, "name", "custom"))


def enroll_lookup_segment(query: FaceTrack | FaceSignature, library: FaceSpeakerLibrary, rng_seed: int,
                          embedder: FaceEmbedderInterface | None = None, allow_self: bool = False,
                          min_duration: float = 0.0) -> SpeechSegment | None:
    if isinstance(query, FaceSignature):
        sig = query
    else:
        sig = library.signature_of(query.track_id)
        if sig is None:
            if embedder is None:
                raise ConfigError(f"track {query.track_id!r} is not in the library and no embedder was given")
            sig = face_signature(query, embedder)
    cluster = library.cluster_of_track(sig.source_track) or library.match(sig)
    if cluster is None:
        return None
    candidates = [s for s in cluster.segments
                  if (allow_self or s.source_track != sig.source_track) and s.duration >= min_duration]
    if not candidates:
        return None
    return candidates[int(np.random.default_rng(rng_seed).integers(len(candidates)))]


def enroll_lookup(query: FaceTrack | FaceSignature, library: FaceSpeakerLibrary, rng_seed: int,
                  embedder: FaceEmbedderInterface | None = None, allow_self: bool = False,
                  min_duration: float = 0.0) -> AudioClip | None:
    """Random enrollment clip for the query's identity, or None (caller substitutes the zero embedding)."""
    seg = enroll_lookup_segment(query, library, rng_seed, embedder, allow_self, min_duration)
    return None if seg is None else seg.load_clip()


# -------------------------------------------------------------- persistence


def save_library(library: FaceSpeakerLibrary, path: str | Path) -> None:
    """JSON file: header plus clusters of member signatures and segment references."""
    doc = {
        "format": "tsasd-face-speaker-library",
        "version": library.version,
        "threshold": library.threshold,
        "embedder": library.embedder_id,
        "clusters": [
            {
                "representative": c.representative.source_track,
                "members": [{"track_id": m.source_track, "signature": m.vector.tolist()} for m in c.members],
                "segments": [{"track_id": s.source_track, "start": s.span[0], "end": s.span[1],
                              "audio_path": s.audio_path} for s in c.segments],
            }
            for c in library.clusters
        ],
    }
    try:
        Path(path).write_text(json.dumps(doc, indent=1))
    except OSError as exc:
        raise IoError(f"cannot write library {path}: {exc}") from exc


def load_library(path: str | Path) -> FaceSpeakerLibrary:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise IoError(f"cannot read library {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"library is not valid JSON: {exc}", line=exc.lineno) from exc
    if doc.get("format") != "tsasd-face-speaker-library":
        raise ParseError(f"{path} is not a face-speaker library file")
    if doc.get("version") != LIBRARY_VERSION:
        raise ParseError(f"unsupported library version {doc.get('version')}")
    clusters = []
    for c in doc["clusters"]:
        members = [FaceSignature(np.array(m["signature"]), m["track_id"]) for m in c["members"]]
        rep = next(m for m in members if m.source_track == c["representative"])
        segs = [SpeechSegment(s["track_id"], (s["start"], s["end"]), None, s["audio_path"]) for s in c["segments"]]
        clusters.append(Cluster(rep, members, segs))
    return FaceSpeakerLibrary(clusters, doc["threshold"], doc["embedder"], doc["version"])
