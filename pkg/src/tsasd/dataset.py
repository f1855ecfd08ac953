"""Track manifests, the synthetic audio-visual corpus, and training batches.

A manifest is JSON Lines, one track per line::

    {"track_id": "id00_t0", "video_id": "id00_v0", "face_frames_path": "faces/id00_t0.npy",
     "audio_path": "audio/id00_t0.wav", "fps": 25.0, "labels": [0, 1, ...], "split": "train"}

Relative paths resolve against the manifest's directory. ``face_frames_path``
is either a packed ``(T, 112, 112)`` uint8 ``.npy`` tensor or a directory of
images; ``audio_path`` is mono 16-bit PCM WAV. Extra keys are kept in
``TrackManifestEntry.extra``.
"""

from __future__ import annotations

import functools
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
import torch
from scipy.interpolate import CubicSpline

from .errors import ConfigError, IoError, MissingAsset, ParseError
from .features import (FACE_SIZE, AudioClip, AugmentConfig, FaceFrameSequence, FaceTrack, align_audio_to_video,
                       augment_visual, count_face_frames, extract_mfcc, hz_to_mel, load_face_frames, read_wav,
                       write_wav)

SPLITS = ("train", "val", "test")
DATA_ROOT_ENV = "TSASD_DATA_ROOT"


@dataclass
class TrackManifestEntry:
    track_id: str
    video_id: str
    face_frames_path: str
    audio_path: str
    fps: float
    labels: list[int]
    split: str
    extra: dict = field(default_factory=dict)

    def to_record(self, relative_to: Path | None = None) -> dict:
        def rel(p):
            if relative_to is None:
                return p
            try:
                return os.path.relpath(p, relative_to)
            except ValueError:
                return p

        rec = {"track_id": self.track_id, "video_id": self.video_id,
               "face_frames_path": rel(self.face_frames_path), "audio_path": rel(self.audio_path),
               "fps": self.fps, "labels": [int(v) for v in self.labels], "split": self.split}
        rec.update(self.extra)
        return rec


_REQUIRED = ("track_id", "video_id", "face_frames_path", "audio_path", "fps", "labels", "split")


def _entry_from_record(rec: dict, base: Path, lineno: int) -> TrackManifestEntry:
    if not isinstance(rec, dict):
        raise ParseError("record is not a JSON object", line=lineno)
    missing = [k for k in _REQUIRED if k not in rec]
    if missing:
        raise ParseError(f"missing fields {missing}", line=lineno, track_id=rec.get("track_id"))
    labels = rec["labels"]
    if not isinstance(labels, list) or any(v not in (0, 1) for v in labels):
        raise ParseError("labels must be a list of 0/1", line=lineno, track_id=rec["track_id"])
    if rec["split"] not in SPLITS:
        raise ParseError(f"split must be one of {SPLITS}", line=lineno, track_id=rec["track_id"])
    try:
        fps = float(rec["fps"])
    except (TypeError, ValueError) as exc:
        raise ParseError("fps is not a number", line=lineno, track_id=rec["track_id"]) from exc
    extra = {k: v for k, v in rec.items() if k not in _REQUIRED}
    return TrackManifestEntry(str(rec["track_id"]), str(rec["video_id"]),
                              os.path.normpath(base / rec["face_frames_path"]),
                              os.path.normpath(base / rec["audio_path"]), fps, [int(v) for v in labels], rec["split"],
                              extra)


def load_manifest(path: str | Path, check_media: bool = True) -> list[TrackManifestEntry]:
    """Parse and validate a manifest.

    Raises ParseError (with line number or track id) for malformed records,
    duplicate ids, or label/frame-count mismatches, and MissingAsset when a
    referenced media file does not exist.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingAsset(f"manifest not found: {path}")
    base = path.parent
    entries, seen = [], set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", line=lineno) from exc
            entry = _entry_from_record(rec, base, lineno)
            if entry.track_id in seen:
                raise ParseError("duplicate track id", line=lineno, track_id=entry.track_id)
            seen.add(entry.track_id)
            if check_media:
                for p in (entry.face_frames_path, entry.audio_path):
                    if not Path(p).exists():
                        raise MissingAsset(f"track {entry.track_id!r}: missing {p}")
                n = count_face_frames(entry.face_frames_path)
                if n != len(entry.labels):
                    raise ParseError(f"{len(entry.labels)} labels but {n} face frames",
                                     line=lineno, track_id=entry.track_id)
            entries.append(entry)
    return entries


def write_manifest(path: str | Path, entries: Sequence[TrackManifestEntry]) -> None:
    path = Path(path)
    try:
        with open(path, "w") as fh:
            for e in entries:
                fh.write(json.dumps(e.to_record(path.parent.resolve()), sort_keys=True) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write manifest {path}: {exc}") from exc


def check_splits(entries: Sequence[TrackManifestEntry]) -> None:
    seen: dict[str, str] = {}
    for e in entries:
        if seen.setdefault(e.track_id, e.split) != e.split:
            raise ParseError(f"appears in splits {seen[e.track_id]!r} and {e.split!r}", track_id=e.track_id)


def load_track(entry: TrackManifestEntry) -> tuple[FaceTrack, AudioClip]:
    faces = load_face_frames(entry.face_frames_path, entry.fps)
    return FaceTrack(entry.track_id, faces, np.asarray(entry.labels), entry.video_id), read_wav(entry.audio_path)


def default_data_root() -> Path:
    return Path(os.environ.get(DATA_ROOT_ENV, "data"))


# ---------------------------------------------------------------- synthetic


@dataclass
class SyntheticCorpusSpec:
    n_identities: int = 8
    tracks_per_identity: int = 6
    track_length: int = 200
    occlusion_rate: float = 0.5
    noise_snr: float = 20.0
    seed: int = 0
    fps: float = 25.0
    sample_rate: int = 16000
    split_by: str = "identity"  # "identity": val/test speakers unseen in training; "track": per-identity split
    partners: str = "stranger"  # who talks in non-target turns: off-screen "stranger" or another "identity"

    def __post_init__(self):
        if min(self.n_identities, self.tracks_per_identity, self.track_length) < 1:
            raise ConfigError("identity, track and frame counts must all be >= 1")
        if self.split_by not in ("identity", "track"):
            raise ConfigError(f"split_by must be 'identity' or 'track', got {self.split_by!r}")
        if self.partners not in ("stranger", "identity"):
            raise ConfigError(f"partners must be 'stranger' or 'identity', got {self.partners!r}")
        if not 0.0 <= self.occlusion_rate <= 1.0:
            raise ConfigError("occlusion_rate must lie in [0, 1]")


@dataclass
class Identity:
    index: int
    texture: np.ndarray | None
    envelope_db: Callable[[np.ndarray], np.ndarray]
    f0: float


_VOICE_DIMS = 4
_VOICE_DEPTH_DB = 30.0


@functools.lru_cache(maxsize=16)
def voice_codes(seed: int, n: int, dims: int = _VOICE_DIMS) -> np.ndarray:
    """Unit vectors in a small shared space, spread apart by soft repulsion.

    Identities share the space (so speaker comparison can generalise to unseen
    voices) while pairwise cosines stay low.
    """
    rng = np.random.default_rng([seed, 2])
    x = rng.standard_normal((n, dims))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    for _ in range(500):
        c = x @ x.T
        w = np.exp(8.0 * c)
        np.fill_diagonal(w, 0.0)
        grad = w @ x
        grad -= np.sum(grad * x, axis=1, keepdims=True) * x  # tangent to the sphere
        x = x - 0.02 * grad / (np.abs(grad).max() + 1e-12)
        x /= np.linalg.norm(x, axis=1, keepdims=True)
    return x


def _identity(spec: SyntheticCorpusSpec, index: int) -> Identity:
    rng = np.random.default_rng([spec.seed, 1, index])
    yy, xx = np.mgrid[0:FACE_SIZE, 0:FACE_SIZE].astype(np.float64)
    tex = np.full((FACE_SIZE, FACE_SIZE), 0.5)
    # many small blobs: few large ones left distinct identities with face cosine > 0.7
    for _ in range(40):
        cy, cx = rng.uniform(0, FACE_SIZE, 2)
        sigma = rng.uniform(3, 8)
        tex += rng.uniform(-0.3, 0.3) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
    tex = np.clip(tex, 0.1, 0.9)

    code = voice_codes(spec.seed, max(spec.n_identities, index + 1))[index]
    return Identity(index, tex, voice_envelope(code), float(rng.uniform(95.0, 240.0)))


def voice_envelope(code: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    """Spectral envelope (dB) with signed peaks/dips on a shared band grid, weighted by ``code``.

    Codes live in the zero-sum subspace of the slots because overall level is
    normalised away, so only the shape across bands identifies a speaker.
    """
    slots = _VOICE_DIMS + 1
    basis = np.linalg.svd(np.eye(slots) - 1.0 / slots)[0][:, :_VOICE_DIMS]
    grid = np.linspace(hz_to_mel(400.0), hz_to_mel(6000.0), slots)
    heights = _VOICE_DEPTH_DB * (basis @ np.asarray(code, dtype=np.float64))
    width = 0.3 * (grid[1] - grid[0])

    def envelope_db(freq_hz):
        m = hz_to_mel(freq_hz)
        return sum(h * np.exp(-0.5 * ((m - c) / width) ** 2) for c, h in zip(grid, heights))

    return envelope_db


def stranger(rng: np.random.Generator) -> Identity:
    """Off-screen speaker with a random voice and no face."""
    code = rng.standard_normal(_VOICE_DIMS)
    return Identity(-1, None, voice_envelope(code / np.linalg.norm(code)), float(rng.uniform(95.0, 240.0)))


def synth_voice(identity: Identity, envelope: np.ndarray, sample_rate: int, rng: np.random.Generator) -> np.ndarray:
    """Glottal pulse train plus breath noise, shaped by the identity's spectral envelope, times ``envelope``."""
    n = len(envelope)
    t = np.arange(n) / sample_rate
    f0 = identity.f0 * (1.0 + 0.03 * np.sin(2 * np.pi * rng.uniform(3, 6) * t + rng.uniform(0, 2 * np.pi)))
    phase = np.cumsum(f0) / sample_rate
    pulses = np.diff(np.floor(phase), prepend=0.0)
    excitation = pulses * np.sqrt(sample_rate / identity.f0) + 0.3 * rng.standard_normal(n)
    spec = np.fft.rfft(excitation)
    freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
    gain = 10.0 ** (identity.envelope_db(freqs) / 20.0)
    gain[freqs < 80.0] = 0.0
    voiced = np.fft.irfft(spec * gain, n)
    voiced /= np.sqrt(np.mean(voiced ** 2)) + 1e-12
    return voiced * envelope


def _syllable_envelope(n: int, sample_rate: int, rng: np.random.Generator) -> np.ndarray:
    dur = n / sample_rate
    knots = np.arange(0.0, dur + 0.25, 1.0 / rng.uniform(4.0, 6.0))
    values = rng.uniform(0.15, 1.0, size=len(knots))
    env = np.clip(CubicSpline(knots, values)(np.arange(n) / sample_rate), 0.05, 1.0)
    ramp = min(n // 2, int(0.015 * sample_rate))
    if ramp:
        w = np.sin(0.5 * np.pi * np.arange(ramp) / ramp) ** 2
        env[:ramp] *= w
        env[-ramp:] *= w[::-1]
    return env


def _turns(length: int, rng: np.random.Generator) -> list[tuple[str, int, int]]:
    """Random sequence of (kind, start, end) frame spans covering the track."""
    turns, t = [], 0
    prev = None
    while t < length:
        kind = rng.choice(["target", "partner", "silence"], p=[0.4, 0.4, 0.2])
        if kind == prev == "silence":
            continue
        dur = int(rng.integers(6, 16)) if kind == "silence" else int(rng.integers(13, 38))
        turns.append((str(kind), t, min(length, t + dur)))
        t += dur
        prev = kind
    return turns


def _occlusion_window(labels: np.ndarray, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Contiguous frame mask covering exactly round(rate * n_active) active frames."""
    mask = np.zeros(len(labels), dtype=bool)
    active = np.flatnonzero(labels)
    want = int(round(rate * len(active)))
    if want == 0:
        return mask
    first = int(rng.integers(0, len(active) - want + 1))
    lo_bound = active[first - 1] + 1 if first > 0 else 0
    start = int(rng.integers(lo_bound, active[first] + 1))
    end = active[first + want - 1] + 1
    hi_bound = active[first + want] if first + want < len(active) else len(labels)
    end = int(rng.integers(end, hi_bound + 1))
    mask[start:end] = True
    return mask


def render_faces(identity: Identity, mouth_open: np.ndarray, occluded: np.ndarray,
                 rng: np.random.Generator) -> np.ndarray:
    """Grayscale frames: identity texture, a dark mouth ellipse whose height follows ``mouth_open``."""
    yy, xx = np.mgrid[0:FACE_SIZE, 0:FACE_SIZE].astype(np.float64)
    half_h = 1.0 + 11.0 * np.asarray(mouth_open)[:, None, None]
    inside = ((yy - 84.0) / half_h) ** 2 + ((xx - 56.0) / 16.0) ** 2 <= 1.0
    frames = np.where(inside, 0.06, identity.texture[None] + rng.uniform(-0.04, 0.04))
    frames = frames + rng.normal(0.0, 0.015, size=frames.shape)
    frames[occluded, FACE_SIZE // 2:, :] = 0.0
    return np.clip(frames, 0.0, 1.0)


def mouth_measure(frames: np.ndarray) -> np.ndarray:
    """Per-frame darkness of the mouth box (what the renderer modulates)."""
    return 1.0 - frames[:, 70:99, 40:73].mean(axis=(1, 2))


def frame_rms(samples: np.ndarray, n_frames: int, fps: float, sample_rate: int) -> np.ndarray:
    per = int(round(sample_rate / fps))
    x = np.zeros(n_frames * per)
    m = min(len(x), len(samples))
    x[:m] = samples[:m]
    return np.sqrt(np.mean(x.reshape(n_frames, per) ** 2, axis=1))


def _corr(a: np.ndarray, b: np.ndarray) -> float | None:
    if len(a) < 3 or np.std(a) == 0 or np.std(b) == 0:
        return None
    return float(np.corrcoef(a, b)[0, 1])


def _split_for(j: int, n: int) -> str:
    if n >= 3:
        return "test" if j == n - 1 else "val" if j == n - 2 else "train"
    return "train" if j == 0 else "test"


def split_of(spec: SyntheticCorpusSpec, ident: int, j: int) -> str:
    """Identity-disjoint by default: the last quarter of identities is test, the one before it val."""
    n = spec.n_identities
    if spec.split_by == "track" or n == 1:
        return _split_for(j, spec.tracks_per_identity)
    n_test = max(1, n // 4)
    if ident >= n - n_test:
        return "test"
    if n >= 3 and ident == n - n_test - 1:
        return "val"
    return "train"


def synth_track(spec: SyntheticCorpusSpec, identities: list[Identity], ident: int, j: int):
    """One track: (frames uint8, audio, labels, occlusion mask, stats)."""
    rng = np.random.default_rng([spec.seed, 3, ident, j])
    T, sr, fps = spec.track_length, spec.sample_rate, spec.fps
    per = int(round(sr / fps))
    n = T * per
    target = identities[ident]
    if spec.partners == "stranger":
        partner = stranger(rng)
    else:
        partner = identities[(ident + 1 + int(rng.integers(max(1, len(identities) - 1)))) % len(identities)] \
            if len(identities) > 1 else None

    labels = np.zeros(T, dtype=np.int64)
    target_audio = np.zeros(n)
    partner_audio = np.zeros(n)
    for kind, a, b in _turns(T, rng):
        if kind == "silence" or (kind == "partner" and partner is None):
            continue
        seg = slice(a * per, b * per)
        env = _syllable_envelope(b * per - a * per, sr, rng) * rng.uniform(0.06, 0.12)
        if kind == "target":
            labels[a:b] = 1
            target_audio[seg] = synth_voice(target, env, sr, rng)
        else:
            partner_audio[seg] = synth_voice(partner, env, sr, rng)

    speech = target_audio + partner_audio
    speech_rms = np.sqrt(np.mean(speech[speech != 0] ** 2)) if np.any(speech) else 0.05
    noise = rng.standard_normal(n) * speech_rms * 10.0 ** (-spec.noise_snr / 20.0)
    audio = np.clip(speech + noise, -1.0, 1.0)

    target_rms = frame_rms(target_audio, T, fps, sr)
    mouth = np.where(labels == 1, target_rms / (target_rms.max() + 1e-12), 0.0)
    occluded = _occlusion_window(labels, spec.occlusion_rate, rng)
    frames = render_faces(target, mouth, occluded, rng)
    frames_u8 = np.round(frames * 255.0).astype(np.uint8)

    act = labels == 1
    visible = act & ~occluded
    mixed_rms = frame_rms(audio, T, fps, sr)
    measured = mouth_measure(frames_u8.astype(np.float64) / 255.0)
    stats = {
        "identity": ident,
        "partner": None if partner is None else partner.index,
        "n_frames": T,
        "n_active": int(act.sum()),
        "n_occluded": int(occluded.sum()),
        "n_occluded_active": int((occluded & act).sum()),
        "lip_audio_corr": _corr(measured[act], mixed_rms[act]),
        "lip_audio_corr_visible": _corr(measured[visible], mixed_rms[visible]),
    }
    return frames_u8, AudioClip(audio, sr), labels, occluded, stats


def generate_synthetic(spec: SyntheticCorpusSpec, out_dir: str | Path) -> tuple[Path, list[TrackManifestEntry]]:
    """Write ``manifest.jsonl``, ``faces/*.npy``, ``audio/*.wav`` and ``stats.json`` under ``out_dir``."""
    out = Path(out_dir)
    try:
        (out / "faces").mkdir(parents=True, exist_ok=True)
        (out / "audio").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create corpus directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise IoError(f"corpus directory {out} is not writable")
    identities = [_identity(spec, i) for i in range(spec.n_identities)]
    entries, track_stats = [], {}
    for i in range(spec.n_identities):
        for j in range(spec.tracks_per_identity):
            tid = f"id{i:02d}_t{j}"
            frames, audio, labels, occluded, stats = synth_track(spec, identities, i, j)
            face_path, audio_path = out / "faces" / f"{tid}.npy", out / "audio" / f"{tid}.wav"
            try:
                np.save(face_path, frames)
            except OSError as exc:
                raise IoError(f"cannot write {face_path}: {exc}") from exc
            write_wav(audio_path, audio)
            split = split_of(spec, i, j)
            entries.append(TrackManifestEntry(tid, f"id{i:02d}_v{j}", str(face_path), str(audio_path), spec.fps,
                                              labels.tolist(), split, {"identity": i}))
            track_stats[tid] = {**stats, "occluded_frames": np.flatnonzero(occluded).tolist()}
    manifest = out / "manifest.jsonl"
    write_manifest(manifest, entries)
    corr = [s["lip_audio_corr_visible"] for s in track_stats.values() if s["lip_audio_corr_visible"] is not None]
    summary = {
        "spec": spec.__dict__,
        "n_tracks": len(entries),
        "min_lip_audio_corr_visible": min(corr) if corr else None,
        "tracks": track_stats,
    }
    try:
        (out / "stats.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    except OSError as exc:
        raise IoError(f"cannot write stats: {exc}") from exc
    return manifest, load_manifest(manifest)


def identity_voice_sample(spec: SyntheticCorpusSpec, index: int, seconds: float = 2.0, seed: int = 0) -> AudioClip:
    """Clean speech from one synthetic identity (for probing speaker encoders)."""
    identity = _identity(spec, index)
    rng = np.random.default_rng([spec.seed, 4, index, seed])
    n = int(seconds * spec.sample_rate)
    env = _syllable_envelope(n, spec.sample_rate, rng) * 0.1
    return AudioClip(synth_voice(identity, env, spec.sample_rate, rng), spec.sample_rate)


# ------------------------------------------------------------------ batches


@dataclass
class PreparedTrack:
    entry: TrackManifestEntry
    faces: np.ndarray  # (T, 112, 112) float32
    mfcc: np.ndarray  # (T, k, 13) float32
    labels: np.ndarray
    audio: AudioClip

    @property
    def track(self) -> FaceTrack:
        return FaceTrack(self.entry.track_id, FaceFrameSequence(self.faces, self.entry.fps), self.labels,
                         self.entry.video_id)


def prepare_track(entry: TrackManifestEntry, hop: float = 0.010, window: float = 0.025) -> PreparedTrack:
    track, audio = load_track(entry)
    mfcc = align_audio_to_video(extract_mfcc(audio, hop, window), len(track), entry.fps)
    return PreparedTrack(entry, track.frames.frames.astype(np.float32), mfcc.astype(np.float32),
                         np.asarray(entry.labels, dtype=np.int64), audio)


class TrackCache(dict):
    """track_id -> PreparedTrack, filled on first access."""

    def __init__(self, entries: Sequence[TrackManifestEntry] = (), hop: float = 0.010, window: float = 0.025):
        super().__init__()
        self.hop, self.window = hop, window
        self._entries = {e.track_id: e for e in entries}

    def get_track(self, entry: TrackManifestEntry) -> PreparedTrack:
        if entry.track_id not in self:
            self[entry.track_id] = prepare_track(entry, self.hop, self.window)
        return self[entry.track_id]


@dataclass
class Batch:
    track_ids: list[str]
    faces: torch.Tensor  # (B, T, 112, 112)
    mfcc: torch.Tensor  # (B, T, k, 13)
    labels: torch.Tensor  # (B, T)
    speaker: torch.Tensor  # (B, D_s)
    speaker_null: torch.Tensor  # (B,) bool


Enroller = Callable[[PreparedTrack, int], "np.ndarray | None"]


def make_batches(entries: Sequence[TrackManifestEntry], batch_size: int, seed: int, augment: bool,
                 cache: TrackCache | None = None, enroller: Enroller | None = None, speaker_dim: int = 192,
                 augment_cfg: AugmentConfig | None = None, dtype=torch.float32) -> Iterator[Batch]:
    """Seeded shuffle into batches; each track carries features, labels and a sampled enrollment.

    Tracks of unequal length within a batch are cropped to the shortest.
    ``enroller(track, seed)`` returns a speaker vector or None (zero vector).
    """
    if not entries:
        raise ConfigError("no tracks to batch")
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    cache = cache if cache is not None else TrackCache()
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(entries))
    track_seeds = rng.integers(0, 2 ** 31 - 1, size=len(entries))
    for start in range(0, len(entries), batch_size):
        idx = order[start:start + batch_size]
        tracks = [cache.get_track(entries[i]) for i in idx]
        t = min(len(p.labels) for p in tracks)
        faces, mfccs, labels, spk, null = [], [], [], [], []
        for i, p in zip(idx, tracks):
            f = p.faces[:t]
            if augment:
                f = augment_visual(FaceFrameSequence(f, p.entry.fps), int(track_seeds[i]), augment_cfg).frames
            faces.append(f)
            mfccs.append(p.mfcc[:t])
            labels.append(p.labels[:t])
            vec = enroller(p, int(track_seeds[i])) if enroller is not None else None
            null.append(vec is None)
            spk.append(np.zeros(speaker_dim) if vec is None else vec)
        yield Batch([entries[i].track_id for i in idx],
                    torch.as_tensor(np.stack(faces), dtype=dtype),
                    torch.as_tensor(np.stack(mfccs), dtype=dtype),
                    torch.as_tensor(np.stack(labels), dtype=dtype),
                    torch.as_tensor(np.stack(spk), dtype=dtype),
                    torch.as_tensor(null))


# ---------------------------------------------------------------- adapters


_AVA_SPEAKING = {"SPEAKING_AUDIBLE": 1, "SPEAKING_NOT_AUDIBLE": 0, "NOT_SPEAKING": 0}


def _label_value(raw: str) -> int:
    raw = raw.strip()
    if raw in _AVA_SPEAKING:
        return _AVA_SPEAKING[raw]
    if raw in {"0", "1"}:
        return int(raw)
    raise ValueError(f"unrecognised label {raw!r}")


def convert_annotations(csv_path: str | Path, face_root: str, audio_root: str, split: str, fps: float = 25.0,
                        columns: dict | None = None) -> list[TrackManifestEntry]:
    """Turn per-frame face annotations into manifest entries, one per entity track.

    ``columns`` maps the logical fields ``video_id``, ``timestamp``,
    ``entity_id`` and ``label`` to CSV column indices. Face crops are expected
    at ``face_root/<video_id>/<entity_id>`` and audio at
    ``audio_root/<video_id>/<entity_id>.wav``.
    """
    import csv

    cols = columns or {"video_id": 0, "timestamp": 1, "label": 6, "entity_id": 7}
    tracks: dict[str, dict] = {}
    with open(csv_path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].startswith("#"):
                continue
            try:
                vid, ts = row[cols["video_id"]], float(row[cols["timestamp"]])
                ent, lab = row[cols["entity_id"]], _label_value(row[cols["label"]])
            except (IndexError, ValueError) as exc:
                if lineno == 1:
                    continue  # header row
                raise ParseError(str(exc), line=lineno) from exc
            t = tracks.setdefault(ent, {"video_id": vid, "frames": {}})
            t["frames"][ts] = lab
    entries = []
    for ent in sorted(tracks):
        t = tracks[ent]
        labels = [t["frames"][ts] for ts in sorted(t["frames"])]
        safe = ent.replace(":", "_")
        entries.append(TrackManifestEntry(ent, t["video_id"], str(Path(face_root) / t["video_id"] / safe),
                                          str(Path(audio_root) / t["video_id"] / f"{safe}.wav"), fps, labels, split))
    return entries
