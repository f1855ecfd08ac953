"""Audio and face-crop preprocessing.

Turns raw waveforms into 13-dim MFCC sequences, raw face crops into
112x112 grayscale tracks, groups MFCC frames under video frames, and applies
track-coherent visual augmentation. Everything here is a pure function of its
arguments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np
from scipy.fft import dct
from scipy.io import wavfile

from .errors import AlignmentError, EmptyTrack, InvalidAudio, IoError, ShortInput

FACE_SIZE = 112
N_MFCC = 13


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise InvalidAudio(f"sample_rate must be positive, got {self.sample_rate}")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def slice(self, start: float, end: float) -> "AudioClip":
        """Sub-clip covering [start, end) seconds."""
        a = int(round(start * self.sample_rate))
        b = int(round(end * self.sample_rate))
        return AudioClip(self.samples[a:b], self.sample_rate)


@dataclass
class MfccConfig:
    hop: float = 0.010
    window: float = 0.025
    n_mels: int = 40
    n_fft: int = 512
    fmin: float = 0.0
    fmax: float | None = None
    log_floor: float = 1e-10


@dataclass
class MfccSequence:
    frames: np.ndarray
    hop: float = 0.010
    window: float = 0.025

    def __len__(self):
        return self.frames.shape[0]


@dataclass
class FaceFrameSequence:
    frames: np.ndarray
    fps: float = 25.0

    def __len__(self):
        return self.frames.shape[0]


@dataclass
class FaceTrack:
    track_id: str
    frames: FaceFrameSequence
    labels: np.ndarray | None = None
    video_id: str = ""

    def __post_init__(self):
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if len(self.labels) != len(self.frames):
                raise AlignmentError(
                    f"track {self.track_id!r}: {len(self.labels)} labels for {len(self.frames)} frames")

    @property
    def fps(self) -> float:
        return self.frames.fps

    def __len__(self):
        return len(self.frames)


@dataclass
class AugmentConfig:
    flip: bool = True
    rotate: bool = True
    crop: bool = True
    flip_prob: float = 0.5
    max_rotation: float = 15.0
    min_crop_area: float = 0.8


# --------------------------------------------------------------------- MFCC


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular HTK-mel filters evaluated at the rFFT bin frequencies, shape (n_mels, n_fft//2+1)."""
    fmax = sample_rate / 2.0 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def frame_signal(x: np.ndarray, frame_len: int, hop_len: int) -> np.ndarray:
    n = (len(x) - frame_len) // hop_len + 1
    idx = np.arange(frame_len)[None, :] + hop_len * np.arange(n)[:, None]
    return x[idx]


def log_mel_energies(clip: AudioClip, cfg: MfccConfig | None = None) -> np.ndarray:
    """Per-frame log mel-band energies, shape (T_a, n_mels)."""
    cfg = cfg or MfccConfig()
    if not np.all(np.isfinite(clip.samples)):
        raise InvalidAudio("audio contains NaN or Inf samples")
    sr = clip.sample_rate
    frame_len = int(round(cfg.window * sr))
    hop_len = int(round(cfg.hop * sr))
    if len(clip.samples) < frame_len:
        raise ShortInput(
            f"clip of {clip.duration:.4f}s is shorter than one {cfg.window}s analysis window")
    n_fft = max(cfg.n_fft, 1 << (frame_len - 1).bit_length())
    frames = frame_signal(clip.samples, frame_len, hop_len) * np.hamming(frame_len)
    power = np.abs(np.fft.rfft(frames, n_fft, axis=1)) ** 2 / n_fft
    fb = mel_filterbank(sr, n_fft, cfg.n_mels, cfg.fmin, cfg.fmax)
    return np.log(np.maximum(power @ fb.T, cfg.log_floor))


def extract_mfcc(clip: AudioClip, hop: float = 0.010, window: float = 0.025,
                 cfg: MfccConfig | None = None) -> MfccSequence:
    """13 MFCCs per frame: Hamming window, power spectrum, 40 mel bands, log, orthonormal DCT-II.

    Raises ShortInput when the clip is shorter than one window and
    InvalidAudio for non-finite samples.
    """
    cfg = cfg or MfccConfig()
    cfg = MfccConfig(**{**cfg.__dict__, "hop": hop, "window": window})
    logmel = log_mel_energies(clip, cfg)
    coeffs = dct(logmel, type=2, axis=1, norm="ortho")[:, :N_MFCC]
    return MfccSequence(coeffs, hop=hop, window=window)


def mfcc_frame_count(duration: float, hop: float = 0.010, window: float = 0.025,
                     sample_rate: int = 16000) -> int:
    n = int(round(duration * sample_rate))
    w = int(round(window * sample_rate))
    h = int(round(hop * sample_rate))
    return 0 if n < w else (n - w) // h + 1


def mfcc_per_video_frame(fps: float, hop: float) -> int:
    return int(round((1.0 / fps) / hop))


def align_audio_to_video(mfcc: MfccSequence, video_frames: int, fps: float = 25.0) -> np.ndarray:
    """Group MFCC frames under video frames, returning a (T_v, k, 13) array.

    Audio beyond the video is dropped; a short tail is zero-padded so the
    output always has exactly ``video_frames`` rows.
    """
    if video_frames < 1:
        raise AlignmentError("video must have at least one frame")
    k = mfcc_per_video_frame(fps, mfcc.hop)
    if k < 1:
        raise AlignmentError(f"MFCC hop {mfcc.hop}s is coarser than one video frame at {fps} fps")
    audio_dur = len(mfcc) * mfcc.hop
    video_dur = video_frames / fps
    if audio_dur < 0.5 * video_dur:
        raise AlignmentError(
            f"audio covers {audio_dur:.3f}s, less than half of the {video_dur:.3f}s video")
    need = video_frames * k
    out = np.zeros((need, mfcc.frames.shape[1]), dtype=mfcc.frames.dtype)
    take = min(need, len(mfcc))
    out[:take] = mfcc.frames[:take]
    return out.reshape(video_frames, k, mfcc.frames.shape[1])


# -------------------------------------------------------------------- faces


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    # half-pixel centres, edge clamp (same convention as cv2 INTER_LINEAR)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w = src - i0
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - w)
    np.add.at(m, (rows, i1), w)
    return m


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.shape == (out_h, out_w):
        return image.copy()
    return _interp_matrix(image.shape[0], out_h) @ image @ _interp_matrix(image.shape[1], out_w).T


def to_grayscale(image: np.ndarray) -> np.ndarray:
    """Single-channel intensity in [0, 1]. uint8 input is divided by 255; RGB uses BT.601 luma."""
    img = np.asarray(image)
    scale = 255.0 if img.dtype == np.uint8 else 1.0
    img = img.astype(np.float64) / scale
    if img.ndim == 3:
        if img.shape[2] == 1:
            img = img[..., 0]
        else:
            img = img[..., :3] @ np.array([0.299, 0.587, 0.114])
    elif img.ndim != 2:
        raise ValueError(f"expected a 2-D or 3-D image, got shape {img.shape}")
    return np.clip(img, 0.0, 1.0)


def preprocess_faces(raw_frames: Sequence[np.ndarray] | np.ndarray, fps: float = 25.0) -> FaceFrameSequence:
    """Grayscale, bilinear-resize to 112x112 and scale every crop to [0, 1]."""
    if raw_frames is None or len(raw_frames) == 0:
        raise EmptyTrack("face track has no frames")
    out = np.empty((len(raw_frames), FACE_SIZE, FACE_SIZE), dtype=np.float32)
    for i, frame in enumerate(raw_frames):
        if np.asarray(frame).size == 0:
            raise EmptyTrack(f"frame {i} is empty")
        out[i] = resize_bilinear(to_grayscale(frame), FACE_SIZE, FACE_SIZE)
    return FaceFrameSequence(np.clip(out, 0.0, 1.0), fps=fps)


def augment_params(rng_seed: int, cfg: AugmentConfig) -> dict:
    rng = np.random.default_rng(rng_seed)
    # draw every variate unconditionally so toggling one transform does not reshuffle the others
    flip_draw, angle_draw, area_draw, ox, oy = rng.random(5)
    side = FACE_SIZE * math.sqrt(cfg.min_crop_area + (1.0 - cfg.min_crop_area) * area_draw)
    return {
        "flip": cfg.flip and flip_draw < cfg.flip_prob,
        "angle": (2.0 * angle_draw - 1.0) * cfg.max_rotation if cfg.rotate else 0.0,
        "crop": (ox * (FACE_SIZE - side), oy * (FACE_SIZE - side), side) if cfg.crop else None,
    }


def augment_visual(frames: FaceFrameSequence, rng_seed: int,
                   cfg: AugmentConfig | None = None) -> FaceFrameSequence:
    """Random flip, rotation and crop, one parameter draw shared by the whole track."""
    cfg = cfg or AugmentConfig()
    p = augment_params(rng_seed, cfg)
    x = frames.frames
    if p["angle"] == 0.0 and p["crop"] is None:
        out = x[:, :, ::-1] if p["flip"] else x
        return FaceFrameSequence(np.ascontiguousarray(out), frames.fps)

    c = (FACE_SIZE - 1) / 2.0
    rot = cv2.getRotationMatrix2D((c, c), p["angle"], 1.0)
    m = np.vstack([rot, [0.0, 0.0, 1.0]])
    if p["crop"] is not None:
        x0, y0, side = p["crop"]
        s = FACE_SIZE / side
        m = np.array([[s, 0.0, -x0 * s], [0.0, s, -y0 * s], [0.0, 0.0, 1.0]]) @ m
    if p["flip"]:
        m = np.array([[-1.0, 0.0, FACE_SIZE - 1.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]) @ m
    out = np.empty_like(x, dtype=np.float32)
    for i in range(len(x)):
        out[i] = cv2.warpAffine(x[i].astype(np.float32), m[:2], (FACE_SIZE, FACE_SIZE),
                                flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE)
    return FaceFrameSequence(np.clip(out, 0.0, 1.0), frames.fps)


# ---------------------------------------------------------------------- I/O


def read_wav(path: str | Path) -> AudioClip:
    try:
        sr, data = wavfile.read(str(path))
    except (OSError, ValueError) as exc:
        raise IoError(f"cannot read audio {path}: {exc}") from exc
    if data.ndim > 1:
        data = data.mean(axis=1)
    if np.issubdtype(data.dtype, np.integer):
        data = data.astype(np.float64) / float(np.iinfo(data.dtype).max + 1)
    return AudioClip(data, int(sr))


def write_wav(path: str | Path, clip: AudioClip) -> None:
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype(np.int16)
    try:
        wavfile.write(str(path), clip.sample_rate, pcm)
    except OSError as exc:
        raise IoError(f"cannot write audio {path}: {exc}") from exc


def count_face_frames(path: str | Path) -> int:
    path = Path(path)
    if path.is_dir():
        return len(_image_files(path))
    return int(np.load(path, mmap_mode="r").shape[0])


def _image_files(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in {".jpg", ".jpeg", ".png", ".bmp"})


def load_face_frames(path: str | Path, fps: float = 25.0) -> FaceFrameSequence:
    """Load a packed ``.npy`` tensor (T x H x W, uint8 or float) or a directory of images."""
    path = Path(path)
    try:
        if path.is_dir():
            raw = [cv2.imread(str(p), cv2.IMREAD_GRAYSCALE) for p in _image_files(path)]
            if any(r is None for r in raw):
                raise IoError(f"unreadable image in {path}")
        else:
            raw = np.load(path)
    except (OSError, ValueError) as exc:
        raise IoError(f"cannot read face frames {path}: {exc}") from exc
    if isinstance(raw, np.ndarray) and raw.ndim == 3 and raw.shape[1:] == (FACE_SIZE, FACE_SIZE):
        scale = 255.0 if raw.dtype == np.uint8 else 1.0
        if len(raw) == 0:
            raise EmptyTrack(f"{path} holds no frames")
        return FaceFrameSequence(np.clip(raw.astype(np.float32) / scale, 0.0, 1.0), fps)
    return preprocess_faces(raw, fps)
