"""Frontend encoders: visual temporal encoder, SE audio encoder, frozen speaker encoder.

The visual and audio encoders are trainable torch modules producing one
128-dim embedding per video frame. The speaker encoder sits behind a small
interface and never takes part in autograd; the built-in ``stub`` backend is a
fixed random projection of the long-term average log-mel spectrum.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, ShortEnrollment
from .features import FACE_SIZE, N_MFCC, AudioClip, FaceFrameSequence, MfccConfig


@dataclass
class EncoderConfig:
    frontend_channels: tuple[int, ...] = (8, 16, 32)
    frontend_pool: int = 7
    frontend_dim: int = 128
    visual_blocks: int = 5
    visual_kernel: int = 5
    audio_channels: int = 64
    audio_blocks: int = 2
    audio_kernel: int = 3
    se_reduction: int = 4
    mfcc_per_frame: int = 4
    embed_dim: int = 128
    speaker_dim: int = 192
    normalize_speaker: bool = False

    def __post_init__(self):
        self.frontend_channels = tuple(int(c) for c in self.frontend_channels)
        if not self.frontend_channels:
            raise ConfigError("visual frontend needs at least one conv layer")
        if self.audio_channels % self.se_reduction:
            raise ConfigError("audio_channels must be divisible by se_reduction")
        if self.visual_kernel % 2 == 0 or self.audio_kernel % 2 == 0:
            raise ConfigError("temporal kernels must be odd to preserve length")


@dataclass
class EmbeddingSequence:
    values: torch.Tensor
    frame_rate: float = 25.0

    def __len__(self):
        return self.values.shape[-2]


@dataclass
class SpeakerEmbedding:
    values: np.ndarray
    is_null: bool = False

    @classmethod
    def null(cls, dim: int) -> "SpeakerEmbedding":
        return cls(np.zeros(dim), is_null=True)


# ------------------------------------------------------------------- visual


class DepthwiseSeparableBlock(nn.Module):
    """ReLU -> BN -> depthwise conv -> pointwise conv, with an identity shortcut."""

    def __init__(self, channels: int, kernel: int):
        super().__init__()
        self.relu = nn.ReLU()
        self.bn = nn.BatchNorm1d(channels)
        self.depthwise = nn.Conv1d(channels, channels, kernel, padding=kernel // 2, groups=channels, bias=False)
        self.pointwise = nn.Conv1d(channels, channels, 1)

    def forward(self, x):
        return x + self.pointwise(self.depthwise(self.bn(self.relu(x))))


class VisualEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        layers = []
        cin = 1
        for i, c in enumerate(cfg.frontend_channels):
            k, s = (5, 4) if i == 0 else (3, 2)
            layers += [nn.Conv2d(cin, c, k, stride=s, padding=k // 2, bias=False), nn.BatchNorm2d(c), nn.ReLU()]
            cin = c
        layers += [nn.AdaptiveAvgPool2d(cfg.frontend_pool), nn.Flatten(),
                   nn.Linear(cin * cfg.frontend_pool ** 2, cfg.frontend_dim)]
        self.frontend = nn.Sequential(*layers)
        self.temporal = nn.Sequential(*[DepthwiseSeparableBlock(cfg.frontend_dim, cfg.visual_kernel)
                                        for _ in range(cfg.visual_blocks)])
        self.reduce = nn.Conv1d(cfg.frontend_dim, cfg.embed_dim, 1)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """(B, T, 112, 112) -> (B, T, embed_dim)."""
        if frames.dim() != 4 or frames.shape[-2:] != (FACE_SIZE, FACE_SIZE):
            raise ConfigError(f"expected (B, T, {FACE_SIZE}, {FACE_SIZE}) face frames, got {tuple(frames.shape)}")
        b, t = frames.shape[:2]
        per_frame = self.frontend(frames.reshape(b * t, 1, FACE_SIZE, FACE_SIZE))
        x = per_frame.reshape(b, t, -1).transpose(1, 2)
        return self.reduce(self.temporal(x)).transpose(1, 2)


# -------------------------------------------------------------------- audio


class SqueezeExcite(nn.Module):
    def __init__(self, channels: int, reduction: int):
        super().__init__()
        self.fc1 = nn.Linear(channels, channels // reduction)
        self.fc2 = nn.Linear(channels // reduction, channels)

    def gate(self, x: torch.Tensor) -> torch.Tensor:
        """Per-channel scale in (0, 1) from time-pooled activations; x is (B, C, T)."""
        return torch.sigmoid(self.fc2(torch.relu(self.fc1(x.mean(dim=2)))))

    def forward(self, x):
        return x * self.gate(x).unsqueeze(-1)


class SEResBlock(nn.Module):
    def __init__(self, channels: int, kernel: int, reduction: int):
        super().__init__()
        self.conv1 = nn.Conv1d(channels, channels, kernel, padding=kernel // 2, bias=False)
        self.bn1 = nn.BatchNorm1d(channels)
        self.conv2 = nn.Conv1d(channels, channels, kernel, padding=kernel // 2, bias=False)
        self.bn2 = nn.BatchNorm1d(channels)
        self.se = SqueezeExcite(channels, reduction)

    def forward(self, x):
        y = torch.relu(self.bn1(self.conv1(x)))
        y = self.se(self.bn2(self.conv2(y)))
        return torch.relu(x + y)


class AudioEncoder(nn.Module):
    """Reduced SE-ResNet over the frame-grouped MFCC sequence."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.audio_channels
        self.stem = nn.Sequential(
            nn.Conv1d(cfg.mfcc_per_frame * N_MFCC, c, cfg.audio_kernel, padding=cfg.audio_kernel // 2, bias=False),
            nn.BatchNorm1d(c), nn.ReLU())
        self.blocks = nn.Sequential(*[SEResBlock(c, cfg.audio_kernel, cfg.se_reduction)
                                      for _ in range(cfg.audio_blocks)])
        self.reduce = nn.Conv1d(c, cfg.embed_dim, 1)

    def forward(self, mfcc: torch.Tensor) -> torch.Tensor:
        """(B, T, k, 13) -> (B, T, embed_dim)."""
        if mfcc.dim() != 4 or mfcc.shape[-1] != N_MFCC or mfcc.shape[-2] != self.cfg.mfcc_per_frame:
            raise ConfigError(
                f"expected (B, T, {self.cfg.mfcc_per_frame}, {N_MFCC}) aligned MFCCs, got {tuple(mfcc.shape)}")
        b, t = mfcc.shape[:2]
        x = mfcc.reshape(b, t, -1).transpose(1, 2)
        return self.reduce(self.blocks(self.stem(x))).transpose(1, 2)


def _run(module: nn.Module, x: torch.Tensor, train: bool) -> torch.Tensor:
    was = module.training
    module.train(train)
    try:
        return module(x)
    finally:
        module.train(was)


def visual_encode(faces: FaceFrameSequence, encoder: VisualEncoder, train: bool = False) -> EmbeddingSequence:
    p = next(encoder.parameters())
    x = torch.as_tensor(faces.frames, dtype=p.dtype).unsqueeze(0)
    return EmbeddingSequence(_run(encoder, x, train)[0], faces.fps)


def audio_encode(aligned_mfcc: np.ndarray, encoder: AudioEncoder, train: bool = False,
                 frame_rate: float = 25.0) -> EmbeddingSequence:
    p = next(encoder.parameters())
    x = torch.as_tensor(np.asarray(aligned_mfcc), dtype=p.dtype).unsqueeze(0)
    return EmbeddingSequence(_run(encoder, x, train)[0], frame_rate)


# ------------------------------------------------------------------ speaker


class SpeakerEncoderInterface(Protocol):
    name: str
    dim: int
    min_duration: float

    def embed(self, clip: AudioClip) -> np.ndarray: ...

    def state_dict(self) -> dict[str, np.ndarray]: ...


class ProjectionSpeakerEncoder:
    """Fixed linear map of standardised long-term-average log-mel statistics.

    Utterance length only enters through the averaging, so every clip yields
    a vector of the same dimension. Weights are read-only after construction.
    """

    def __init__(self, projection: np.ndarray, name: str = "projection",
                 min_duration: float = 0.5, mfcc_cfg: MfccConfig | None = None):
        projection = np.array(projection, dtype=np.float64)
        self.mfcc_cfg = mfcc_cfg or MfccConfig(fmin=300.0)
        if projection.ndim != 2 or projection.shape[1] != self.mfcc_cfg.n_mels:
            raise ConfigError(
                f"projection must have shape (dim, {self.mfcc_cfg.n_mels}), got {projection.shape}")
        projection.flags.writeable = False
        self._projection = projection
        self.name = name
        self.dim = projection.shape[0]
        self.min_duration = min_duration

    def spectral_statistics(self, clip: AudioClip) -> np.ndarray:
        from .features import log_mel_energies, mel_filterbank

        cfg = self.mfcc_cfg
        power = np.exp(log_mel_energies(clip, cfg)).mean(axis=0)
        # divide out each filter's bandwidth so a flat spectrum gives a flat profile
        frame_len = int(round(cfg.window * clip.sample_rate))
        n_fft = max(cfg.n_fft, 1 << (frame_len - 1).bit_length())
        width = mel_filterbank(clip.sample_rate, n_fft, cfg.n_mels, cfg.fmin, cfg.fmax).sum(axis=1)
        ltas = np.log(power / np.maximum(width, 1e-12) + cfg.log_floor)
        centred = ltas - ltas.mean()
        return centred / (centred.std() + 1e-8)

    def embed(self, clip: AudioClip) -> np.ndarray:
        return self._projection @ self.spectral_statistics(clip)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {"projection": self._projection.copy()}


def stub_speaker_encoder(dim: int = 192, n_mels: int = 40) -> ProjectionSpeakerEncoder:
    seed = zlib.crc32(b"tsasd-stub-speaker-encoder")
    # orthonormal columns: the projection preserves angles between spectral statistics
    q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((dim, n_mels)))
    proj = q * np.sqrt(dim / n_mels)
    return ProjectionSpeakerEncoder(proj, name="stub")


def load_speaker_encoder(spec: str | Path = "stub", dim: int = 192) -> ProjectionSpeakerEncoder:
    """Resolve a backend: ``"stub"`` or a path to an ``.npz`` holding a ``projection`` array."""
    if str(spec) == "stub":
        return stub_speaker_encoder(dim)
    path = Path(spec)
    if path.suffix != ".npz":
        raise ConfigError(f"unknown speaker encoder backend {spec!r}")
    if not path.is_file():
        raise ConfigError(f"speaker encoder weights not found: {path}")
    with np.load(path) as data:
        if "projection" not in data:
            raise ConfigError(f"{path} has no 'projection' array")
        min_dur = float(data["min_duration"]) if "min_duration" in data else 0.5
        return ProjectionSpeakerEncoder(data["projection"], name=str(path), min_duration=min_dur)


def save_speaker_encoder(path: str | Path, encoder: ProjectionSpeakerEncoder) -> None:
    np.savez(path, projection=encoder.state_dict()["projection"], min_duration=encoder.min_duration)


def speaker_encode(enrollment: AudioClip | None, encoder: SpeakerEncoderInterface) -> SpeakerEmbedding:
    """Embed an enrollment clip; ``None`` maps to the all-zero null embedding."""
    if enrollment is None:
        return SpeakerEmbedding.null(encoder.dim)
    if enrollment.duration < encoder.min_duration:
        raise ShortEnrollment(
            f"enrollment of {enrollment.duration:.3f}s is shorter than {encoder.min_duration}s")
    return SpeakerEmbedding(np.asarray(encoder.embed(enrollment), dtype=np.float64), is_null=False)
