"""Speaker detection backend.

Audio-visual cross-attention, speaker-embedding replication and the three
fusion topologies (``Fus1``, ``Fus2``, ``Concat``), the self-attention frame
classifier, and the frame-level cross-entropy loss.

All sequence tensors are ``(B, T, D)``; unbatched ``(T, D)`` input is accepted
by the functional helpers and returned unbatched.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import AlignmentError, ConfigError


class FusionMode(str, enum.Enum):
    FUS1 = "Fus1"
    FUS2 = "Fus2"
    CONCAT = "Concat"

    @classmethod
    def parse(cls, value: "str | FusionMode") -> "FusionMode":
        if isinstance(value, FusionMode):
            return value
        for mode in cls:
            if str(value).lower() == mode.value.lower():
                return mode
        raise ConfigError(f"unknown fusion mode {value!r}; expected one of {[m.value for m in cls]}")


@dataclass
class AttentionConfig:
    heads: int = 8
    layers: int = 1
    dim: int = 128
    dropout: float = 0.0
    ffn_dim: int = 512
    positional_encoding: bool = False

    def __post_init__(self):
        if self.heads < 1 or self.layers < 1:
            raise ConfigError("heads and layers must be positive")
        for width in (self.dim, 2 * self.dim, 3 * self.dim):
            if width % self.heads:
                raise ConfigError(f"attention width {width} is not divisible by {self.heads} heads")


def scaled_dot_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor):
    """softmax(q k^T / sqrt(d)) v over the last two axes. Returns (output, weights)."""
    logits = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    weights = torch.softmax(logits, dim=-1)
    return weights @ v, weights


class MultiHeadAttention(nn.Module):
    """Multi-head attention where queries and keys/values may have different widths.

    The output width always equals the query width.
    """

    def __init__(self, q_dim: int, kv_dim: int, heads: int, dropout: float = 0.0):
        super().__init__()
        if q_dim % heads:
            raise ConfigError(f"query width {q_dim} is not divisible by {heads} heads")
        self.heads = heads
        self.q_proj = nn.Linear(q_dim, q_dim)
        self.k_proj = nn.Linear(kv_dim, q_dim)
        self.v_proj = nn.Linear(kv_dim, q_dim)
        self.out_proj = nn.Linear(q_dim, q_dim)
        self.dropout = nn.Dropout(dropout)

    def _split(self, x):
        b, t, d = x.shape
        return x.reshape(b, t, self.heads, d // self.heads).transpose(1, 2)

    def core(self, query: torch.Tensor, key_value: torch.Tensor):
        """Projected attention before the output projection; (B, Tq, Dq), (B, H, Tq, Tk)."""
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key_value))
        v = self._split(self.v_proj(key_value))
        out, weights = scaled_dot_attention(q, k, v)
        b, h, t, dh = out.shape
        return out.transpose(1, 2).reshape(b, t, h * dh), weights

    def forward(self, query, key_value):
        out, weights = self.core(query, key_value)
        return self.dropout(self.out_proj(out)), weights


class AttentionLayer(nn.Module):
    """One transformer layer: attention with a residual on the query stream, then a feed-forward block."""

    def __init__(self, q_dim: int, kv_dim: int, heads: int, ffn_dim: int, dropout: float = 0.0):
        super().__init__()
        self.attn = MultiHeadAttention(q_dim, kv_dim, heads, dropout)
        self.norm1 = nn.LayerNorm(q_dim)
        self.ffn = nn.Sequential(nn.Linear(q_dim, ffn_dim), nn.ReLU(), nn.Dropout(dropout), nn.Linear(ffn_dim, q_dim))
        self.norm2 = nn.LayerNorm(q_dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, query, key_value):
        a, weights = self.attn(query, key_value)
        x = self.norm1(query + a)
        x = self.norm2(x + self.dropout(self.ffn(x)))
        return x, weights


def _batched(*xs):
    unbatched = xs[0].dim() == 2
    return unbatched, [x.unsqueeze(0) if x.dim() == 2 else x for x in xs]


def _check_lengths(*xs):
    lengths = {x.shape[-2] for x in xs}
    if len(lengths) != 1:
        raise AlignmentError(f"sequence lengths differ: {sorted(lengths)}")


def cross_attention(f_a: torch.Tensor, f_v: torch.Tensor,
                    a2v: MultiHeadAttention, v2a: MultiHeadAttention):
    """Bidirectional audio-visual attention.

    ``F_a->v`` takes queries from the visual stream and keys/values from audio;
    ``F_v->a`` swaps the roles. Returns ``(F_a->v, F_v->a, (w_a2v, w_v2a))``
    using the projected attention outputs without the output projection.
    """
    _check_lengths(f_a, f_v)
    unbatched, (f_a, f_v) = _batched(f_a, f_v)
    out_av, w_av = a2v.core(f_v, f_a)
    out_va, w_va = v2a.core(f_a, f_v)
    if unbatched:
        return out_av[0], out_va[0], (w_av[0], w_va[0])
    return out_av, out_va, (w_av, w_va)


class CrossModalAttention(nn.Module):
    def __init__(self, dim: int, heads: int, ffn_dim: int, dropout: float = 0.0):
        super().__init__()
        self.a2v = AttentionLayer(dim, dim, heads, ffn_dim, dropout)
        self.v2a = AttentionLayer(dim, dim, heads, ffn_dim, dropout)

    def forward(self, f_a, f_v):
        _check_lengths(f_a, f_v)
        a2v, w_av = self.a2v(f_v, f_a)
        v2a, w_va = self.v2a(f_a, f_v)
        return a2v, v2a, (w_av, w_va)


def concat_av(a2v: torch.Tensor, v2a: torch.Tensor) -> torch.Tensor:
    """Frame-wise join: channels [0:d] from F_a->v, [d:2d] from F_v->a."""
    _check_lengths(a2v, v2a)
    return torch.cat([a2v, v2a], dim=-1)


def replicate_speaker(f_s: torch.Tensor, length: int, projection: nn.Linear,
                      normalize: bool = False) -> torch.Tensor:
    """Project a (B, D_s) speaker vector to the model width and copy it to all ``length`` frames.

    The projection has no bias, so a null (all-zero) speaker stays exactly zero.
    """
    if length < 1:
        raise AlignmentError("cannot replicate a speaker embedding over zero frames")
    if projection.bias is not None:
        raise ConfigError("speaker projection must be bias-free")
    unbatched = f_s.dim() == 1
    if unbatched:
        f_s = f_s.unsqueeze(0)
    if normalize:
        norm = f_s.norm(dim=-1, keepdim=True)
        f_s = torch.where(norm > 0, f_s / norm.clamp_min(1e-12), f_s)
    s = projection(f_s).unsqueeze(1).expand(-1, length, -1)
    return s[0] if unbatched else s


class SpeakerFusion(nn.Module):
    """Injects the replicated speaker stream into the audio-visual stream.

    Output width is ``3 * dim`` in every mode:

    * Concat: ``[F_av | S]``
    * Fus1:   ``[attn(q=F_a->v, kv=S) | attn(q=S, kv=F_a->v) | F_v->a]``
    * Fus2:   ``[attn(q=F_av, kv=S) | attn(q=S, kv=F_av)]``
    """

    def __init__(self, mode: FusionMode | str, dim: int, heads: int, ffn_dim: int, dropout: float = 0.0):
        super().__init__()
        self.mode = FusionMode.parse(mode)
        self.dim = dim
        if self.mode is FusionMode.FUS1:
            self.av_to_s = AttentionLayer(dim, dim, heads, ffn_dim, dropout)
            self.s_to_av = AttentionLayer(dim, dim, heads, ffn_dim, dropout)
        elif self.mode is FusionMode.FUS2:
            self.av_to_s = AttentionLayer(2 * dim, dim, heads, ffn_dim, dropout)
            self.s_to_av = AttentionLayer(dim, 2 * dim, heads, ffn_dim, dropout)

    @property
    def out_dim(self) -> int:
        return 3 * self.dim

    def forward(self, a2v, v2a, f_av, s_hat):
        _check_lengths(a2v, v2a, f_av, s_hat)
        if self.mode is FusionMode.CONCAT:
            return torch.cat([f_av, s_hat], dim=-1), ()
        stream = a2v if self.mode is FusionMode.FUS1 else f_av
        x1, w1 = self.av_to_s(stream, s_hat)
        x2, w2 = self.s_to_av(s_hat, stream)
        parts = [x1, x2, v2a] if self.mode is FusionMode.FUS1 else [x1, x2]
        return torch.cat(parts, dim=-1), (w1, w2)


def fuse(a2v, v2a, f_av, s_hat, mode: FusionMode | str, module: SpeakerFusion):
    mode = FusionMode.parse(mode)
    if module.mode is not mode:
        raise ConfigError(f"fusion module was built for {module.mode.value}, asked for {mode.value}")
    unbatched, (a2v, v2a, f_av, s_hat) = _batched(a2v, v2a, f_av, s_hat)
    out, weights = module(a2v, v2a, f_av, s_hat)
    return (out[0], weights) if unbatched else (out, weights)


def sinusoidal_positions(length: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    freq = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    pe = torch.zeros(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq[: dim // 2])
    return pe.to(dtype)


class SelfAttentionClassifier(nn.Module):
    """Transformer layer(s) over F_avs, then a 2-way linear head and softmax."""

    def __init__(self, in_dim: int, cfg: AttentionConfig):
        super().__init__()
        if in_dim % cfg.heads:
            raise ConfigError(f"classifier width {in_dim} is not divisible by {cfg.heads} heads")
        self.in_dim = in_dim
        self.positional = cfg.positional_encoding
        self.layers = nn.ModuleList(
            [AttentionLayer(in_dim, in_dim, cfg.heads, cfg.ffn_dim, cfg.dropout) for _ in range(cfg.layers)])
        self.head = nn.Linear(in_dim, 2)

    def forward(self, f_avs: torch.Tensor):
        """Returns ``(probs, logits, attention_weights)``; probs[..., t] is P(frame t active)."""
        if f_avs.shape[-1] != self.in_dim:
            raise ConfigError(f"expected width {self.in_dim}, got {f_avs.shape[-1]}")
        if f_avs.shape[-2] == 0:
            raise AlignmentError("empty sequence")
        unbatched, (x,) = _batched(f_avs)
        if self.positional:
            x = x + sinusoidal_positions(x.shape[1], x.shape[2], x.dtype)
        weights = []
        for layer in self.layers:
            x, w = layer(x, x)
            weights.append(w)
        logits = self.head(x)
        probs = torch.softmax(logits, dim=-1)[..., 1]
        if unbatched:
            return probs[0], logits[0], [w[0] for w in weights]
        return probs, logits, weights


def self_attention_classify(f_avs: torch.Tensor, classifier: SelfAttentionClassifier) -> torch.Tensor:
    return classifier(f_avs)[0]


def asd_loss(probs: torch.Tensor, labels: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    """Mean per-frame binary cross-entropy with probabilities clipped to [eps, 1 - eps]."""
    probs = torch.as_tensor(probs)
    labels = torch.as_tensor(labels, dtype=probs.dtype)
    if probs.shape != labels.shape:
        raise AlignmentError(f"prediction shape {tuple(probs.shape)} != label shape {tuple(labels.shape)}")
    p = probs.clamp(eps, 1.0 - eps)
    return -(labels * torch.log(p) + (1.0 - labels) * torch.log(1.0 - p)).mean()
