"""End-to-end target-speaker active speaker detector."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
from torch import nn

from .encoders import AudioEncoder, EncoderConfig, VisualEncoder
from .errors import ConfigError
from .fusion import (AttentionConfig, CrossModalAttention, FusionMode, SelfAttentionClassifier,
                     SpeakerFusion, concat_av, replicate_speaker)


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    mode: FusionMode = FusionMode.CONCAT

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if isinstance(self.attention, dict):
            self.attention = AttentionConfig(**self.attention)
        self.mode = FusionMode.parse(self.mode)
        if self.encoder.embed_dim != self.attention.dim:
            raise ConfigError(
                f"encoder embed_dim {self.encoder.embed_dim} != attention dim {self.attention.dim}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        d["encoder"]["frontend_channels"] = list(self.encoder.frontend_channels)
        return d


class TSTalkNet(nn.Module):
    """Visual + audio encoders, cross-attention, speaker fusion and self-attention classifier.

    The speaker embedding arrives precomputed; the speaker encoder that made
    it is not part of this module and receives no gradients.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.attention.dim
        a = cfg.attention
        self.visual = VisualEncoder(cfg.encoder)
        self.audio = AudioEncoder(cfg.encoder)
        self.cross = CrossModalAttention(d, a.heads, a.ffn_dim, a.dropout)
        self.speaker_proj = nn.Linear(cfg.encoder.speaker_dim, d, bias=False)
        self.fusion = SpeakerFusion(cfg.mode, d, a.heads, a.ffn_dim, a.dropout)
        self.classifier = SelfAttentionClassifier(self.fusion.out_dim, a)

    @property
    def mode(self) -> FusionMode:
        return self.cfg.mode

    def forward(self, faces: torch.Tensor, mfcc: torch.Tensor, speaker: torch.Tensor,
                ablate_speaker: bool = False, details: bool = False):
        """Per-frame speaking probabilities, shape (B, T).

        ``ablate_speaker`` skips the speaker branch and feeds literal zeros in
        its place (Concat mode only), i.e. the speaker-free baseline.
        """
        f_v = self.visual(faces)
        f_a = self.audio(mfcc)
        a2v, v2a, w_cross = self.cross(f_a, f_v)
        f_av = concat_av(a2v, v2a)
        t = f_av.shape[1]
        if ablate_speaker:
            if self.mode is not FusionMode.CONCAT:
                raise ConfigError("speaker ablation is defined for Concat mode only")
            f_avs = torch.cat([f_av, f_av.new_zeros(f_av.shape[0], t, self.cfg.attention.dim)], dim=-1)
            w_fuse = ()
        else:
            s_hat = replicate_speaker(speaker.to(f_av.dtype), t, self.speaker_proj,
                                      self.cfg.encoder.normalize_speaker)
            f_avs, w_fuse = self.fusion(a2v, v2a, f_av, s_hat)
        probs, logits, w_self = self.classifier(f_avs)
        if details:
            return probs, {"F_v": f_v, "F_a": f_a, "F_av": f_av, "F_avs": f_avs, "logits": logits,
                           "cross_weights": w_cross, "fusion_weights": w_fuse, "self_weights": w_self}
        return probs


def forward(model: TSTalkNet, faces, mfcc, speaker, ablate_speaker: bool = False) -> torch.Tensor:
    """Eval-mode inference for a single unbatched track: (T,112,112), (T,k,13), (D_s,) -> (T,)."""
    was = model.training
    model.eval()
    try:
        p = next(model.parameters())
        with torch.no_grad():
            out = model(torch.as_tensor(faces, dtype=p.dtype)[None], torch.as_tensor(mfcc, dtype=p.dtype)[None],
                        torch.as_tensor(speaker, dtype=p.dtype)[None], ablate_speaker=ablate_speaker)
        return out[0]
    finally:
        model.train(was)
