"""Run configuration, training loop, checkpoints and evaluation."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import yaml

from .dataset import PreparedTrack, TrackCache, TrackManifestEntry, load_manifest, make_batches
from .encoders import ProjectionSpeakerEncoder, load_speaker_encoder
from .errors import ConfigError, IoError, ShortEnrollment
from .features import AugmentConfig
from .fusion import asd_loss
from .library import FaceSpeakerLibrary, build_library, enroll_lookup_segment, load_face_embedder, load_library
from .metrics import evaluate as pooled_metrics
from .metrics import stratified_report
from .model import ModelConfig, TSTalkNet

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "tsasd-checkpoint"
CHECKPOINT_VERSION = 1
EVAL_ENROLL_SEED = 2024


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    manifest: str | None = None
    library: str | None = None  # None: build from the manifest with the stub face embedder
    out_dir: str = "runs/default"
    speaker_encoder: str = "stub"
    face_embedder: str = "stub"
    library_threshold: float = 0.7
    lr: float = 1e-4
    lr_decay: float = 0.05  # fraction removed per epoch
    epochs: int = 10
    batch_size: int = 4
    seed: int = 0
    augment: bool = True
    augment_cfg: AugmentConfig = field(default_factory=AugmentConfig)
    no_enroll: bool = False
    allow_self_enroll: bool = False
    min_enroll_duration: float = 0.5
    eval_enroll_seed: int = EVAL_ENROLL_SEED
    val_split: str = "val"
    dtype: str = "float32"
    threads: int = 1

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if isinstance(self.augment_cfg, dict):
            self.augment_cfg = AugmentConfig(**self.augment_cfg)
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.lr_decay < 1.0:
            raise ConfigError("lr_decay must lie in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["model"] = self.model.to_dict()
        d["augment_cfg"] = asdict(self.augment_cfg)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        text = json.dumps(self.to_dict(), indent=1) if path.suffix == ".json" else \
            yaml.safe_dump(self.to_dict(), sort_keys=False)
        path.write_text(text)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            doc = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
        except (json.JSONDecodeError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        return cls.from_dict(doc or {})


def learning_rate(cfg: RunConfig, epoch: int) -> float:
    """Rate used during ``epoch`` (1-based)."""
    return cfg.lr * (1.0 - cfg.lr_decay) ** (epoch - 1)


# ---------------------------------------------------------------- enrollment


class Enroller:
    """Maps a track to a speaker vector via the library, caching embeddings per segment."""

    def __init__(self, library: FaceSpeakerLibrary | None, encoder: ProjectionSpeakerEncoder,
                 allow_self: bool = False, min_duration: float = 0.5, disabled: bool = False):
        self.library = library
        self.encoder = encoder
        self.allow_self = allow_self
        self.min_duration = min_duration
        self.disabled = disabled
        self._cache: dict[tuple, np.ndarray] = {}
        self._embedder = None

    def segment(self, track: PreparedTrack, seed: int):
        if self.disabled or self.library is None:
            return None
        if self._embedder is None:
            self._embedder = load_face_embedder(self.library.embedder_id)
        return enroll_lookup_segment(track.track, self.library, seed, self._embedder, self.allow_self,
                                     self.min_duration)

    def __call__(self, track: PreparedTrack, seed: int) -> np.ndarray | None:
        seg = self.segment(track, seed)
        if seg is None:
            return None
        key = (seg.source_track, seg.span)
        if key not in self._cache:
            clip = seg.load_clip()
            if clip.duration < self.encoder.min_duration:
                raise ShortEnrollment(f"segment of {seg.source_track} is {clip.duration:.3f}s")
            self._cache[key] = np.asarray(self.encoder.embed(clip), dtype=np.float64)
        return self._cache[key]


def library_for(cfg: RunConfig, entries: Sequence[TrackManifestEntry], cache: TrackCache) -> FaceSpeakerLibrary:
    if cfg.library:
        return load_library(cfg.library)
    tracks = [cache.get_track(e) for e in entries]
    return build_library([p.track for p in tracks], [p.audio for p in tracks], load_face_embedder(cfg.face_embedder),
                         cfg.library_threshold, audio_paths={p.entry.track_id: p.entry.audio_path for p in tracks})


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path: str | Path, model: TSTalkNet, run_cfg: RunConfig | None = None, extra: dict | None = None):
    doc = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "model_config": model.cfg.to_dict(),
           "state_dict": model.state_dict(), "run_config": run_cfg.to_dict() if run_cfg else None,
           "extra": extra or {}}
    try:
        torch.save(doc, path)
    except (OSError, RuntimeError) as exc:  # torch reports a missing parent directory as RuntimeError
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path: str | Path) -> tuple[TSTalkNet, dict]:
    try:
        doc = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError as exc:
        raise IoError(f"checkpoint not found: {path}") from exc
    except Exception as exc:  # torch raises assorted unpickling errors
        raise ConfigError(f"{path} is not a readable checkpoint: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not a tsasd checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {doc.get('version')}")
    model = TSTalkNet(ModelConfig(**doc["model_config"]))
    first = next(iter(doc["state_dict"].values()))
    model.to(first.dtype)
    try:
        model.load_state_dict(doc["state_dict"])
    except RuntimeError as exc:
        raise ConfigError(f"checkpoint parameters do not fit its config: {exc}") from exc
    model.eval()
    return model, doc


def check_compatible(model: TSTalkNet, entries: Sequence[TrackManifestEntry], encoder_dim: int | None = None,
                     hop: float = 0.010) -> None:
    """ConfigError when the corpus or speaker encoder cannot feed this model."""
    k = model.cfg.encoder.mfcc_per_frame
    for e in entries:
        if round((1.0 / e.fps) / hop) != k:
            raise ConfigError(f"track {e.track_id!r} at {e.fps} fps gives {round((1.0 / e.fps) / hop)} MFCC "
                              f"frames per video frame, model expects {k}")
    if encoder_dim is not None and encoder_dim != model.cfg.encoder.speaker_dim:
        raise ConfigError(f"speaker encoder dim {encoder_dim} != model speaker_dim {model.cfg.encoder.speaker_dim}")


# ---------------------------------------------------------------- train / eval


def predict_tracks(model: TSTalkNet, entries: Sequence[TrackManifestEntry], cache: TrackCache,
                   enroller: Enroller | None, seed: int = EVAL_ENROLL_SEED, ablate_speaker: bool = False,
                   dtype=None) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """track_id -> (scores, labels), eval mode, one track at a time at full length."""
    dtype = dtype or next(model.parameters()).dtype
    speaker_dim = model.cfg.encoder.speaker_dim
    out = {}
    was = model.training
    model.eval()
    try:
        with torch.no_grad():
            for e in entries:
                p = cache.get_track(e)
                vec = enroller(p, seed) if enroller is not None else None
                spk = torch.zeros(1, speaker_dim, dtype=dtype) if vec is None else \
                    torch.as_tensor(vec, dtype=dtype)[None]
                probs = model(torch.as_tensor(p.faces, dtype=dtype)[None], torch.as_tensor(p.mfcc, dtype=dtype)[None],
                              spk, ablate_speaker=ablate_speaker)
                out[e.track_id] = (probs[0].double().numpy(), p.labels.copy())
    finally:
        model.train(was)
    return out


def evaluate_model(model: TSTalkNet, entries: Sequence[TrackManifestEntry], cache: TrackCache,
                   enroller: Enroller | None, seed: int = EVAL_ENROLL_SEED) -> dict:
    per_track = predict_tracks(model, entries, cache, enroller, seed)
    report = pooled_metrics(per_track)
    report["stratified"] = stratified_report(per_track).to_dict()
    report["enroll_seed"] = seed
    return report


def _append_jsonl(path: Path, record: dict) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(record) + "\n")


def train(cfg: RunConfig, entries: Sequence[TrackManifestEntry] | None = None, cache: TrackCache | None = None,
          library: FaceSpeakerLibrary | None = None, encoder: ProjectionSpeakerEncoder | None = None,
          write: bool = True) -> dict:
    """Train one model; returns a summary with the per-epoch log and the best model.

    Writes ``config.yaml``, ``log.jsonl`` and ``best.pt`` under ``cfg.out_dir``
    when ``write`` is set.
    """
    if entries is None:
        if not cfg.manifest:
            raise ConfigError("no manifest given")
        entries = load_manifest(cfg.manifest)
    train_set = [e for e in entries if e.split == "train"]
    val_set = [e for e in entries if e.split == cfg.val_split]
    if not train_set:
        raise ConfigError("manifest has no train tracks")
    encoder = encoder or load_speaker_encoder(cfg.speaker_encoder, cfg.model.encoder.speaker_dim)

    torch.set_num_threads(cfg.threads)
    torch.manual_seed(cfg.seed)
    dtype = cfg.torch_dtype
    model = TSTalkNet(cfg.model).to(dtype)
    check_compatible(model, entries, encoder.dim)

    cache = cache if cache is not None else TrackCache()
    if library is None and not cfg.no_enroll:
        library = library_for(cfg, entries, cache)
    enroller = Enroller(library, encoder, cfg.allow_self_enroll, cfg.min_enroll_duration, disabled=cfg.no_enroll)

    out = Path(cfg.out_dir)
    log_path = out / "log.jsonl"
    if write:
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise IoError(f"cannot create run directory {out}: {exc}") from exc
        cfg.save(out / "config.yaml")
        log_path.write_text("")

    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=1, gamma=1.0 - cfg.lr_decay)
    records, best, best_state = [], None, None
    rng = np.random.default_rng(cfg.seed)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        lr = opt.param_groups[0]["lr"]
        model.train()
        losses = []
        epoch_seed = int(rng.integers(2 ** 31 - 1))
        for batch in make_batches(train_set, cfg.batch_size, epoch_seed, cfg.augment, cache, enroller,
                                  model.cfg.encoder.speaker_dim, cfg.augment_cfg, dtype):
            probs = model(batch.faces, batch.mfcc, batch.speaker)
            loss = asd_loss(probs, batch.labels)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        sched.step()
        rec = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses)), "n_batches": len(losses)}
        if val_set:
            m = pooled_metrics(predict_tracks(model, val_set, cache, enroller, cfg.eval_enroll_seed))
            rec.update({"val_" + k: m[k] for k in ("AP", "AUC", "EER")})
        rec["seconds"] = round(time.perf_counter() - t0, 3)
        records.append(rec)
        log.info("epoch %d loss %.4f val AP %s", epoch, rec["train_loss"], rec.get("val_AP"))
        score = rec.get("val_AP")
        score = -rec["train_loss"] if score is None else score
        if best is None or score > best:
            best = score
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            if write:
                save_checkpoint(out / "best.pt", model, cfg, {"epoch": epoch, "val_AP": rec.get("val_AP")})
        if write:
            _append_jsonl(log_path, {k: v for k, v in rec.items() if k != "seconds"} | {"seconds": rec["seconds"]})
    if best_state is not None:
        model.load_state_dict(best_state)
    elif write:
        save_checkpoint(out / "best.pt", model, cfg, {"epoch": 0})
    model.eval()
    return {"model": model, "log": records, "enroller": enroller, "cache": cache, "library": library}
