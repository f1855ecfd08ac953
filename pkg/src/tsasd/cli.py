"""Command-line entry point: ``tsasd <command> ...``.

Commands: generate, convert-ava, convert-asw, build-library, train, eval,
predict. Relative default paths live under ``$TSASD_DATA_ROOT`` (``./data``
when unset).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .dataset import (SyntheticCorpusSpec, TrackCache, convert_annotations, default_data_root, generate_synthetic,
                      load_manifest, write_manifest)
from .errors import ConfigError, TsasdError
from .fusion import FusionMode

log = logging.getLogger("tsasd")

# column layouts of the official annotation CSVs (logical field -> column index)
AVA_COLUMNS = {"video_id": 0, "timestamp": 1, "label": 6, "entity_id": 7}
ASW_COLUMNS = {"video_id": 0, "timestamp": 1, "entity_id": 2, "label": 3}


def cmd_generate(args) -> int:
    spec = SyntheticCorpusSpec(n_identities=args.identities, tracks_per_identity=args.tracks,
                               track_length=args.length, occlusion_rate=args.occlusion, noise_snr=args.snr,
                               seed=args.seed, split_by=args.split_by)
    out = Path(args.out) if args.out else default_data_root() / "synthetic"
    manifest, entries = generate_synthetic(spec, out)
    print(f"wrote {len(entries)} tracks to {manifest}")
    return 0


def _convert(args, columns) -> int:
    entries = convert_annotations(args.csv, args.face_root, args.audio_root, args.split, args.fps, columns)
    write_manifest(args.out, entries)
    print(f"wrote {len(entries)} tracks to {args.out}")
    return 0


def cmd_convert_ava(args) -> int:
    return _convert(args, AVA_COLUMNS)


def cmd_convert_asw(args) -> int:
    return _convert(args, ASW_COLUMNS)


def cmd_build_library(args) -> int:
    from .library import build_library, load_face_embedder, save_library

    entries = load_manifest(args.manifest)
    if args.splits:
        entries = [e for e in entries if e.split in args.splits]
    cache = TrackCache()
    tracks = [cache.get_track(e) for e in entries]
    lib = build_library([p.track for p in tracks], [p.audio for p in tracks], load_face_embedder(args.embedder),
                        args.threshold, args.min_duration,
                        audio_paths={p.entry.track_id: str(Path(p.entry.audio_path).resolve()) for p in tracks})
    save_library(lib, args.out)
    print(f"{len(entries)} tracks -> {len(lib.clusters)} identities, "
          f"{sum(len(c.segments) for c in lib.clusters)} segments; wrote {args.out}")
    return 0


def _run_config(args):
    from .training import RunConfig

    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {"manifest": args.manifest, "library": args.library, "out_dir": args.out, "epochs": args.epochs,
                 "lr": args.lr, "seed": args.seed, "batch_size": args.batch_size}
    for key, value in overrides.items():
        if value is not None:
            setattr(cfg, key, value)
    if args.mode is not None:
        cfg.model.mode = FusionMode.parse(args.mode)
    if args.no_enroll:
        cfg.no_enroll = True
    if args.allow_self_enroll:
        cfg.allow_self_enroll = True
    if args.no_augment:
        cfg.augment = False
    if not cfg.manifest:
        cfg.manifest = str(default_data_root() / "synthetic" / "manifest.jsonl")
    return type(cfg).from_dict(cfg.to_dict())  # re-validate after overrides


def cmd_train(args) -> int:
    from .training import train

    cfg = _run_config(args)
    result = train(cfg)
    last = result["log"][-1] if result["log"] else {}
    print(json.dumps({"out_dir": cfg.out_dir, "epochs": len(result["log"]), "final": last}))
    return 0


def _enroller_for(args, model, entries, cache):
    from .encoders import load_speaker_encoder
    from .library import load_library
    from .training import Enroller, RunConfig, check_compatible, library_for

    encoder = load_speaker_encoder(args.speaker_encoder, model.cfg.encoder.speaker_dim)
    check_compatible(model, entries, encoder.dim)
    if args.no_enroll:
        return Enroller(None, encoder, disabled=True)
    if args.library:
        lib = load_library(args.library)
    else:
        lib = library_for(RunConfig(model=model.cfg), entries, cache)
    return Enroller(lib, encoder, args.allow_self_enroll)


def cmd_eval(args) -> int:
    from .metrics import evaluate, stratified_report
    from .training import load_checkpoint, predict_tracks

    model, _ = load_checkpoint(args.checkpoint)
    entries = load_manifest(args.manifest)
    cache = TrackCache()
    enroller = _enroller_for(args, model, entries, cache)
    split = [e for e in entries if e.split == args.split]
    if not split:
        raise ConfigError(f"manifest has no {args.split!r} tracks")
    per_track = predict_tracks(model, split, cache, enroller, args.seed)
    strat = stratified_report(per_track)
    report = evaluate(per_track)
    report.update({"stratified": strat.to_dict(), "enroll_seed": args.seed, "checkpoint": str(args.checkpoint),
                   "split": args.split, "mode": model.mode.value, "no_enroll": bool(args.no_enroll)})
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=1))
    print(f"{args.split}: mAP {report['mAP']:.4f}  AUC {report['AUC']:.4f}  EER {report['EER']:.4f}  "
          f"({report['n_tracks']} tracks, enrollment seed {args.seed})")
    print(strat.table())
    return 0


def cmd_predict(args) -> int:
    import torch

    from .encoders import load_speaker_encoder, speaker_encode
    from .features import align_audio_to_video, extract_mfcc, load_face_frames, read_wav
    from .metrics import write_predictions
    from .training import load_checkpoint

    model, _ = load_checkpoint(args.checkpoint)
    frames = load_face_frames(args.faces, args.fps)
    audio = read_wav(args.audio)
    mfcc = align_audio_to_video(extract_mfcc(audio), len(frames), args.fps)
    encoder = load_speaker_encoder(args.speaker_encoder, model.cfg.encoder.speaker_dim)
    enrollment = read_wav(args.enroll) if args.enroll else None
    spk = speaker_encode(enrollment, encoder).values
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        probs = model(torch.as_tensor(frames.frames, dtype=dtype)[None], torch.as_tensor(mfcc, dtype=dtype)[None],
                      torch.as_tensor(spk, dtype=dtype)[None])[0].double().numpy()
    track_id = args.track_id or Path(args.faces).stem
    write_predictions(args.out, {track_id: probs})
    print(f"{len(probs)} frame scores -> {args.out}")
    if args.plot:
        from .plotting import plot_timeline

        mask = plot_timeline(probs, args.plot, args.fps, title=f"{track_id} ({model.mode.value})")
        print(f"plot -> {args.plot} ({int(mask.sum())} frames above 0.5)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tsasd", description="Target-speaker active speaker detection")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic audio-visual corpus")
    g.add_argument("--out", help="output directory (default $TSASD_DATA_ROOT/synthetic)")
    g.add_argument("--identities", type=int, default=8)
    g.add_argument("--tracks", type=int, default=6, help="tracks per identity")
    g.add_argument("--length", type=int, default=200, help="frames per track")
    g.add_argument("--occlusion", type=float, default=0.5, help="share of active frames with the lip region masked")
    g.add_argument("--snr", type=float, default=20.0, help="background noise SNR in dB")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--split-by", choices=["identity", "track"], default="identity")
    g.set_defaults(func=cmd_generate)

    for name, fn, hint in (("convert-ava", cmd_convert_ava, "AVA-ActiveSpeaker"),
                           ("convert-asw", cmd_convert_asw, "ASW")):
        c = sub.add_parser(name, help=f"convert {hint} annotation CSV to a manifest")
        c.add_argument("--csv", required=True)
        c.add_argument("--face-root", required=True)
        c.add_argument("--audio-root", required=True)
        c.add_argument("--split", choices=["train", "val", "test"], required=True)
        c.add_argument("--fps", type=float, default=25.0)
        c.add_argument("--out", required=True)
        c.set_defaults(func=fn)

    b = sub.add_parser("build-library", help="cluster face tracks and collect enrollment speech")
    b.add_argument("--manifest", required=True)
    b.add_argument("--threshold", type=float, default=0.7)
    b.add_argument("--min-duration", type=float, default=0.2, help="shortest kept speech segment (s)")
    b.add_argument("--embedder", default="stub")
    b.add_argument("--splits", nargs="*", choices=["train", "val", "test"], help="restrict to these splits")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_build_library)

    t = sub.add_parser("train", help="train a model; flags override the config file")
    t.add_argument("--config")
    t.add_argument("--manifest")
    t.add_argument("--library")
    t.add_argument("--out", help="run directory")
    t.add_argument("--mode", choices=[m.value for m in FusionMode])
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--no-enroll", action="store_true", help="force zero speaker embeddings")
    t.add_argument("--allow-self-enroll", action="store_true")
    t.add_argument("--no-augment", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="metrics and stratified report for one split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--split", default="test", choices=["train", "val", "test"])
    e.add_argument("--library")
    e.add_argument("--speaker-encoder", default="stub")
    e.add_argument("--no-enroll", action="store_true")
    e.add_argument("--allow-self-enroll", action="store_true")
    e.add_argument("--seed", type=int, default=2024, help="enrollment sampling seed")
    e.add_argument("--out", help="write the JSON report here")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="score one face track")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--faces", required=True, help=".npy frame tensor or image directory")
    r.add_argument("--audio", required=True, help="mono WAV")
    r.add_argument("--enroll", help="enrollment WAV (omit for the zero embedding)")
    r.add_argument("--speaker-encoder", default="stub")
    r.add_argument("--fps", type=float, default=25.0)
    r.add_argument("--track-id")
    r.add_argument("--out", required=True, help="score CSV")
    r.add_argument("--plot", help="write a score-timeline PNG")
    r.set_defaults(func=cmd_predict)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (TsasdError, OSError, ValueError) as exc:
        print(f"tsasd {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
