from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from tsasd.dataset import (SyntheticCorpusSpec, TrackCache, TrackManifestEntry, check_splits, convert_annotations,
                           generate_synthetic, load_manifest, make_batches, write_manifest)
from tsasd.encoders import speaker_encode, stub_speaker_encoder
from tsasd.errors import ConfigError, IoError, MissingAsset, ParseError
from tsasd.library import extract_active_segments


def _files(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# ------------------------------------------------------------------- manifests


def test_empty_manifest(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text("")
    assert load_manifest(p) == []


def test_missing_manifest(tmp_path):
    with pytest.raises(MissingAsset):
        load_manifest(tmp_path / "nope.jsonl")


def _write_track(tmp_path, n_frames, n_labels, track_id="trk"):
    np.save(tmp_path / f"{track_id}.npy", np.zeros((n_frames, 112, 112), dtype=np.uint8))
    (tmp_path / f"{track_id}.wav").write_bytes(b"")  # existence is all the loader checks up front
    return {"track_id": track_id, "video_id": "v", "face_frames_path": f"{track_id}.npy",
            "audio_path": f"{track_id}.wav", "fps": 25, "labels": [0] * n_labels, "split": "train"}


def test_label_frame_mismatch_names_track(tmp_path):
    rec = _write_track(tmp_path, 9, 10, "bad_track")
    p = tmp_path / "m.jsonl"
    p.write_text(json.dumps(rec) + "\n")
    with pytest.raises(ParseError) as exc:
        load_manifest(p)
    assert exc.value.track_id == "bad_track" and "bad_track" in str(exc.value)


@pytest.mark.parametrize("line, needle", [
    ("{not json", "invalid JSON"),
    ('{"track_id": "a"}', "missing fields"),
    ("[1, 2]", "not a JSON object"),
])
def test_malformed_records_report_line(tmp_path, line, needle):
    rec = _write_track(tmp_path, 3, 3)
    p = tmp_path / "m.jsonl"
    p.write_text(json.dumps(rec) + "\n" + line + "\n")
    with pytest.raises(ParseError) as exc:
        load_manifest(p)
    assert exc.value.line == 2 and needle in str(exc.value)


def test_bad_labels_split_and_duplicates(tmp_path):
    rec = _write_track(tmp_path, 3, 3)
    p = tmp_path / "m.jsonl"
    for bad in ({**rec, "labels": [0, 2, 1]}, {**rec, "split": "dev"}, {**rec, "fps": "fast"}):
        p.write_text(json.dumps(bad) + "\n")
        with pytest.raises(ParseError):
            load_manifest(p)
    p.write_text(json.dumps(rec) + "\n" + json.dumps(rec) + "\n")
    with pytest.raises(ParseError, match="duplicate"):
        load_manifest(p)


def test_missing_media(tmp_path):
    rec = _write_track(tmp_path, 3, 3)
    rec["audio_path"] = "gone.wav"
    p = tmp_path / "m.jsonl"
    p.write_text(json.dumps(rec) + "\n")
    with pytest.raises(MissingAsset):
        load_manifest(p)
    assert len(load_manifest(p, check_media=False)) == 1


def test_round_trip(small_corpus, tmp_path):
    _, entries = small_corpus
    out = tmp_path / "copy.jsonl"
    write_manifest(out, entries)
    back = load_manifest(out)
    assert [e.__dict__ for e in back] == [e.__dict__ for e in entries]


def test_check_splits():
    a = TrackManifestEntry("x", "v", "f", "a", 25.0, [0], "train")
    b = TrackManifestEntry("x", "v", "f", "a", 25.0, [0], "test")
    check_splits([a, a])
    with pytest.raises(ParseError):
        check_splits([a, b])


# -------------------------------------------------------------------- generator


def test_spec_validation():
    for bad in ({"n_identities": 0}, {"track_length": 0}, {"occlusion_rate": 1.5}, {"split_by": "video"},
                {"partners": "nobody"}):
        with pytest.raises(ConfigError):
            SyntheticCorpusSpec(**bad)


def test_counting(tmp_path):
    spec = SyntheticCorpusSpec(n_identities=2, tracks_per_identity=3, track_length=30)
    _, entries = generate_synthetic(spec, tmp_path)
    assert len(entries) == 6
    assert all(len(e.labels) == 30 for e in entries)


def test_same_seed_byte_identical(tmp_path):
    spec = SyntheticCorpusSpec(n_identities=2, tracks_per_identity=2, track_length=40, seed=5)
    generate_synthetic(spec, tmp_path / "a")
    generate_synthetic(spec, tmp_path / "b")
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    assert a.keys() == b.keys() and len(a) == 2 * 4 + 2
    for name in a:
        assert a[name] == b[name], name


def test_unwritable_directory(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(IoError):
        generate_synthetic(SyntheticCorpusSpec(n_identities=1, tracks_per_identity=1, track_length=10), blocker / "sub")


def test_lip_audio_correlation_without_occlusion(tmp_path):
    spec = SyntheticCorpusSpec(n_identities=3, tracks_per_identity=2, track_length=120, occlusion_rate=0.0, seed=7)
    generate_synthetic(spec, tmp_path)
    stats = json.loads((tmp_path / "stats.json").read_text())
    for tid, s in stats["tracks"].items():
        assert s["n_occluded"] == 0
        if s["lip_audio_corr"] is not None:
            assert s["lip_audio_corr"] >= 0.9, tid
    assert stats["min_lip_audio_corr_visible"] >= 0.9


@pytest.mark.parametrize("rate", [0.25, 0.5, 1.0])
def test_occlusion_share(tmp_path, rate):
    spec = SyntheticCorpusSpec(n_identities=2, tracks_per_identity=2, track_length=100, occlusion_rate=rate, seed=2)
    _, entries = generate_synthetic(spec, tmp_path)
    stats = json.loads((tmp_path / "stats.json").read_text())["tracks"]
    for e in entries:
        s = stats[e.track_id]
        assert abs(s["n_occluded_active"] - rate * s["n_active"]) <= 1
        frames = np.load(e.face_frames_path)
        occ = np.asarray(s["occluded_frames"], dtype=int)
        assert np.all(frames[occ, 56:, :] == 0)


def test_identity_separability(small_corpus):
    """Stub speaker embeddings of active speech: intra-identity cosine beats inter-identity by >= 0.3."""
    _, entries = small_corpus
    enc = stub_speaker_encoder()
    cache = TrackCache()
    vecs, owner = [], []
    for e in entries:
        p = cache.get_track(e)
        for seg in extract_active_segments(p.track, p.audio, min_duration=0.5):
            v = speaker_encode(seg.clip, enc).values
            vecs.append(v / np.linalg.norm(v))
            owner.append(e.extra["identity"])
    v = np.array(vecs)
    owner = np.array(owner)
    sims = v @ v.T
    same = owner[:, None] == owner[None, :]
    off_diag = ~np.eye(len(v), dtype=bool)
    intra = sims[same & off_diag].mean()
    inter = sims[~same].mean()
    assert intra - inter >= 0.3, (intra, inter)


def test_split_discipline(tmp_path):
    spec = SyntheticCorpusSpec(n_identities=8, tracks_per_identity=2, track_length=20)
    _, entries = generate_synthetic(spec, tmp_path)
    check_splits(entries)
    by_split: dict[str, set] = {}
    for e in entries:
        by_split.setdefault(e.split, set()).add(e.extra["identity"])
    assert by_split == {"train": {0, 1, 2, 3, 4}, "val": {5}, "test": {6, 7}}


def test_track_split_keeps_identities_in_training(tmp_path):
    spec = SyntheticCorpusSpec(n_identities=2, tracks_per_identity=4, track_length=20, split_by="track")
    _, entries = generate_synthetic(spec, tmp_path)
    assert [e.split for e in entries] == ["train", "train", "val", "test"] * 2


# ---------------------------------------------------------------------- batches


def test_batches_deterministic(small_corpus):
    _, entries = small_corpus
    cache = TrackCache()
    a = list(make_batches(entries, 5, seed=3, augment=False, cache=cache))
    b = list(make_batches(entries, 5, seed=3, augment=False, cache=cache))
    assert [x.track_ids for x in a] == [x.track_ids for x in b]
    for x, y in zip(a, b):
        assert x.faces.equal(y.faces) and x.mfcc.equal(y.mfcc) and x.labels.equal(y.labels)
    c = list(make_batches(entries, 5, seed=4, augment=False, cache=cache))
    assert [x.track_ids for x in a] != [x.track_ids for x in c]


def test_single_batch_and_shapes(small_corpus):
    _, entries = small_corpus
    (batch,) = list(make_batches(entries, len(entries) + 3, seed=0, augment=True))
    assert sorted(batch.track_ids) == sorted(e.track_id for e in entries)
    b, t = batch.labels.shape
    assert batch.faces.shape[:2] == (b, t) and batch.mfcc.shape[:2] == (b, t)
    assert batch.speaker.shape == (b, 192) and bool(batch.speaker_null.all())


def test_batches_carry_enrollment(small_corpus):
    _, entries = small_corpus
    seen = []

    def enroller(track, seed):
        seen.append((track.entry.track_id, seed))
        return None if track.entry.track_id.endswith("t0") else np.full(192, 0.5)

    batches = list(make_batches(entries, 4, seed=1, augment=False, enroller=enroller))
    assert len(seen) == len(entries)
    for batch in batches:
        for tid, spk, null in zip(batch.track_ids, batch.speaker, batch.speaker_null):
            assert bool(null) == tid.endswith("t0")
            assert float(spk.abs().sum()) == (0.0 if null else 96.0)


def test_batch_errors(small_corpus):
    _, entries = small_corpus
    with pytest.raises(ConfigError):
        next(make_batches([], 2, 0, False))
    with pytest.raises(ConfigError):
        next(make_batches(entries, 0, 0, False))


# --------------------------------------------------------------------- adapters


def test_convert_annotations(tmp_path):
    csv_path = tmp_path / "ann.csv"
    csv_path.write_text(
        "video_id,frame_timestamp,x1,y1,x2,y2,label,entity_id\n"
        "vid,0.08,0,0,1,1,SPEAKING_AUDIBLE,vid:e1\n"
        "vid,0.00,0,0,1,1,NOT_SPEAKING,vid:e1\n"
        "vid,0.04,0,0,1,1,SPEAKING_NOT_AUDIBLE,vid:e1\n"
        "vid,0.00,0,0,1,1,SPEAKING_AUDIBLE,vid:e2\n")
    entries = convert_annotations(csv_path, "faces", "audio", "val")
    assert [e.track_id for e in entries] == ["vid:e1", "vid:e2"]
    assert entries[0].labels == [0, 0, 1]
    assert entries[0].face_frames_path.endswith("vid/vid_e1")
    assert entries[1].audio_path.endswith("vid/vid_e2.wav")
    csv_path.write_text("vid,0.0,0,0,1,1,MAYBE,e\n" * 2)
    with pytest.raises(ParseError):
        convert_annotations(csv_path, "f", "a", "val")
