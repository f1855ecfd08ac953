"""Detection metrics: AP, pooled mAP, ROC AUC, EER and the active-frame stratified report.

Tie policy: frames sharing a score are treated as one operating point. AP
takes the precision after the whole tie group has been admitted (the same
convention as ``sklearn.metrics.average_precision_score``), AUC counts a tied
positive/negative pair as one half, and EER is read on the polyline through
the tie-grouped operating points.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import AlignmentError, ParseError, UndefinedMetric

TIE_POLICY = ("ties: equal scores form one operating point; AP uses precision after the whole tie group, "
              "AUC counts tied pairs as 1/2, EER interpolates linearly between operating points")

BIN_EDGES = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)


@dataclass(frozen=True)
class EvalPair:
    score: float
    label: int
    track_id: str = ""
    frame_index: int = 0


def _arrays(scores, labels=None):
    if labels is None:
        pairs = list(scores)
        scores = [p.score for p in pairs]
        labels = [p.label for p in pairs]
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise AlignmentError(f"{s.size} scores vs {y.size} labels")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    return s, y.astype(np.int64)


def _operating_points(s: np.ndarray, y: np.ndarray):
    """Cumulative (tp, fp) after admitting each distinct score, highest first."""
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last_of_group = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.cumsum(y)[last_of_group]
    fp = (last_of_group + 1) - tp
    return tp, fp


def average_precision(scores, labels=None) -> float:
    """Sum over operating points of (recall gain) x (precision).

    With distinct scores this is the mean, over positives, of the precision
    at each positive's rank. Accepts ``(scores, labels)`` or a list of EvalPair.
    """
    s, y = _arrays(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetric("average precision needs at least one positive label")
    tp, fp = _operating_points(s, y)
    precision = tp / (tp + fp)
    recall_gain = np.diff(np.r_[0, tp]) / n_pos
    return float(np.sum(recall_gain * precision))


def mean_average_precision(tracks) -> float:
    """AVA-style mAP for the single 'speaking' class: AP over all frames of all tracks pooled.

    ``tracks`` is a mapping ``track_id -> (scores, labels)``, a sequence of
    ``(scores, labels)`` tuples, or a flat list of EvalPair.
    """
    if isinstance(tracks, Mapping):
        tracks = list(tracks.values())
    tracks = list(tracks)
    if not tracks:
        raise UndefinedMetric("no predictions to evaluate")
    if isinstance(tracks[0], EvalPair):
        return average_precision(tracks)
    s = np.concatenate([np.asarray(t[0], dtype=np.float64).reshape(-1) for t in tracks])
    y = np.concatenate([np.asarray(t[1]).reshape(-1) for t in tracks])
    return average_precision(s, y)


def auc(scores, labels=None) -> float:
    """P(random positive outscores random negative), ties counting 1/2."""
    s, y = _arrays(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("AUC needs both positive and negative labels")
    ranks = rankdata(s)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def far_frr_curve(scores, labels=None):
    """False-acceptance and false-rejection rates, starting from the reject-all threshold."""
    s, y = _arrays(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("EER needs both positive and negative labels")
    tp, fp = _operating_points(s, y)
    far = np.r_[0.0, fp / n_neg]
    frr = np.r_[1.0, 1.0 - tp / n_pos]
    return far, frr


def eer(scores, labels=None) -> float:
    """Equal error rate, interpolated linearly between adjacent sweep points."""
    far, frr = far_frr_curve(scores, labels)
    diff = far - frr
    i = int(np.argmax(diff >= 0))  # diff rises from -1 to +1, so a crossing always exists
    if diff[i] == 0 or i == 0:
        return float(far[i])
    alpha = -diff[i - 1] / (diff[i] - diff[i - 1])
    return float(far[i - 1] + alpha * (far[i] - far[i - 1]))


# ------------------------------------------------------------- stratification


def active_bin(labels) -> int:
    """Index into the five active-percentage bins; edges half-open, last bin closed."""
    y = np.asarray(labels).reshape(-1)
    if y.size == 0:
        raise UndefinedMetric("empty track")
    return min(4, int(5 * int(y.sum()) // y.size))


@dataclass
class BinResult:
    lo: float
    hi: float
    track_ids: list[str] = field(default_factory=list)
    n_frames: int = 0
    ap: float | None = None
    auc: float | None = None
    eer: float | None = None

    @property
    def present(self) -> bool:
        return bool(self.track_ids)

    @property
    def label(self) -> str:
        return f"{int(self.lo * 100)}-{int(self.hi * 100)}"


@dataclass
class StratifiedReport:
    bins: list[BinResult]

    @property
    def n_tracks(self) -> int:
        return sum(len(b.track_ids) for b in self.bins)

    def to_dict(self) -> dict:
        return {
            "bins": [{"bin": b.label, "present": b.present, "n_tracks": len(b.track_ids), "n_frames": b.n_frames,
                      "track_ids": b.track_ids, "ap": b.ap, "auc": b.auc, "eer": b.eer} for b in self.bins],
            "tie_policy": TIE_POLICY,
        }

    def table(self) -> str:
        def pct(v):
            return "   n/a" if v is None else f"{100 * v:6.2f}"

        lines = ["Active Frame (%)  Tracks  AP (%)  AUC (%)  EER (%)"]
        for b in self.bins:
            if not b.present:
                lines.append(f"{b.label:>16}  {0:6d}  (absent)")
            else:
                lines.append(f"{b.label:>16}  {len(b.track_ids):6d}  {pct(b.ap)}  {pct(b.auc)}  {pct(b.eer)}")
        lines.append(TIE_POLICY)
        return "\n".join(lines)


def _safe(fn, s, y):
    try:
        return fn(s, y)
    except UndefinedMetric:
        return None


def stratified_report(per_track: Mapping[str, tuple]) -> StratifiedReport:
    """Bin tracks by the share of active frames and score each bin's pooled frames."""
    bins = [BinResult(lo, hi) for lo, hi in zip(BIN_EDGES[:-1], BIN_EDGES[1:])]
    pooled: list[list] = [[] for _ in bins]
    for track_id in sorted(per_track):
        scores, labels = per_track[track_id]
        i = active_bin(labels)
        bins[i].track_ids.append(track_id)
        pooled[i].append((np.asarray(scores, dtype=np.float64), np.asarray(labels)))
    for b, items in zip(bins, pooled):
        if not items:
            continue
        s = np.concatenate([x[0] for x in items])
        y = np.concatenate([x[1] for x in items])
        b.n_frames = int(y.size)
        b.ap, b.auc, b.eer = _safe(average_precision, s, y), _safe(auc, s, y), _safe(eer, s, y)
    return StratifiedReport(bins)


def evaluate(per_track: Mapping[str, tuple]) -> dict:
    """Pooled mAP / AP / AUC / EER over every frame of every track."""
    s = np.concatenate([np.asarray(v[0], dtype=np.float64).reshape(-1) for v in per_track.values()])
    y = np.concatenate([np.asarray(v[1]).reshape(-1) for v in per_track.values()])
    ap = _safe(average_precision, s, y)
    return {"mAP": ap, "AP": ap, "AUC": _safe(auc, s, y), "EER": _safe(eer, s, y),
            "n_tracks": len(per_track), "n_frames": int(y.size)}


# ------------------------------------------------------------ prediction files


def write_predictions(path: str | Path, per_track_scores: Mapping[str, Sequence[float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["track_id", "frame_index", "score"])
        for track_id in sorted(per_track_scores):
            for i, score in enumerate(per_track_scores[track_id]):
                w.writerow([track_id, i, repr(float(score))])


def read_predictions(path: str | Path) -> dict[str, np.ndarray]:
    rows: dict[str, dict[int, float]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if lineno == 1 and row and row[0] == "track_id":
                continue
            if len(row) != 3:
                raise ParseError("expected track_id,frame_index,score", line=lineno)
            try:
                rows.setdefault(row[0], {})[int(row[1])] = float(row[2])
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from exc
    out = {}
    for track_id, frames in rows.items():
        n = max(frames) + 1
        if sorted(frames) != list(range(n)):
            raise ParseError("frame indices are not contiguous from 0", track_id=track_id)
        out[track_id] = np.array([frames[i] for i in range(n)])
    return out


def join_predictions(predictions: Mapping[str, np.ndarray],
                     labels: Mapping[str, Iterable[int]]) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    joined = {}
    for track_id, scores in predictions.items():
        if track_id not in labels:
            raise AlignmentError(f"no labels for track {track_id!r}")
        y = np.asarray(list(labels[track_id]))
        if y.size != len(scores):
            raise AlignmentError(f"track {track_id!r}: {len(scores)} scores vs {y.size} labels")
        joined[track_id] = (np.asarray(scores, dtype=np.float64), y)
    return joined
