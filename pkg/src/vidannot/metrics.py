"""Tracking evaluation: frame-level matching, precision/recall, MOTA, IDF1.

All functions are pure; per-sequence evaluation can run in parallel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import BBox, iou_box

_EXHAUSTIVE_ID_LIMIT = 12


@dataclass(frozen=True)
class LabeledBox:
    track_id: int
    box: BBox
    class_label: str | None = None


@dataclass
class SequenceScores:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    idsw: int = 0
    gt_total: int = 0
    idtp: int = 0
    pred_total: int = 0

    @property
    def precision(self) -> float:
        d = self.tp + self.fp
        return self.tp / d if d else 0.0

    @property
    def recall(self) -> float:
        d = self.tp + self.fn
        return self.tp / d if d else 0.0

    @property
    def mota(self) -> float:
        if self.gt_total == 0:
            return 1.0 if (self.fp + self.fn + self.idsw) == 0 else float("-inf")
        return 1.0 - (self.fp + self.fn + self.idsw) / self.gt_total

    @property
    def idf1(self) -> float:
        d = self.pred_total + self.gt_total
        return 2.0 * self.idtp / d if d else 1.0


@dataclass
class EvalReport:
    aggregate: SequenceScores
    sequences: dict[str, SequenceScores] = field(default_factory=dict)
    per_class: dict[str, SequenceScores] = field(default_factory=dict)

    def to_csv_rows(self) -> list[tuple[str, str, float]]:
        rows: list[tuple[str, str, float]] = []

        def emit(name: str, s: SequenceScores) -> None:
            rows.append((name, "TP", float(s.tp)))
            rows.append((name, "FP", float(s.fp)))
            rows.append((name, "FN", float(s.fn)))
            rows.append((name, "IDSW", float(s.idsw)))
            rows.append((name, "precision", s.precision))
            rows.append((name, "recall", s.recall))
            rows.append((name, "MOTA", s.mota))
            rows.append((name, "IDF1", s.idf1))

        for name in sorted(self.sequences):
            emit(name, self.sequences[name])
        emit("ALL", self.aggregate)
        for label in sorted(self.per_class):
            emit(f"class:{label}", self.per_class[label])
        return rows

    def format_text(self) -> str:
        lines = [f"{'sequence':<16} {'TP':>6} {'FP':>6} {'FN':>6} {'IDSW':>5} "
                 f"{'prec':>7} {'recall':>7} {'MOTA':>7} {'IDF1':>7}"]

        def fmt(name: str, s: SequenceScores) -> str:
            return (f"{name:<16} {s.tp:>6} {s.fp:>6} {s.fn:>6} {s.idsw:>5} "
                    f"{s.precision:>7.3f} {s.recall:>7.3f} {s.mota:>7.3f} {s.idf1:>7.3f}")

        for name in sorted(self.sequences):
            lines.append(fmt(name, self.sequences[name]))
        lines.append(fmt("ALL", self.aggregate))
        for label in sorted(self.per_class):
            lines.append(fmt(f"class:{label}", self.per_class[label]))
        return "\n".join(lines)


def match_frame(
    predictions: Sequence[BBox],
    ground_truth: Sequence[BBox],
    iou_threshold: float = 0.5,
) -> tuple[list[tuple[int, int, float]], list[int], list[int]]:
    """Greedy descending-IoU bipartite matching at the given threshold.

    Returns (matches as (pred_idx, gt_idx, iou), unmatched pred indices,
    unmatched gt indices).
    """
    pairs = []
    for pi, pb in enumerate(predictions):
        for gi, gb in enumerate(ground_truth):
            v = iou_box(pb, gb)
            if v >= iou_threshold:
                pairs.append((v, pi, gi))
    pairs.sort(key=lambda p: (-p[0], p[1], p[2]))
    matches: list[tuple[int, int, float]] = []
    used_p: set[int] = set()
    used_g: set[int] = set()
    for v, pi, gi in pairs:
        if pi in used_p or gi in used_g:
            continue
        used_p.add(pi)
        used_g.add(gi)
        matches.append((pi, gi, v))
    fps = [i for i in range(len(predictions)) if i not in used_p]
    fns = [i for i in range(len(ground_truth)) if i not in used_g]
    return matches, fps, fns


def _max_idtp_exhaustive(idtp: np.ndarray) -> int:
    """Exact one-to-one assignment by enumerating column subsets.

    DP over rows with a bitmask of used columns; rows may stay unassigned.
    Exponential in the column count, so only used for small identity sets.
    """
    rows, cols = idtp.shape
    if cols > rows:
        idtp = idtp.T
        rows, cols = cols, rows
    best = {0: 0}
    for r in range(rows):
        nxt = dict(best)
        for mask, value in best.items():
            for c in range(cols):
                if mask & (1 << c) or idtp[r, c] == 0:
                    continue
                m2 = mask | (1 << c)
                v2 = value + int(idtp[r, c])
                if v2 > nxt.get(m2, -1):
                    nxt[m2] = v2
        best = nxt
    return max(best.values())


def _max_idtp(idtp: np.ndarray) -> int:
    if idtp.size == 0:
        return 0
    if max(idtp.shape) <= _EXHAUSTIVE_ID_LIMIT:
        return _max_idtp_exhaustive(idtp)
    rows, cols = linear_sum_assignment(-idtp)
    return int(idtp[rows, cols].sum())


def _frame_union(preds: Mapping[int, Sequence[LabeledBox]], gts: Mapping[int, Sequence[LabeledBox]]) -> list[int]:
    if set(preds.keys()) != set(gts.keys()):
        missing = sorted(set(gts) ^ set(preds))
        raise ValueError(f"prediction and ground-truth frames misaligned at {missing[:5]}")
    return sorted(gts.keys())


def evaluate(
    predictions: Mapping[int, Sequence[LabeledBox]],
    ground_truth: Mapping[int, Sequence[LabeledBox]],
    iou_threshold: float = 0.5,
) -> SequenceScores:
    """Score one frame-aligned sequence.

    MOTA counts frame-level matching errors; IDSW increments when a ground
    truth identity's matched prediction id changes between its consecutive
    matched frames; IDF1 uses an exact optimal global identity assignment.
    """
    frames = _frame_union(predictions, ground_truth)
    scores = SequenceScores()
    last_match: dict[int, int] = {}  # gt id -> last matched pred id
    pred_ids: dict[int, int] = {}  # pred id -> dense index
    gt_ids: dict[int, int] = {}
    overlap_counts: dict[tuple[int, int], int] = {}
    for f in frames:
        preds = list(predictions[f])
        gts = list(ground_truth[f])
        scores.gt_total += len(gts)
        scores.pred_total += len(preds)
        matches, fps, fns = match_frame(
            [p.box for p in preds], [g.box for g in gts], iou_threshold
        )
        scores.tp += len(matches)
        scores.fp += len(fps)
        scores.fn += len(fns)
        for pi, gi, _ in matches:
            pid = preds[pi].track_id
            gid = gts[gi].track_id
            if gid in last_match and last_match[gid] != pid:
                scores.idsw += 1
            last_match[gid] = pid
        # Pairwise per-frame overlaps feed the global identity assignment.
        for p in preds:
            pred_ids.setdefault(p.track_id, len(pred_ids))
        for g in gts:
            gt_ids.setdefault(g.track_id, len(gt_ids))
        for p in preds:
            for g in gts:
                if iou_box(p.box, g.box) >= iou_threshold:
                    key = (gt_ids[g.track_id], pred_ids[p.track_id])
                    overlap_counts[key] = overlap_counts.get(key, 0) + 1
    idtp = np.zeros((len(gt_ids), len(pred_ids)), dtype=np.int64)
    for (gi, pi), c in overlap_counts.items():
        idtp[gi, pi] = c
    scores.idtp = _max_idtp(idtp)
    return scores


def _merge(into: SequenceScores, other: SequenceScores) -> None:
    into.tp += other.tp
    into.fp += other.fp
    into.fn += other.fn
    into.idsw += other.idsw
    into.gt_total += other.gt_total
    into.idtp += other.idtp
    into.pred_total += other.pred_total


def _filter_class(
    frames: Mapping[int, Sequence[LabeledBox]], label: str
) -> dict[int, list[LabeledBox]]:
    return {f: [b for b in boxes if b.class_label == label] for f, boxes in frames.items()}


def evaluate_dataset(
    sequences: Mapping[
        str, tuple[Mapping[int, Sequence[LabeledBox]], Mapping[int, Sequence[LabeledBox]]]
    ],
    iou_threshold: float = 0.5,
) -> EvalReport:
    """Per-sequence and aggregate scores, with a per-class breakdown when the
    ground truth carries class labels."""
    report = EvalReport(aggregate=SequenceScores())
    labels: set[str] = set()
    for name, (preds, gts) in sequences.items():
        s = evaluate(preds, gts, iou_threshold)
        report.sequences[name] = s
        _merge(report.aggregate, s)
        for boxes in gts.values():
            for b in boxes:
                if b.class_label is not None:
                    labels.add(b.class_label)
    for label in sorted(labels):
        class_scores = SequenceScores()
        for preds, gts in sequences.values():
            class_scores_seq = evaluate(
                _filter_class(preds, label), _filter_class(gts, label), iou_threshold
            )
            _merge(class_scores, class_scores_seq)
        report.per_class[label] = class_scores
    return report
