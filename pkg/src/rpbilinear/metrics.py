"""Frame accuracy, segmental edit score and F1@IoU for action segmentation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Segment",
    "SegmentLabeling",
    "segments_from_frames",
    "frame_accuracy",
    "levenshtein",
    "edit_score",
    "f1_at_iou",
    "f1_counts",
    "evaluate",
    "IOU_THRESHOLDS",
]

IOU_THRESHOLDS = (0.1, 0.25, 0.5)


@dataclass(frozen=True)
class Segment:
    label: int
    start: int  # inclusive
    end: int  # exclusive

    @property
    def length(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class SegmentLabeling:
    frames: tuple[int, ...]
    segments: tuple[Segment, ...]

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def segment_labels(self) -> list[int]:
        return [s.label for s in self.segments]

    def to_frames(self) -> list[int]:
        out: list[int] = []
        for s in self.segments:
            out.extend([s.label] * s.length)
        return out


def segments_from_frames(frames) -> SegmentLabeling:
    """Collapse a frame-wise labeling into maximal runs of equal labels."""
    if isinstance(frames, SegmentLabeling):
        return frames
    labels = [int(f) for f in np.asarray(frames).ravel()]
    if not labels:
        raise ValueError("cannot segment an empty labeling")
    segs = []
    start = 0
    for t in range(1, len(labels) + 1):
        if t == len(labels) or labels[t] != labels[start]:
            segs.append(Segment(labels[start], start, t))
            start = t
    return SegmentLabeling(tuple(labels), tuple(segs))


def _pair(pred, gt) -> tuple[SegmentLabeling, SegmentLabeling]:
    p, g = segments_from_frames(pred), segments_from_frames(gt)
    if len(p) != len(g):
        raise ValueError(f"length mismatch: prediction has {len(p)} frames, ground truth {len(g)}")
    return p, g


def frame_accuracy(pred, gt) -> float:
    p, g = _pair(pred, gt)
    hits = sum(a == b for a, b in zip(p.frames, g.frames))
    return 100.0 * hits / len(g)


def levenshtein(a, b) -> int:
    """Unit-cost edit distance between two sequences."""
    a, b = list(a), list(b)
    prev = list(range(len(b) + 1))
    for i, ai in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, bj in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ai != bj))
        prev = cur
    return prev[-1]


def edit_score(pred, gt) -> float:
    """``100 * (1 - lev / max(#pred segments, #gt segments))``, clamped at 0."""
    p, g = _pair(pred, gt)
    ps, gs = p.segment_labels, g.segment_labels
    dist = levenshtein(ps, gs)
    return max(0.0, 100.0 * (1.0 - dist / max(len(ps), len(gs))))


def _iou(a: Segment, b: Segment) -> float:
    inter = max(0, min(a.end, b.end) - max(a.start, b.start))
    union = max(a.end, b.end) - min(a.start, b.start)
    return inter / union


def f1_counts(pred, gt, tau: float) -> tuple[int, int, int]:
    """True positives, false positives and false negatives at IoU threshold ``tau``.

    Predicted segments are visited in temporal order. Each one claims the
    unmatched same-class ground-truth segment with the highest IoU (earliest
    one on ties) if that IoU is at least ``tau``; otherwise it is a false
    positive.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    p, g = _pair(pred, gt)
    matched = [False] * len(g.segments)
    tp = fp = 0
    for ps in p.segments:
        best, best_iou = -1, -1.0
        for j, gs in enumerate(g.segments):
            if matched[j] or gs.label != ps.label:
                continue
            iou = _iou(ps, gs)
            if iou > best_iou:
                best, best_iou = j, iou
        if best >= 0 and best_iou >= tau:
            matched[best] = True
            tp += 1
        else:
            fp += 1
    fn = matched.count(False)
    return tp, fp, fn


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = 100.0 * tp / (tp + fp) if tp + fp else 0.0
    recall = 100.0 * tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def f1_at_iou(pred, gt, tau: float) -> tuple[float, float, float]:
    """(precision, recall, F1), each in [0, 100]."""
    return _prf(*f1_counts(pred, gt, tau))


def evaluate(pairs) -> dict:
    """Aggregate metrics over ``(pred, gt)`` pairs.

    Accuracy pools frames over all sequences, edit score is the mean over
    sequences, and F1 pools TP/FP/FN counts before computing the score.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("nothing to evaluate")
    hits = total = 0
    edits = []
    counts = {tau: [0, 0, 0] for tau in IOU_THRESHOLDS}
    for pred, gt in pairs:
        p, g = _pair(pred, gt)
        hits += sum(a == b for a, b in zip(p.frames, g.frames))
        total += len(g)
        edits.append(edit_score(p, g))
        for tau in IOU_THRESHOLDS:
            for i, c in enumerate(f1_counts(p, g, tau)):
                counts[tau][i] += c
    out = {"acc": 100.0 * hits / total, "edit": float(np.mean(edits))}
    for tau in IOU_THRESHOLDS:
        out[f"f1_{int(round(tau * 100)):02d}"] = _prf(*counts[tau])[2]
    return out
