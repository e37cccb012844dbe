"""Average precision of temporal detections at IoU thresholds."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from wtal.errors import InvalidParameterError

DEFAULT_THRESHOLDS = (0.1, 0.3, 0.5, 0.7)


def temporal_iou(a, b):
    (a0, a1), (b0, b1) = a, b
    if a0 > a1 or b0 > b1:
        raise InvalidParameterError(f"invalid interval: {a} or {b}")
    inter = max(0.0, min(a1, b1) - max(a0, b0))
    union = (a1 - a0) + (b1 - b0) - inter
    if union <= 0:
        return 1.0 if (a0, a1) == (b0, b1) else 0.0
    return inter / union


def rank_order(preds):
    """Score descending, then earlier start, then video id."""
    return sorted(preds, key=lambda p: (-p.score, p.start, p.video_id))


def match_predictions(preds, gts, iou_thr):
    """True-positive flags for ``preds`` in rank order (greedy, one match per gt)."""
    by_video = defaultdict(list)
    for i, g in enumerate(gts):
        by_video[g.video_id].append(i)
    used = [False] * len(gts)
    flags = []
    for p in rank_order(preds):
        best, best_iou = -1, -1.0
        for gi in by_video.get(p.video_id, ()):
            if used[gi]:
                continue
            iou = temporal_iou((p.start, p.end), (gts[gi].start, gts[gi].end))
            if iou >= iou_thr and iou > best_iou:
                best, best_iou = gi, iou
        if best >= 0:
            used[best] = True
        flags.append(best >= 0)
    return np.array(flags, dtype=bool)


def average_precision(tp_flags, num_gt):
    """All-point interpolated AP from rank-ordered hit flags."""
    if num_gt == 0:
        return None
    tp = np.asarray(tp_flags, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / num_gt
    precision = ctp / np.arange(1, tp.size + 1)
    interp = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate(([0.0], recall[:-1]))
    return float(np.sum((recall - prev) * interp))


def match_and_ap(preds, gts, iou_thr):
    if not 0 < iou_thr <= 1:
        raise InvalidParameterError(f"IoU threshold must lie in (0, 1], got {iou_thr}")
    return average_precision(match_predictions(preds, gts, iou_thr), len(gts))


@dataclass
class EvalReport:
    thresholds: list
    classes: list
    ap: dict = field(default_factory=dict)  # threshold -> class -> AP or None
    mAP: dict = field(default_factory=dict)  # threshold -> float

    @property
    def average_map(self):
        return float(np.mean([self.mAP[t] for t in self.thresholds])) if self.thresholds else 0.0

    def to_dict(self):
        return {
            "thresholds": list(self.thresholds),
            "classes": list(self.classes),
            "ap": {f"{t:g}": self.ap[t] for t in self.thresholds},
            "mAP": {f"{t:g}": self.mAP[t] for t in self.thresholds},
            "average_mAP": self.average_map,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self):
        width = max([5] + [len(c) for c in self.classes])
        head = f"{'class':<{width}}  " + "  ".join(f"{t:>6g}" for t in self.thresholds)
        lines = [head, "-" * len(head)]
        for c in self.classes:
            cells = []
            for t in self.thresholds:
                v = self.ap[t][c]
                cells.append(f"{'-':>6}" if v is None else f"{v:6.4f}")
            lines.append(f"{c:<{width}}  " + "  ".join(cells))
        lines.append("-" * len(head))
        lines.append(f"{'mAP':<{width}}  " + "  ".join(f"{self.mAP[t]:6.4f}" for t in self.thresholds))
        lines.append(f"average mAP: {self.average_map:.4f}")
        return "\n".join(lines)


def evaluate(detections, ground_truth, thresholds=DEFAULT_THRESHOLDS, classes=None) -> EvalReport:
    """Per-class AP table and mAP at each threshold.

    The vocabulary is ``classes`` if given, else the ground-truth labels. Classes
    without ground truth are reported as None and left out of the mean.
    """
    vocab = list(classes) if classes is not None else sorted({g.label for g in ground_truth})
    known = set(vocab)
    offenders = sorted({x.label for x in list(detections) + list(ground_truth)} - known)
    if offenders:
        raise InvalidParameterError(f"unknown class names: {', '.join(offenders)}")
    preds_by = defaultdict(list)
    for det in detections:
        preds_by[det.label].append(det)
    gts_by = defaultdict(list)
    for g in ground_truth:
        gts_by[g.label].append(g)
    report = EvalReport(list(thresholds), vocab)
    for t in thresholds:
        row = {c: match_and_ap(preds_by[c], gts_by[c], t) for c in vocab}
        report.ap[t] = row
        scored = [v for v in row.values() if v is not None]
        report.mAP[t] = float(np.mean(scored)) if scored else 0.0
    return report
