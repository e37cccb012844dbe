"""Segment scores to timestamped detections by thresholding and 1-D components."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from wtal.errors import FormatError, InvalidParameterError
from wtal.numeric import stable_sigmoid


@dataclass(frozen=True)
class Detection:
    video_id: str
    label: str
    start: float
    end: float
    score: float


def segment_probs(cache_or_scores):
    s = getattr(cache_or_scores, "s", cache_or_scores)
    return stable_sigmoid(np.asarray(s, dtype=np.float64))


def connected_components(mask):
    """Maximal runs of True as inclusive (start, end) index pairs."""
    m = np.asarray(mask, dtype=bool).astype(np.int8)
    if m.size == 0:
        return []
    edges = np.diff(np.concatenate(([0], m, [0])))
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1) - 1
    return [(int(a), int(b)) for a, b in zip(starts, ends)]


def localize_class(y, video_prob, fps, frames_per_segment, seg_threshold=0.5, gamma=0.7):
    """Detections for one class as (start_s, end_s, score) triples."""
    if not (fps > 0 and frames_per_segment > 0):
        raise InvalidParameterError("fps and frames_per_segment must be positive")
    y = np.asarray(y, dtype=np.float64)
    sec = frames_per_segment / fps
    out = []
    for i_s, i_e in connected_components(y >= seg_threshold):
        q = float(y[i_s:i_e + 1].max() + gamma * video_prob)
        out.append((i_s * sec, (i_e + 1) * sec, q))
    return out


def localize(cache, video_probs, fps, frames_per_segment, video_id="", class_names=None,
             seg_threshold=0.5, gamma=0.7, class_gate=None):
    """Per-class detections for one video.

    ``cache`` is a ForwardCache or an (n, C) array of clipped activations.
    ``class_gate``, when set, suppresses classes whose video-level probability
    is below it.
    """
    y = segment_probs(cache)
    video_probs = np.asarray(video_probs, dtype=np.float64)
    C = y.shape[1]
    names = class_names or [str(c) for c in range(C)]
    dets = []
    for c in range(C):
        if class_gate is not None and video_probs[c] < class_gate:
            continue
        for start, end, q in localize_class(y[:, c], video_probs[c], fps, frames_per_segment,
                                            seg_threshold, gamma):
            dets.append(Detection(video_id, names[c], start, end, q))
    return dets


def write_detections(path, detections):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for det in detections:
            fh.write(f"{det.video_id}\t{det.label}\t{det.start:.3f}\t{det.end:.3f}\t{det.score:.6f}\n")


def read_detections(path) -> list[Detection]:
    path = Path(path)
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise FormatError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(parts)}",
                              path, lineno)
        try:
            start, end, q = float(parts[2]), float(parts[3]), float(parts[4])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: malformed number", path, lineno) from exc
        if not (0 <= start <= end and np.isfinite(q)):
            raise FormatError(f"{path}:{lineno}: invalid detection [{start}, {end}] q={q}",
                              path, lineno)
        out.append(Detection(parts[0], parts[1], start, end, q))
    return out


def write_trace(path, probs, class_names):
    """Per-segment class probabilities for plotting: index then one column per class."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write("segment\t" + "\t".join(class_names) + "\n")
        for i, row in enumerate(np.asarray(probs)):
            fh.write(f"{i}\t" + "\t".join(f"{v:.6f}" for v in row) + "\n")
