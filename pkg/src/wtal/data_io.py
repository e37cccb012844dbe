"""Feature files, dataset manifests and ground-truth tables.

Feature binary layout (little-endian)::

    offset  size  field
    0       8     magic b"WTALFEAT"
    8       4     version (uint32, currently 1)
    12      4     n, segment count (uint32)
    16      4     d, feature dimension (uint32)
    20      8     fps (float64)
    28      4     frames per segment (uint32)
    32      4*n*d payload, float32, row-major

Manifest: one video per line, ``video_id<TAB>relative_path<TAB>cls_a,cls_b``.
Lines starting with ``#`` are directives (``# classes: a,b,c`` and
``# split: train``) or comments.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from wtal.errors import EmptyVideoError, FormatError, ShapeError

FEATURE_MAGIC = b"WTALFEAT"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<8sIIIdI")
DEFAULT_FPS = 25.0
DEFAULT_FRAMES_PER_SEGMENT = 16


@dataclass
class FeatureSequence:
    video_id: str
    features: np.ndarray  # (n, d) float32
    fps: float = DEFAULT_FPS
    frames_per_segment: int = DEFAULT_FRAMES_PER_SEGMENT

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float32)
        if feats.ndim != 2:
            raise ShapeError(f"{self.video_id}: features must be 2-D, got shape {feats.shape}")
        if feats.shape[0] < 1:
            raise EmptyVideoError(f"{self.video_id}: video has no segments")
        if not np.all(np.isfinite(feats)):
            raise FormatError(f"{self.video_id}: non-finite feature values")
        if not (self.fps > 0 and self.frames_per_segment > 0):
            raise FormatError(f"{self.video_id}: fps and frames_per_segment must be positive")
        self.features = feats

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def d(self):
        return self.features.shape[1]

    @property
    def segment_seconds(self):
        return self.frames_per_segment / self.fps

    def take(self, indices):
        return FeatureSequence(self.video_id, self.features[np.asarray(indices)],
                               self.fps, self.frames_per_segment)


@dataclass(frozen=True)
class GroundTruthSegment:
    video_id: str
    label: str
    start: float
    end: float


@dataclass
class Dataset:
    videos: list[FeatureSequence]
    labels: list[frozenset[int]]
    classes: list[str]
    split: str = ""
    paths: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.videos) != len(self.labels):
            raise ShapeError("videos and labels differ in length")
        ids = [v.video_id for v in self.videos]
        if len(set(ids)) != len(ids):
            raise FormatError("duplicate video ids in dataset")
        dims = {v.d for v in self.videos}
        if len(dims) > 1:
            raise ShapeError(f"feature dimension differs across videos: {sorted(dims)}")
        for vid, labels in zip(ids, self.labels):
            bad = [c for c in labels if not 0 <= c < len(self.classes)]
            if bad:
                raise FormatError(f"{vid}: label index out of range {bad}")

    def __len__(self):
        return len(self.videos)

    @property
    def d(self):
        return self.videos[0].d if self.videos else 0

    @property
    def num_classes(self):
        return len(self.classes)

    def label_matrix(self):
        y = np.zeros((len(self), self.num_classes))
        for i, labels in enumerate(self.labels):
            y[i, list(labels)] = 1.0
        return y


def write_features(seq: FeatureSequence, path):
    path = Path(path)
    header = _HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, seq.n, seq.d,
                          float(seq.fps), int(seq.frames_per_segment))
    payload = np.ascontiguousarray(seq.features, dtype="<f4").tobytes()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_features(path, video_id=None, expected_d=None) -> FeatureSequence:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header, expected {_HEADER.size} bytes, "
                          f"got {len(raw)}", path, len(raw))
    magic, version, n, d, fps, fpseg = _HEADER.unpack_from(raw, 0)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte offset 0", path, 0)
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte offset 8", path, 8)
    if n < 1:
        raise FormatError(f"{path}: segment count is zero at byte offset 12", path, 12)
    expected = _HEADER.size + 4 * n * d
    if len(raw) != expected:
        raise FormatError(f"{path}: payload size mismatch, expected {expected} bytes in total, "
                          f"got {len(raw)}", path, min(len(raw), expected))
    if expected_d is not None and d != expected_d:
        raise ShapeError(f"{path}: feature dimension {d} does not match expected {expected_d}")
    feats = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(n, d)
    return FeatureSequence(video_id or path.stem, feats.astype(np.float32), fps, fpseg)


def read_features_text(path, video_id=None, fps=DEFAULT_FPS,
                       frames_per_segment=DEFAULT_FRAMES_PER_SEGMENT) -> FeatureSequence:
    """Import whitespace-separated rows, one segment per line."""
    path = Path(path)
    try:
        feats = np.loadtxt(path, dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}", path) from exc
    return FeatureSequence(video_id or path.stem, feats, fps, frames_per_segment)


def write_manifest(path, entries, classes, split=""):
    """``entries``: iterable of (video_id, relative_path, label names)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# classes: {','.join(classes)}"]
    if split:
        lines.append(f"# split: {split}")
    for vid, rel, names in entries:
        lines.append(f"{vid}\t{rel}\t{','.join(names)}")
    path.write_text("\n".join(lines) + "\n")


def read_manifest(path):
    """Return (entries, classes, split); entries are (video_id, abs_path, names)."""
    path = Path(path)
    classes, split, entries = None, "", []
    seen = set()
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("classes:"):
                classes = [c for c in body[len("classes:"):].strip().split(",") if c]
            elif body.startswith("split:"):
                split = body[len("split:"):].strip()
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise FormatError(f"{path}:{lineno}: expected 3 tab-separated fields, "
                              f"got {len(parts)}", path, lineno)
        vid, rel, names = parts
        if vid in seen:
            raise FormatError(f"{path}:{lineno}: duplicate video id {vid!r}", path, lineno)
        seen.add(vid)
        label_names = [c for c in names.split(",") if c]
        entries.append((vid, str(path.parent / rel), label_names))
    if classes is None:
        classes = sorted({c for _, _, names in entries for c in names})
    vocab = set(classes)
    for vid, _, names in entries:
        unknown = [c for c in names if c not in vocab]
        if unknown:
            raise FormatError(f"{path}: video {vid} has labels outside the vocabulary: {unknown}")
    return entries, classes, split


def load_dataset(manifest_path) -> Dataset:
    entries, classes, split = read_manifest(manifest_path)
    index = {c: i for i, c in enumerate(classes)}
    videos, labels, paths = [], [], []
    d = None
    for vid, fpath, names in entries:
        seq = read_features(fpath, video_id=vid, expected_d=d)
        d = seq.d
        videos.append(seq)
        labels.append(frozenset(index[c] for c in names))
        paths.append(fpath)
    return Dataset(videos, labels, classes, split, paths)


def save_dataset(dataset: Dataset, manifest_path, feature_dir="features"):
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    entries = []
    for seq, labels in zip(dataset.videos, dataset.labels):
        rel = os.path.join(feature_dir, f"{seq.video_id}.feat")
        write_features(seq, root / rel)
        entries.append((seq.video_id, rel, [dataset.classes[c] for c in sorted(labels)]))
    write_manifest(manifest_path, entries, dataset.classes, dataset.split)


def write_ground_truth(path, segments):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for g in segments:
            fh.write(f"{g.video_id}\t{g.label}\t{g.start:.3f}\t{g.end:.3f}\n")


def read_ground_truth(path) -> list[GroundTruthSegment]:
    path = Path(path)
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise FormatError(f"{path}:{lineno}: expected 4 tab-separated fields, "
                              f"got {len(parts)}", path, lineno)
        try:
            start, end = float(parts[2]), float(parts[3])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: bad time value", path, lineno) from exc
        if not 0 <= start <= end:
            raise FormatError(f"{path}:{lineno}: invalid interval [{start}, {end}]", path, lineno)
        out.append(GroundTruthSegment(parts[0], parts[1], start, end))
    return out
