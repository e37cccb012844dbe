"""Synthetic videos with planted action intervals.

Background segments are N(0, noise^2 I); a segment inside a planted interval of
class c is N(mu_c, noise^2 I), with the class means orthogonal and of norm
``separation``. Ground-truth intervals are exact and only meant for
evaluation; training sees the video label sets alone.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from wtal.data_io import (DEFAULT_FPS, DEFAULT_FRAMES_PER_SEGMENT, Dataset, FeatureSequence,
                          GroundTruthSegment, save_dataset, write_ground_truth)
from wtal.errors import ConfigError


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 5
    dim: int = 32
    train_videos: int = 25
    test_videos: int = 25
    segments_per_video: int = 120
    length_jitter: float = 0.2
    instances_per_video: int = 2
    mean_activity_length: int = 15
    separation: float = 16.0
    noise_std: float = 1.0
    multi_label_prob: float = 0.2
    fps: float = DEFAULT_FPS
    frames_per_segment: int = DEFAULT_FRAMES_PER_SEGMENT
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 1 or self.dim < 1:
            raise ConfigError("num_classes and dim must be >= 1")
        if self.num_classes > self.dim:
            raise ConfigError(f"num_classes={self.num_classes} exceeds dim={self.dim}: "
                              "class means need orthogonal directions")
        if not self.separation > 0:
            raise ConfigError(f"separation must be positive, got {self.separation}")
        if self.noise_std < 0:
            raise ConfigError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.segments_per_video < 2 or self.mean_activity_length < 1:
            raise ConfigError("segments_per_video must be >= 2 and mean_activity_length >= 1")
        if self.instances_per_video < 1:
            raise ConfigError("instances_per_video must be >= 1")
        if not 0 <= self.length_jitter < 1 or not 0 <= self.multi_label_prob <= 1:
            raise ConfigError("length_jitter must lie in [0, 1) and multi_label_prob in [0, 1]")
        longest = int(round(1.5 * self.mean_activity_length))
        shortest_video = int(self.segments_per_video * (1 - self.length_jitter))
        if self.instances_per_video * (longest + 1) > shortest_video:
            raise ConfigError("planted intervals cannot fit in the shortest video")


@dataclass
class SyntheticData:
    train: Dataset
    test: Dataset
    train_gt: list
    test_gt: list
    means: np.ndarray  # (C, d)

    def save(self, out_dir):
        out = Path(out_dir)
        save_dataset(self.train, out / "train.tsv")
        save_dataset(self.test, out / "test.tsv")
        write_ground_truth(out / "train_gt.tsv", self.train_gt)
        write_ground_truth(out / "test_gt.tsv", self.test_gt)


def class_names(num_classes):
    return [f"class_{c:02d}" for c in range(num_classes)]


def _place_intervals(rng, n, lengths):
    """Random non-touching placement; returns sorted (start, end) inclusive."""
    for _ in range(1000):
        starts = rng.integers(0, n - lengths + 1)
        spans = sorted(zip(starts.tolist(), lengths.tolist()))
        if all(s0 + l0 < s1 for (s0, l0), (s1, _) in zip(spans, spans[1:])):
            return [(s, s + length - 1) for s, length in spans]
    raise ConfigError(f"could not place {len(lengths)} intervals in {n} segments")


def _make_split(cfg, rng, means, names, split, count):
    videos, labels, gts = [], [], []
    C, L = cfg.num_classes, cfg.mean_activity_length
    sec = cfg.frames_per_segment / cfg.fps
    for v in range(count):
        vid = f"{split}_{v:04d}"
        lo = int(round(cfg.segments_per_video * (1 - cfg.length_jitter)))
        hi = int(round(cfg.segments_per_video * (1 + cfg.length_jitter)))
        n = int(rng.integers(lo, hi + 1))
        present = [v % C]
        if C > 1 and rng.random() < cfg.multi_label_prob:
            others = [c for c in range(C) if c != present[0]]
            present.append(int(rng.choice(others)))
        num_inst = max(cfg.instances_per_video, len(present))
        inst_class = [present[i % len(present)] for i in range(num_inst)]
        lengths = rng.integers(max(1, int(round(0.5 * L))), int(round(1.5 * L)) + 1, size=num_inst)
        spans = _place_intervals(rng, n, lengths)
        order = rng.permutation(num_inst)
        feats = rng.normal(0.0, cfg.noise_std, size=(n, cfg.dim)) if cfg.noise_std > 0 \
            else np.zeros((n, cfg.dim))
        for (i_s, i_e), c in zip(spans, (inst_class[i] for i in order)):
            feats[i_s:i_e + 1] += means[c]
            gts.append(GroundTruthSegment(vid, names[c], i_s * sec, (i_e + 1) * sec))
        videos.append(FeatureSequence(vid, feats.astype(np.float32), cfg.fps, cfg.frames_per_segment))
        labels.append(frozenset(present))
    return Dataset(videos, labels, names, split), gts


def generate_synthetic(cfg: SynthConfig) -> SyntheticData:
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    q, _ = np.linalg.qr(rng.normal(size=(cfg.dim, cfg.dim)))
    means = cfg.separation * q[:, :cfg.num_classes].T
    names = class_names(cfg.num_classes)
    train, train_gt = _make_split(cfg, rng, means, names, "train", cfg.train_videos)
    test, test_gt = _make_split(cfg, rng, means, names, "test", cfg.test_videos)
    return SyntheticData(train, test, train_gt, test_gt, means)
