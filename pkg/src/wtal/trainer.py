"""Class-grouped batch sampling, Adam and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from wtal.config import TrainConfig
from wtal.errors import InvalidParameterError, NumericError, WtalError
from wtal.losses import ClassBatchGroup, total_loss_and_grads
from wtal.model import ModelParams, forward_batch, init_params, save_checkpoint
from wtal.numeric import split_rng

logger = logging.getLogger(__name__)

__all__ = ["AdamState", "BatchSampler", "TrainConfig", "TrainResult", "adam_step",
           "init_adam", "sample_batch", "sample_segments", "train"]


@dataclass
class AdamState:
    m: ModelParams
    v: ModelParams
    t: int = 0


def init_adam(params: ModelParams):
    return AdamState(params.zeros_like(), params.zeros_like(), 0)


def adam_step(params: ModelParams, grads: ModelParams, state: AdamState, cfg: TrainConfig):
    """Bias-corrected Adam. Returns new (params, state); inputs are not modified."""
    for name, g in grads.blocks().items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NumericError(f"step {state.t + 1}: {bad} non-finite gradient entries in {name}; "
                               "update aborted")
    t = state.t + 1
    b1, b2 = cfg.beta1, cfg.beta2
    new_p, new_m, new_v = {}, {}, {}
    m_blocks, v_blocks = state.m.blocks(), state.v.blocks()
    for name, p in params.blocks().items():
        g = grads.blocks()[name]
        m = b1 * m_blocks[name] + (1.0 - b1) * g
        v = b2 * v_blocks[name] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_p[name] = p - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
        new_m[name], new_v[name] = m, v
    return ModelParams(**new_p), AdamState(ModelParams(**new_m), ModelParams(**new_v), t)


def sample_segments(seq, max_segments, rng):
    """At most ``max_segments`` random segments, kept in temporal order."""
    if max_segments < 1:
        raise InvalidParameterError("max_segments must be >= 1")
    if seq.n <= max_segments:
        return seq
    idx = np.sort(rng.choice(seq.n, size=max_segments, replace=False))
    return seq.take(idx)


class BatchSampler:
    """Draws batches of ``batch_classes`` classes with ``videos_per_class`` videos each.

    Within an epoch, videos not yet used are preferred; a class with fewer
    available videos yields a smaller group rather than repeated videos.
    """

    def __init__(self, dataset, cfg: TrainConfig, rng):
        self.cfg = cfg
        self.rng = rng
        self.by_class = {c: [] for c in range(dataset.num_classes)}
        for i, labels in enumerate(dataset.labels):
            for c in labels:
                self.by_class[c].append(i)
        self.classes = [c for c, vids in self.by_class.items() if vids]
        if not self.classes:
            raise InvalidParameterError("dataset has no labelled videos")
        self.num_videos = len(dataset)
        self.new_epoch()

    def new_epoch(self):
        self.unused = set(range(self.num_videos))

    def sample(self):
        cfg, rng = self.cfg, self.rng
        take = min(cfg.batch_classes, len(self.classes))
        chosen = rng.choice(self.classes, size=take, replace=False)
        batch, position, groups = [], {}, []
        for c in (int(c) for c in chosen):
            vids = self.by_class[c]
            outside = [v for v in vids if v not in position]
            fresh = [v for v in outside if v in self.unused]
            stale = [v for v in outside if v not in self.unused]
            order = [fresh[i] for i in rng.permutation(len(fresh))] + \
                    [stale[i] for i in rng.permutation(len(stale))]
            members = order[:cfg.videos_per_class]
            if len(members) < cfg.videos_per_class:
                # reuse videos already in this batch that also carry class c
                inside = [v for v in vids if v in position]
                members += inside[:cfg.videos_per_class - len(members)]
            for v in members:
                if v not in position:
                    position[v] = len(batch)
                    batch.append(v)
            self.unused.difference_update(members)
            if len(members) >= 2:
                groups.append(ClassBatchGroup(c, tuple(position[v] for v in members)))
        return batch, groups


def sample_batch(dataset, cfg, rng):
    return BatchSampler(dataset, cfg, rng).sample()


@dataclass
class TrainResult:
    params: ModelParams
    steps: list = field(default_factory=list)  # (step, epoch, cls, metric, total)
    epoch_loss: list = field(default_factory=list)  # mean total per epoch


def steps_per_epoch(num_videos, cfg):
    return cfg.steps_per_epoch or max(1, math.ceil(num_videos / cfg.batch_size))


def train(dataset, cfg: TrainConfig, log_path=None, checkpoint_path=None) -> TrainResult:
    if len(dataset) == 0:
        raise InvalidParameterError("empty dataset")
    rngs = split_rng(cfg.seed, ["init", "sampler", "segments", "dropout"])
    rank = (cfg.custom_rank or dataset.d) if cfg.distance == "custom" else 0
    params = init_params(dataset.d, dataset.num_classes, rngs["init"], custom_rank=rank)
    state = init_adam(params)
    sampler = BatchSampler(dataset, cfg, rngs["sampler"])
    per_epoch = steps_per_epoch(len(dataset), cfg)
    result = TrainResult(params)
    log = open(log_path, "w") if log_path else None
    try:
        if log:
            log.write("step\tepoch\tbbce\tmetric\ttotal\n")
        step = 0
        for epoch in range(cfg.epochs):
            sampler.new_epoch()
            totals = []
            for _ in range(per_epoch):
                idx, groups = sampler.sample()
                seqs = [sample_segments(dataset.videos[i], cfg.max_segments, rngs["segments"])
                        for i in idx]
                caches = forward_batch(seqs, params, cfg.kappa, cfg.dropout, True,
                                       rngs["dropout"], cfg.classifier_input)
                report = total_loss_and_grads(caches, [dataset.labels[i] for i in idx],
                                              groups, params, cfg)
                params, state = adam_step(params, report.grads, state, cfg)
                step += 1
                row = (step, epoch, report.bbce, report.metric, report.total)
                result.steps.append(row)
                totals.append(report.total)
                if log:
                    log.write(f"{step}\t{epoch}\t{report.bbce:.10g}\t{report.metric:.10g}\t"
                              f"{report.total:.10g}\n")
            result.epoch_loss.append(float(np.mean(totals)))
            logger.debug("epoch %d loss %.5f", epoch, result.epoch_loss[-1])
    finally:
        if log:
            log.close()
    result.params = params
    if checkpoint_path:
        try:
            save_checkpoint(checkpoint_path, params, cfg.kappa, cfg.classifier_input)
        except OSError as exc:
            raise WtalError(f"cannot write checkpoint to {Path(checkpoint_path)}: {exc}") from exc
    return result
