"""Finite-difference certification of the analytic gradients on tiny random models."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from wtal.config import CLASS_LOSSES, DISTANCES, METRIC_LOSSES, TrainConfig
from wtal.errors import ConfigError
from wtal.losses import ClassBatchGroup, total_loss_and_grads
from wtal.model import forward, init_params
from wtal.numeric import finite_diff_grad, max_relative_error

TOLERANCE = 1e-5


@dataclass
class GradCheckResult:
    loss: str
    metric: str
    distance: str
    lam: float
    d: int
    num_classes: int
    n: int
    seed: int
    errors: dict  # block name -> max relative error

    @property
    def worst(self):
        return max(self.errors.values())

    def passed(self, tol=TOLERANCE):
        return self.worst < tol


def random_instance(rng, d, num_classes, n, cfg, num_videos=6):
    """Params with partly active ReLUs and partly saturated clipping, plus a batch."""
    rank = min(d, 3) if cfg.distance == "custom" else 0
    params = init_params(d, num_classes, rng, custom_rank=rank)
    params.W_e *= 3.0
    params.W_f *= 6.0
    params.b_e = 0.3 * rng.normal(size=d)
    params.b = 0.3 * rng.normal(size=num_classes)
    if params.L is not None:
        params.L = params.L + 0.3 * rng.normal(size=params.L.shape)
    xs = [rng.normal(size=(n + int(rng.integers(0, 4)), d)) for _ in range(num_videos)]
    labels = []
    for v in range(num_videos):
        present = {v % 2}
        extra = int(rng.integers(0, num_classes))
        if rng.random() < 0.5:
            present.add(extra)
        labels.append(frozenset(present))
    groups = []
    for c in range(num_classes):
        members = tuple(v for v in range(num_videos) if c in labels[v])
        if len(members) >= 2:
            groups.append(ClassBatchGroup(c, members))
    return params, xs, labels, groups


def check_instance(cfg, d, num_classes, n, seed, h=1e-6):
    rng = np.random.default_rng(seed)
    params, xs, labels, groups = random_instance(rng, d, num_classes, n, cfg)

    def objective(theta):
        p = params.unflatten(theta)
        caches = [forward(x, p, cfg.kappa, 0.0, False, None, cfg.classifier_input) for x in xs]
        return total_loss_and_grads(caches, labels, groups, p, cfg, need_grads=False).total

    caches = [forward(x, params, cfg.kappa, 0.0, False, None, cfg.classifier_input) for x in xs]
    analytic = total_loss_and_grads(caches, labels, groups, params, cfg).grads
    numeric = params.unflatten(finite_diff_grad(objective, params.flatten(), h))
    errors = {name: max_relative_error(g, numeric.blocks()[name])
              for name, g in analytic.blocks().items()}
    return GradCheckResult(cfg.loss, cfg.metric, cfg.distance, cfg.lam, d, num_classes, n,
                           seed, errors)


def run_gradcheck(instances=1, seed=0, lam=1.0, dropout=0.0, losses=("bbce", "bce"),
                  metrics=METRIC_LOSSES, distances=DISTANCES, h=1e-6):
    """Check every (loss, metric, distance) combination on ``instances`` random models.

    Sizes cycle through d in {4, 16}, C in {3, 5}, n in {8, 32}.
    """
    if dropout > 0:
        raise ConfigError("gradient checks need a deterministic forward pass; set dropout to 0")
    for name in losses:
        if name not in CLASS_LOSSES:
            raise ConfigError(f"unknown loss {name!r}")
    sizes = list(itertools.product((4, 16), (3, 5), (8, 32)))
    results = []
    counter = 0
    for loss, metric, distance in itertools.product(losses, metrics, distances):
        cfg = TrainConfig(loss=loss, metric=metric, distance=distance, lam=lam, dropout=0.0,
                          block_size=6, k=3)
        for _ in range(instances):
            d, C, n = sizes[counter % len(sizes)]
            results.append(check_instance(cfg, d, C, n, seed + counter, h))
            counter += 1
    return results


def format_result(r: GradCheckResult, tol=TOLERANCE):
    blocks = " ".join(f"{k}={v:.2e}" for k, v in r.errors.items())
    status = "PASS" if r.passed(tol) else "FAIL"
    return (f"{status} loss={r.loss} metric={r.metric} distance={r.distance} lam={r.lam:g} "
            f"d={r.d} C={r.num_classes} n={r.n}  {blocks}")
