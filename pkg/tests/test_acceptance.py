"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` (lines appear in the terminal
report) or ``python3 tests/test_acceptance.py`` for the lines alone.
"""

import functools
import itertools
import math
import random
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from oracles import ap_from_pr_curve, greedy_hits, kmax_prob, noisy_or, runs  # noqa: E402
from wtal.data_io import GroundTruthSegment  # noqa: E402
from wtal.evaluation import average_precision, evaluate, match_and_ap  # noqa: E402
from wtal.gradcheck import TOLERANCE, run_gradcheck  # noqa: E402
from wtal.localization import Detection, connected_components  # noqa: E402
from wtal.losses import (block_class_prob, block_logits, class_distance,  # noqa: E402
                         partition_blocks, video_class_prob)
from wtal.model import save_checkpoint  # noqa: E402
from wtal.numeric import stable_softmax  # noqa: E402
from wtal.pipeline import detect, synthetic_train_config  # noqa: E402
from wtal.synthetic import SynthConfig, generate_synthetic  # noqa: E402
from wtal.trainer import train  # noqa: E402

SEEDS = (0, 1, 2)
MAP_TARGET = 0.80
VARIANTS = {
    "triplet": {},
    "bbce-only": {"metric": "none"},
    "euclidean": {"distance": "euclidean"},
    "cosine": {"distance": "cosine"},
    "no-blocks": {"use_blocks": False},
}

_emit = print


@pytest.fixture(autouse=True)
def _terminal_lines(request):
    global _emit
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")
    if reporter is not None:
        _emit = lambda line: reporter.write_line(line)  # noqa: E731
    yield
    _emit = print


def verdict(name, ok, detail):
    _emit(f"{'PASS' if ok else 'FAIL'} criterion {name}: {detail}")
    return ok


@functools.lru_cache(maxsize=None)
def synthetic_run(seed, variant="triplet"):
    """Train on the synthetic train split, evaluate on the test split.

    Returns (report, checkpoint bytes, seconds).
    """
    t0 = time.perf_counter()
    data = generate_synthetic(SynthConfig(seed=seed))
    cfg = synthetic_train_config(seed, **VARIANTS[variant])
    result = train(data.train, cfg)
    report = evaluate(detect(data.test, result.params, cfg), data.test_gt,
                      classes=data.test.classes)
    seconds = time.perf_counter() - t0
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "model.ckpt"
        save_checkpoint(path, result.params, cfg.kappa, cfg.classifier_input)
        blob = path.read_bytes()
    return report, blob, seconds


def mean_over_seeds(variant, key):
    reports = [synthetic_run(s, variant)[0] for s in SEEDS]
    return float(np.mean([key(r) for r in reports]))


def avg_map(r):
    return r.average_map


def map_at_half(r):
    return r.mAP[0.5]


# 1 ---------------------------------------------------------------------------

def test_criterion_1_gradient_certification():
    t0 = time.perf_counter()
    results = run_gradcheck(instances=1, seed=0)
    seconds = time.perf_counter() - t0
    combos = {(r.loss, r.metric, r.distance) for r in results}
    worst = max(r.worst for r in results)
    sizes = {(r.d, r.num_classes, r.n) for r in results}
    ok = (len(results) >= 20 and len(combos) == 24 and worst < TOLERANCE and seconds < 120
          and sizes == set(itertools.product((4, 16), (3, 5), (8, 32))))
    assert verdict("1 gradient certification", ok,
                   f"{len(results)} instances over {len(combos)} configurations, "
                   f"worst block relative error {worst:.2e} (< {TOLERANCE:g}), {seconds:.1f}s (< 120s)")


# 2 ---------------------------------------------------------------------------

def _kmax_exhaustive():
    # dyadic values keep every sum exact, so pooled logits must agree bit for bit
    alphabet = (-4.0, -0.5, 0.0, 0.25, 3.0)
    count = 0
    for n in range(1, 7):
        for scores in itertools.product(alphabet, repeat=n):
            s = np.array(scores)[:, None]
            for k in range(1, n + 1):
                m, _ = block_logits(s, partition_blocks(n, n, k))
                ref = sum(sorted(scores, reverse=True)[:k]) / k
                if m[0, 0] != ref:
                    return False, count
                if abs(block_class_prob(scores, k) - kmax_prob(scores, k)) > 1e-15:
                    return False, count
                count += 1
    return True, count


def _noisy_or_exhaustive():
    grid = [i / 10 for i in range(11)]
    worst, count = 0.0, 0
    for n in range(1, 5):
        for probs in itertools.product(grid, repeat=n):
            worst = max(worst, abs(video_class_prob(probs) - noisy_or(probs)))
            count += 1
    return worst, count


def _components_exhaustive():
    count = 0
    for n in range(0, 17):
        for bits in itertools.product((False, True), repeat=n):
            if connected_components(bits) != runs(bits):
                return False, count
            count += 1
    return True, count


def _ap_exhaustive():
    worst, count = 0.0, 0
    # every hit pattern of up to 5 ranked predictions against 1..3 ground truths
    for num_gt in (1, 2, 3):
        for n in range(0, 6):
            for flags in itertools.product((False, True), repeat=n):
                if sum(flags) > num_gt:
                    continue
                worst = max(worst, abs(average_precision(flags, num_gt) - ap_from_pr_curve(flags, num_gt)))
                count += 1
    # every geometric instance over a small interval vocabulary, matching included
    vocab = [(0.0, 2.0), (1.0, 3.0), (2.0, 4.0), (5.0, 6.0)]
    gt_sets = [c for r in range(1, 4) for c in itertools.combinations(vocab, r)]
    for gt_set in gt_sets:
        gts = [GroundTruthSegment("v", "c", a, b) for a, b in gt_set]
        for n in range(0, 6):
            for seq in itertools.product(vocab, repeat=n):
                preds = [Detection("v", "c", a, b, 1.0 - i / 10) for i, (a, b) in enumerate(seq)]
                for thr in (0.3, 0.5, 0.7):
                    hits = greedy_hits([("v", a, b, 1.0 - i / 10) for i, (a, b) in enumerate(seq)],
                                       [("v", a, b) for a, b in gt_set], thr)
                    got = match_and_ap(preds, gts, thr)
                    worst = max(worst, abs(got - ap_from_pr_curve(hits, len(gts))))
                    count += 1
    return worst, count


def _quadratic_form(samples=2000):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(samples):
        d = int(rng.integers(1, 17))
        w, u, v = rng.normal(size=(3, d))
        M = np.outer(w, w)
        ref = math.sqrt(max(float((u - v) @ M @ (u - v)), 0.0))
        got = class_distance(u, v, w)
        if ref > 1e-6:
            worst = max(worst, abs(got - ref) / ref)
    return worst, samples


def test_criterion_2_oracle_equivalences():
    kmax_ok, n_kmax = _kmax_exhaustive()
    nor_err, n_nor = _noisy_or_exhaustive()
    cc_ok, n_cc = _components_exhaustive()
    ap_err, n_ap = _ap_exhaustive()
    qf_err, n_qf = _quadratic_form()
    ok = kmax_ok and nor_err < 1e-12 and cc_ok and ap_err < 1e-12 and qf_err < 1e-9
    assert verdict("2 oracle equivalences", ok,
                   f"k-max exact={kmax_ok} ({n_kmax} cases); noisy-OR max|d|={nor_err:.1e} ({n_nor}); "
                   f"components exact={cc_ok} ({n_cc} masks); AP max|d|={ap_err:.1e} ({n_ap}); "
                   f"quadratic form max rel={qf_err:.1e} ({n_qf})")


# 3 ---------------------------------------------------------------------------

def test_criterion_3_synthetic_end_to_end():
    report, _, seconds = synthetic_run(0)
    m = report.mAP[0.5]
    ok = m >= MAP_TARGET and seconds < 300
    assert verdict("3 synthetic end-to-end", ok,
                   f"mAP@0.5={m:.3f} (>= {MAP_TARGET}), average mAP={report.average_map:.3f}, "
                   f"{seconds:.1f}s (< 300s)")


# 4 ---------------------------------------------------------------------------

def test_criterion_4a_metric_loss_helps():
    with_metric = mean_over_seeds("triplet", avg_map)
    without = mean_over_seeds("bbce-only", avg_map)
    ok = with_metric > without
    assert verdict("4a bbce+triplet > bbce alone", ok,
                   f"average mAP over seeds {SEEDS}: {with_metric:.3f} vs {without:.3f}")


def test_criterion_4b_class_distance_vs_generic():
    ours = mean_over_seeds("triplet", avg_map)
    euc = mean_over_seeds("euclidean", avg_map)
    cos = mean_over_seeds("cosine", avg_map)
    ok = ours >= euc and ours >= cos
    assert verdict("4b class distance >= euclidean, cosine", ok,
                   f"average mAP {ours:.3f} vs euclidean {euc:.3f}, cosine {cos:.3f}")


def test_criterion_4c_block_processing():
    on_half = mean_over_seeds("triplet", map_at_half)
    off_half = mean_over_seeds("no-blocks", map_at_half)
    on_avg = mean_over_seeds("triplet", avg_map)
    off_avg = mean_over_seeds("no-blocks", avg_map)
    ok = on_half >= MAP_TARGET and off_half >= MAP_TARGET and on_avg >= off_avg
    assert verdict("4c blocks on/off", ok,
                   f"mAP@0.5 on={on_half:.3f} off={off_half:.3f} (both >= {MAP_TARGET}); "
                   f"average mAP on={on_avg:.3f} >= off={off_avg:.3f}")


# 5 ---------------------------------------------------------------------------

def test_criterion_5_determinism():
    first, blob, _ = synthetic_run(0)
    synthetic_run.cache_clear()
    second, blob2, _ = synthetic_run(0)
    ok = blob == blob2 and first.to_dict() == second.to_dict()
    assert verdict("5 determinism", ok,
                   f"checkpoints bitwise equal={blob == blob2} ({len(blob)} bytes), "
                   f"reports equal={first.to_dict() == second.to_dict()}")


# 6 ---------------------------------------------------------------------------

def _random_ap_instance(rng):
    gts = []
    for _ in range(rng.randint(1, 3)):
        s = rng.randint(0, 8)
        gts.append(GroundTruthSegment(rng.choice("ab"), "c", s, s + rng.randint(1, 4)))
    preds = []
    for _ in range(rng.randint(1, 6)):
        s = rng.randint(0, 8)
        preds.append(Detection(rng.choice("ab"), "c", s, s + rng.randint(1, 4), rng.random()))
    return preds, gts


def test_criterion_6_metric_space_properties(samples=10_000):
    rng = np.random.default_rng(6)
    failures = {}

    def check(name, cond):
        if not cond:
            failures[name] = failures.get(name, 0) + 1

    for _ in range(samples):
        d = int(rng.integers(1, 9))
        u, v, t, w = rng.normal(size=(4, d)) * rng.uniform(0.1, 10)
        duv = class_distance(u, v, w)
        check("symmetry", duv == class_distance(v, u, w))
        check("self-distance", class_distance(u, u, w) == 0.0)
        check("triangle", duv <= class_distance(u, t, w) + class_distance(t, v, w) + 1e-9 * (1 + duv))

        x = rng.normal(size=int(rng.integers(1, 12))) * 20
        c = rng.uniform(-500, 500)
        check("softmax shift", np.max(np.abs(stable_softmax(x + c) - stable_softmax(x))) <= 1e-12)

        p = rng.random(int(rng.integers(1, 8)))
        base = video_class_prob(p)
        check("noisy-OR dominance", base >= p.max() - 1e-15)
        bumped = p.copy()
        i = int(rng.integers(0, p.size))
        bumped[i] = rng.uniform(p[i], 1.0)
        check("noisy-OR monotone", video_class_prob(bumped) >= base - 1e-15)

    prng = random.Random(6)
    for _ in range(samples):
        preds, gts = _random_ap_instance(prng)
        scale, shift = prng.uniform(0.1, 5), prng.uniform(-3, 3)
        warped = [Detection(q.video_id, q.label, q.start, q.end, math.exp(scale * q.score) + shift)
                  for q in preds]
        thr = prng.choice((0.1, 0.3, 0.5, 0.7))
        check("AP rank invariance", match_and_ap(preds, gts, thr) == match_and_ap(warped, gts, thr))

    names = ["symmetry", "self-distance", "triangle", "softmax shift", "noisy-OR dominance",
             "noisy-OR monotone", "AP rank invariance"]
    ok = not failures
    assert verdict("6 metric-space properties", ok,
                   f"{samples} samples each for {', '.join(names)}; violations: {failures or 'none'}")


if __name__ == "__main__":
    status = 0
    for name, fn in sorted(globals().items()):
        if name.startswith("test_criterion_") and callable(fn):
            try:
                fn()
            except AssertionError:
                status = 1
    sys.exit(status)
