"""Inference over a dataset and the synthetic train/detect/evaluate loop."""

from __future__ import annotations

from wtal.config import TrainConfig
from wtal.evaluation import DEFAULT_THRESHOLDS, evaluate
from wtal.localization import localize, segment_probs
from wtal.losses import video_class_probs, video_partition
from wtal.model import forward
from wtal.synthetic import generate_synthetic
from wtal.trainer import train


# Training length for the desk-scale synthetic suite. With d=32 each Adam step
# moves a score by roughly lr times the feature L1 norm, far less than with
# 2048-d inputs, so one pass over 25 videos per epoch (2 batches) is too short;
# much longer runs overfit the k-max pooling and fragment detections.
SYNTHETIC_EPOCHS = 200
SYNTHETIC_STEPS_PER_EPOCH = 5


def synthetic_train_config(seed=0, **changes):
    """Default hyperparameters with the synthetic suite's training length."""
    return TrainConfig(epochs=SYNTHETIC_EPOCHS, steps_per_epoch=SYNTHETIC_STEPS_PER_EPOCH,
                       seed=seed, **changes)


def detect(dataset, params, cfg, seg_threshold=0.5, gamma=0.7, class_gate=None, traces=None):
    """Detections for every video; ``traces`` (a dict) collects per-video probabilities."""
    dets = []
    for seq in dataset.videos:
        cache = forward(seq, params, cfg.kappa, classifier_input=cfg.classifier_input)
        ybar = video_class_probs(cache.s, video_partition(seq.n, cfg))
        if traces is not None:
            traces[seq.video_id] = segment_probs(cache)
        dets.extend(localize(cache, ybar, seq.fps, seq.frames_per_segment, seq.video_id,
                             dataset.classes, seg_threshold, gamma, class_gate))
    return dets


def run_synthetic(synth_cfg, train_cfg, thresholds=DEFAULT_THRESHOLDS):
    """Generate, train on the train split, evaluate on the test split."""
    data = generate_synthetic(synth_cfg)
    result = train(data.train, train_cfg)
    dets = detect(data.test, result.params, train_cfg)
    report = evaluate(dets, data.test_gt, thresholds, classes=data.test.classes)
    return report, result
