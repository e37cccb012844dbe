"""Command-line entry point: synth, train, detect, eval, gradcheck."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from wtal.config import (CLASS_LOSSES, CLASSIFIER_INPUTS, DISTANCES, METRIC_LOSSES, TAIL_MODES,
                         TrainConfig, coerce_value)
from wtal.errors import ConfigError, FormatError, NumericError, OracleError, WtalError
from wtal.evaluation import DEFAULT_THRESHOLDS

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

# localization / evaluation keys accepted in config files next to TrainConfig fields
_EXTRA_KEYS = {"seg_threshold": float, "gamma": float, "class_gate": float,
               "iou_thresholds": str}

# flag dest -> config key
_FLAG_KEYS = {
    "seed": "seed", "epochs": "epochs", "lr": "lr", "lam": "lam", "alpha": "alpha",
    "kappa": "kappa", "block_size": "block_size", "k": "k", "dropout": "dropout",
    "loss": "loss", "metric": "metric", "distance": "distance",
    "classifier_input": "classifier_input", "tail": "tail", "use_blocks": "use_blocks",
    "steps_per_epoch": "steps_per_epoch", "max_segments": "max_segments",
    "custom_rank": "custom_rank", "seg_threshold": "seg_threshold", "gamma": "gamma",
    "class_gate": "class_gate", "iou_thresholds": "iou_thresholds",
}


def read_config_file(path):
    """``key = value`` lines; ``#`` starts a comment."""
    values = {}
    allowed = set(TrainConfig.field_names()) | set(_EXTRA_KEYS)
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key == "lambda":
            key = "lam"
        if key not in allowed:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = value
    return values


def parse_thresholds(text):
    try:
        values = [float(t) for t in str(text).replace(",", " ").split()]
    except ValueError as exc:
        raise ConfigError(f"bad IoU threshold list {text!r}") from exc
    if not values or any(not 0 < t <= 1 for t in values):
        raise ConfigError(f"IoU thresholds must lie in (0, 1], got {text!r}")
    return values


def resolve(args):
    """Merge config file and flags (flags win) into (TrainConfig, extras dict)."""
    raw = read_config_file(args.config) if getattr(args, "config", None) else {}
    for dest, key in _FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            raw[key] = value
    train_kw, extras = {}, {"seg_threshold": 0.5, "gamma": 0.7, "class_gate": None,
                            "iou_thresholds": list(DEFAULT_THRESHOLDS)}
    for key, value in raw.items():
        if key in _EXTRA_KEYS:
            if key == "iou_thresholds":
                extras[key] = parse_thresholds(value)
            else:
                try:
                    extras[key] = float(value)
                except ValueError as exc:
                    raise ConfigError(f"{key}: cannot parse {value!r}") from exc
        elif isinstance(value, str):
            train_kw[key] = coerce_value(TrainConfig, key, value)
        else:
            train_kw[key] = value
    return TrainConfig(**train_kw), extras


def _add_train_flags(p):
    p.add_argument("--config", help="key = value config file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps-per-epoch", dest="steps_per_epoch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--kappa", type=float, help="clipping bound; 'inf' disables clipping")
    p.add_argument("--block-size", dest="block_size", type=int)
    p.add_argument("--no-blocks", dest="use_blocks", action="store_const", const=False,
                   help="one block per video")
    p.add_argument("--k", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--max-segments", dest="max_segments", type=int)
    p.add_argument("--loss", choices=CLASS_LOSSES)
    p.add_argument("--metric", choices=METRIC_LOSSES)
    p.add_argument("--distance", choices=DISTANCES)
    p.add_argument("--custom-rank", dest="custom_rank", type=int)
    p.add_argument("--classifier-input", dest="classifier_input", choices=CLASSIFIER_INPUTS)
    p.add_argument("--tail", choices=TAIL_MODES)


def _add_detect_flags(p):
    p.add_argument("--seg-threshold", dest="seg_threshold", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--class-gate", dest="class_gate", type=float,
                   help="drop classes whose video-level probability is below this")


def build_parser():
    parser = argparse.ArgumentParser(prog="wtal", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset with planted intervals")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    from wtal.synthetic import SynthConfig
    for f in dataclasses.fields(SynthConfig):
        if f.name == "seed":
            continue
        p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=type(f.default),
                       default=f.default)

    p = sub.add_parser("train", help="train on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", help="output checkpoint (default OUT/model.ckpt)")
    p.add_argument("--out", default=".", help="directory for the checkpoint and loss log")
    _add_train_flags(p)

    p = sub.add_parser("detect", help="run a checkpoint over a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="detection file to write")
    p.add_argument("--traces", help="directory for per-video score traces")
    _add_train_flags(p)
    _add_detect_flags(p)

    p = sub.add_parser("eval", help="score detections against ground truth")
    p.add_argument("--detections", required=True)
    p.add_argument("--ground-truth", dest="ground_truth", required=True)
    p.add_argument("--manifest", help="take the class vocabulary from this manifest")
    p.add_argument("--out", help="write the JSON report here")
    p.add_argument("--iou-thresholds", dest="iou_thresholds")
    p.add_argument("--config")

    p = sub.add_parser("gradcheck", help="compare analytic and finite-difference gradients")
    p.add_argument("--instances", type=int, default=1, help="random models per configuration")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--loss", choices=CLASS_LOSSES, action="append")
    p.add_argument("--metric", choices=METRIC_LOSSES, action="append")
    p.add_argument("--distance", choices=DISTANCES, action="append")
    p.add_argument("--tolerance", type=float, default=1e-5)
    return parser


def cmd_synth(args):
    from wtal.synthetic import SynthConfig, generate_synthetic

    kw = {f.name: getattr(args, f.name) for f in dataclasses.fields(SynthConfig)}
    data = generate_synthetic(SynthConfig(**kw))
    data.save(args.out)
    print(f"wrote {len(data.train)} train and {len(data.test)} test videos to {args.out}")
    return EXIT_OK


def cmd_train(args):
    from wtal.data_io import load_dataset
    from wtal.trainer import train

    cfg, _ = resolve(args)
    manifest = Path(args.manifest)
    if not manifest.is_file():
        raise FileNotFoundError(f"manifest not found: {manifest}")
    dataset = load_dataset(manifest)
    out = Path(args.out)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "model.ckpt"
    log_path = out / "loss.tsv"
    out.mkdir(parents=True, exist_ok=True)
    result = train(dataset, cfg, log_path=log_path, checkpoint_path=ckpt)
    if result.steps:
        step, epoch, cls, metric, total = result.steps[-1]
        print(f"final step {step} (epoch {epoch}): {cfg.loss}={cls:.6f} "
              f"metric={metric:.6f} total={total:.6f}")
    else:
        print("no training steps run; checkpoint holds the initialization")
    print(f"checkpoint: {ckpt}\nloss log: {log_path}")
    return EXIT_OK


def cmd_detect(args):
    from wtal.data_io import load_dataset
    from wtal.localization import write_detections, write_trace
    from wtal.model import load_checkpoint
    from wtal.pipeline import detect

    cfg, extras = resolve(args)
    params, kappa, classifier_input = load_checkpoint(args.checkpoint)
    if args.kappa is not None and args.kappa != kappa:
        print(f"warning: --kappa {args.kappa} differs from checkpoint kappa {kappa}; "
              "using the checkpoint value", file=sys.stderr)
    cfg = cfg.with_(kappa=kappa, classifier_input=classifier_input)
    dataset = load_dataset(args.manifest)
    if len(dataset) and dataset.d != params.d:
        raise ConfigError(f"features have d={dataset.d} but the checkpoint expects {params.d}")
    if len(dataset) and dataset.num_classes != params.num_classes:
        raise ConfigError(f"manifest has {dataset.num_classes} classes but the checkpoint "
                          f"has {params.num_classes}")
    traces = {} if args.traces else None
    dets = detect(dataset, params, cfg, extras["seg_threshold"], extras["gamma"],
                  extras["class_gate"], traces)
    write_detections(args.out, dets)
    if traces is not None:
        for vid, probs in traces.items():
            write_trace(Path(args.traces) / f"{vid}.tsv", probs, dataset.classes)
    print(f"wrote {len(dets)} detections for {len(dataset)} videos to {args.out}")
    return EXIT_OK


def cmd_eval(args):
    from wtal.data_io import read_ground_truth, read_manifest
    from wtal.evaluation import evaluate
    from wtal.localization import read_detections

    thresholds = list(DEFAULT_THRESHOLDS)
    if args.config:
        values = read_config_file(args.config)
        if "iou_thresholds" in values:
            thresholds = parse_thresholds(values["iou_thresholds"])
    if args.iou_thresholds:
        thresholds = parse_thresholds(args.iou_thresholds)
    dets = read_detections(args.detections)
    gts = read_ground_truth(args.ground_truth)
    classes = read_manifest(args.manifest)[1] if args.manifest else None
    report = evaluate(dets, gts, thresholds, classes)
    print(report.to_text())
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(report.to_json() + "\n")
    return EXIT_OK


def cmd_gradcheck(args):
    from wtal.gradcheck import format_result, run_gradcheck

    results = run_gradcheck(
        instances=args.instances, seed=args.seed, lam=args.lam, dropout=args.dropout,
        losses=tuple(args.loss or ("bbce", "bce")),
        metrics=tuple(args.metric or METRIC_LOSSES),
        distances=tuple(args.distance or DISTANCES))
    worst = {}
    for r in results:
        print(format_result(r, args.tolerance))
        for name, err in r.errors.items():
            worst[name] = max(worst.get(name, 0.0), err)
    print("max relative error per block: " + " ".join(f"{k}={v:.2e}" for k, v in worst.items()))
    ok = all(r.passed(args.tolerance) for r in results)
    print("gradcheck " + ("passed" if ok else "FAILED"))
    return EXIT_OK if ok else EXIT_NUMERIC


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "detect": cmd_detect, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return COMMANDS[args.command](args)
    except (NumericError, OracleError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, WtalError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
