from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

from wtal.errors import ConfigError

CLASS_LOSSES = ("bbce", "bce", "softmax-mil")
METRIC_LOSSES = ("none", "contrastive", "triplet")
DISTANCES = ("ours", "cosine", "euclidean", "custom")
CLASSIFIER_INPUTS = ("embedded", "raw")
TAIL_MODES = ("merge", "drop")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lam: float = 1.0
    alpha: float = 3.0
    kappa: float = 4.0
    block_size: int = 60
    k: int = 10
    use_blocks: bool = True
    tail: str = "merge"
    dropout: float = 0.5
    batch_classes: int = 4
    videos_per_class: int = 5
    max_segments: int = 300
    epochs: int = 200
    steps_per_epoch: int | None = None  # None: ceil(num_videos / batch size)
    seed: int = 0
    loss: str = "bbce"
    metric: str = "triplet"
    distance: str = "ours"
    custom_rank: int | None = None  # rows of the learnable factor; None means d
    classifier_input: str = "embedded"

    def __post_init__(self):
        self.validate()

    @property
    def batch_size(self):
        return self.batch_classes * self.videos_per_class

    def validate(self):
        positive = ("lr", "alpha", "kappa", "block_size", "k", "batch_classes",
                    "videos_per_class", "max_segments", "adam_eps")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.lam < 0:
            raise ConfigError(f"lam must be non-negative, got {self.lam}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigError("steps_per_epoch must be >= 1")
        if self.custom_rank is not None and self.custom_rank < 1:
            raise ConfigError("custom_rank must be >= 1")
        for name, allowed in (("loss", CLASS_LOSSES), ("metric", METRIC_LOSSES),
                              ("distance", DISTANCES), ("tail", TAIL_MODES),
                              ("classifier_input", CLASSIFIER_INPUTS)):
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if math.isnan(self.kappa):
            raise ConfigError("kappa is NaN")

    def with_(self, **changes):
        return replace(self, **changes)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


def coerce_value(cls, name, raw):
    """Parse a string value for a dataclass field using its default's type."""
    by_name = {f.name: f for f in fields(cls)}
    if name not in by_name:
        raise ConfigError(f"unknown config key {name!r}")
    f = by_name[name]
    default = f.default if f.default is not field else None
    text = str(raw).strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    try:
        if name in ("steps_per_epoch", "custom_rank"):
            return None if text.lower() in ("", "none") else int(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from exc
    return text
