"""Weakly supervised temporal action localization from video-level labels.

A two-layer model scores every segment of a video; block-wise k-max pooling and
noisy-OR turn those scores into video-level class probabilities, a class-specific
metric loss shapes the embedding, and thresholded score runs become detections.
"""

from wtal.config import TrainConfig
from wtal.data_io import Dataset, FeatureSequence, GroundTruthSegment
from wtal.localization import Detection
from wtal.model import ForwardCache, ModelParams
from wtal.synthetic import SynthConfig

__version__ = "0.1.0"

__all__ = ["Dataset", "Detection", "FeatureSequence", "ForwardCache", "GroundTruthSegment",
           "ModelParams", "SynthConfig", "TrainConfig"]
