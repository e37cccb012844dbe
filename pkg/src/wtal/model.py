"""Embedding layer plus clipped linear classifier.

Forward for one video with features ``x`` (n, d)::

    a = x W_e^T + b_e          pre-activation
    u = relu(a) * mask         mask is inverted dropout, ones at eval time
    r = inp W_f^T + b          inp is u (default) or the raw x
    s = clip(r, -kappa, kappa)

Row ``c`` of ``W_f`` doubles as the projection of the class-``c`` distance used
by the metric loss.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from wtal.errors import FormatError, InvalidParameterError, ShapeError
from wtal.numeric import clip_phi, clip_phi_grad

BLOCK_NAMES = ("W_e", "b_e", "W_f", "b", "L")


@dataclass
class ModelParams:
    W_e: np.ndarray  # (d, d)
    b_e: np.ndarray  # (d,)
    W_f: np.ndarray  # (C, d)
    b: np.ndarray  # (C,)
    L: np.ndarray | None = None  # (C, r, d) factor of the learnable per-class metric

    @property
    def d(self):
        return self.W_e.shape[0]

    @property
    def num_classes(self):
        return self.W_f.shape[0]

    @property
    def rank(self):
        return 0 if self.L is None else self.L.shape[1]

    def blocks(self):
        out = {"W_e": self.W_e, "b_e": self.b_e, "W_f": self.W_f, "b": self.b}
        if self.L is not None:
            out["L"] = self.L
        return out

    def copy(self):
        return ModelParams(**{k: v.copy() for k, v in self.blocks().items()})

    def zeros_like(self):
        return ModelParams(**{k: np.zeros_like(v) for k, v in self.blocks().items()})

    def flatten(self):
        return np.concatenate([v.ravel() for v in self.blocks().values()])

    def unflatten(self, flat):
        out, pos = {}, 0
        for name, v in self.blocks().items():
            out[name] = np.asarray(flat[pos:pos + v.size], dtype=np.float64).reshape(v.shape).copy()
            pos += v.size
        return ModelParams(**out)

    def all_finite(self):
        return all(np.all(np.isfinite(v)) for v in self.blocks().values())

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        a, b = self.blocks(), other.blocks()
        return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


@dataclass
class ForwardCache:
    x: np.ndarray  # (n, d) float64 input
    a: np.ndarray  # (n, d) embedding pre-activation
    mask: np.ndarray  # (n, d) dropout multiplier
    u: np.ndarray  # (n, d) embedded features
    r: np.ndarray  # (n, C) pre-clip scores
    s: np.ndarray  # (n, C) clipped activations
    kappa: float
    classifier_input: str = "embedded"

    @property
    def n(self):
        return self.s.shape[0]


def init_params(d, num_classes, rng, custom_rank=0):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.

    With ``custom_rank > 0`` a per-class metric factor ``L`` is added and set to
    the first ``custom_rank`` rows of the identity, so the learnable distance
    starts out Euclidean.
    """
    if d < 1 or num_classes < 1:
        raise InvalidParameterError(f"dimensions must be >= 1, got d={d}, C={num_classes}")
    bound = 1.0 / math.sqrt(d)
    W_e = rng.uniform(-bound, bound, size=(d, d))
    W_f = rng.uniform(-bound, bound, size=(num_classes, d))
    L = None
    if custom_rank:
        if custom_rank > d:
            raise InvalidParameterError(f"custom rank {custom_rank} exceeds d={d}")
        L = np.repeat(np.eye(d)[None, :custom_rank, :], num_classes, axis=0)
    return ModelParams(W_e, np.zeros(d), W_f, np.zeros(num_classes), L)


def forward(features, params: ModelParams, kappa, dropout_rate=0.0, training=False,
            rng=None, classifier_input="embedded") -> ForwardCache:
    x = np.asarray(getattr(features, "features", features), dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.d:
        raise ShapeError(f"features of shape {x.shape} do not match model dimension {params.d}")
    if not 0.0 <= dropout_rate < 1.0:
        raise InvalidParameterError(f"dropout rate must lie in [0, 1), got {dropout_rate}")
    a = x @ params.W_e.T + params.b_e
    h = np.maximum(a, 0.0)
    if training and dropout_rate > 0.0:
        if rng is None:
            raise InvalidParameterError("training-mode dropout needs an rng")
        keep = rng.random(a.shape) >= dropout_rate
        mask = keep / (1.0 - dropout_rate)
    else:
        mask = np.ones_like(a)
    u = h * mask
    inp = u if classifier_input == "embedded" else x
    r = inp @ params.W_f.T + params.b
    s = clip_phi(r, kappa)
    return ForwardCache(x, a, mask, u, r, s, kappa, classifier_input)


def forward_batch(sequences, params: ModelParams, kappa, dropout_rate=0.0, training=False,
                  rng=None, classifier_input="embedded"):
    """Forward several videos in one pass; returns per-video caches (views into shared arrays).

    Dropout draws one mask for the stacked segments, so results depend on the
    video order but not on how videos are grouped into calls.
    """
    xs = [np.asarray(getattr(q, "features", q), dtype=np.float64) for q in sequences]
    if not xs:
        return []
    big = forward(np.concatenate(xs), params, kappa, dropout_rate, training, rng, classifier_input)
    caches, pos = [], 0
    for x in xs:
        sl = slice(pos, pos + x.shape[0])
        caches.append(ForwardCache(big.x[sl], big.a[sl], big.mask[sl], big.u[sl], big.r[sl],
                                   big.s[sl], kappa, classifier_input))
        pos += x.shape[0]
    return caches


def stack_caches(caches):
    """One cache covering all segments of ``caches`` in order."""
    first = caches[0]
    cat = [np.concatenate([getattr(c, f) for c in caches]) for f in ("x", "a", "mask", "u", "r", "s")]
    return ForwardCache(*cat, first.kappa, first.classifier_input)


def backward(cache: ForwardCache, grad_s, grad_u, params: ModelParams, grads: ModelParams):
    """Accumulate parameter gradients into ``grads`` given dLoss/ds and dLoss/du.

    ``grad_u`` is the part of dLoss/du that does not flow through ``s``; it may
    be None.
    """
    grad_r = grad_s * clip_phi_grad(cache.r, cache.kappa)
    embedded = cache.classifier_input == "embedded"
    inp = cache.u if embedded else cache.x
    grads.W_f += grad_r.T @ inp
    grads.b += grad_r.sum(axis=0)
    gu = np.zeros_like(cache.u) if grad_u is None else np.array(grad_u, dtype=np.float64)
    if embedded:
        gu += grad_r @ params.W_f
    if not gu.any():
        return grads
    grad_a = gu * cache.mask * (cache.a > 0)
    grads.W_e += grad_a.T @ cache.x
    grads.b_e += grad_a.sum(axis=0)
    return grads


# Checkpoint layout (little-endian): header then float64 blocks W_e, b_e, W_f, b[, L].
CKPT_MAGIC = b"WTALCKPT"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<8sIIIIId")
_INPUT_CODES = {"embedded": 0, "raw": 1}


def save_checkpoint(path, params: ModelParams, kappa, classifier_input="embedded"):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = _CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, params.d, params.num_classes,
                               params.rank, _INPUT_CODES[classifier_input], float(kappa))
    with open(path, "wb") as fh:
        fh.write(header)
        for v in params.blocks().values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Return (params, kappa, classifier_input)."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _CKPT_HEADER.size:
        raise FormatError(f"{path}: truncated checkpoint header", path, len(raw))
    magic, version, d, C, rank, code, kappa = _CKPT_HEADER.unpack_from(raw, 0)
    if magic != CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {magic!r} at byte offset 0", path, 0)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}", path, 8)
    shapes = [("W_e", (d, d)), ("b_e", (d,)), ("W_f", (C, d)), ("b", (C,))]
    if rank:
        shapes.append(("L", (C, rank, d)))
    expected = _CKPT_HEADER.size + 8 * sum(math.prod(s) for _, s in shapes)
    if len(raw) != expected:
        raise FormatError(f"{path}: checkpoint size mismatch, expected {expected} bytes, "
                          f"got {len(raw)}", path, min(len(raw), expected))
    pos, blocks = _CKPT_HEADER.size, {}
    for name, shape in shapes:
        count = math.prod(shape)
        blocks[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * count
    inputs = {v: k for k, v in _INPUT_CODES.items()}
    return ModelParams(**blocks), kappa, inputs.get(code, "embedded")
