"""Classification and metric objectives with hand-written gradients.

Classification: per block, the mean of the k largest activations gives a
block logit ``m``; blocks combine by noisy-OR into a video probability, and
balanced binary cross-entropy compares that with the video labels.

Metric: for a class ``c`` shared by a group of videos, each video is summarised
by softmax-attention pooled embeddings (high- and low-attention), projected to
the unit sphere, and a hinge loss pulls same-class summaries together while
pushing them away from the low-attention summaries of the other videos.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from wtal.errors import (DegenerateVideoError, EmptyVideoError, InvalidParameterError,
                         ShapeError)
from wtal.model import ModelParams, backward, forward, stack_caches
from wtal.numeric import NORM_EPS, PROB_EPS, softplus, stable_sigmoid, stable_softmax


@dataclass(frozen=True)
class BlockPartition:
    ranges: tuple  # inclusive (start, end) pairs
    block_size: int
    k: int

    @property
    def num_blocks(self):
        return len(self.ranges)


@dataclass(frozen=True)
class ClassBatchGroup:
    """Batch positions of the videos sampled for a shared class."""

    label: int
    members: tuple


@dataclass
class LossReport:
    bbce: float  # classification term, whichever variant was configured
    metric: float
    total: float
    grads: ModelParams


def partition_blocks(n, block_size, k=10, tail="merge"):
    if n < 1:
        raise EmptyVideoError("cannot partition a video with no segments")
    if block_size < 1 or k < 1:
        raise InvalidParameterError(f"block size and k must be >= 1, got {block_size}, {k}")
    if n < block_size:
        return BlockPartition(((0, n - 1),), n, min(k, n))
    nb = n // block_size
    ranges = [(i * block_size, (i + 1) * block_size - 1) for i in range(nb)]
    if tail == "merge" and n > nb * block_size:
        ranges[-1] = (ranges[-1][0], n - 1)
    return BlockPartition(tuple(ranges), block_size, min(k, block_size))


def video_partition(n, cfg):
    size = cfg.block_size if cfg.use_blocks else n
    return partition_blocks(n, size, cfg.k, cfg.tail)


def kmax_indices(scores, k):
    """Indices of the k largest entries along axis 0; ties go to the lower index."""
    return np.argsort(-np.asarray(scores), axis=0, kind="stable")[:k]


def block_class_prob(block_scores, k):
    scores = np.asarray(block_scores, dtype=np.float64)
    if not 1 <= k <= scores.size:
        raise InvalidParameterError(f"k={k} out of range for a block of {scores.size}")
    return stable_sigmoid(scores[kmax_indices(scores, k)].mean())


def video_class_prob(block_probs):
    """Noisy-OR of block probabilities, accumulated in the log domain."""
    p = np.clip(np.asarray(block_probs, dtype=np.float64), 0.0, 1.0)
    with np.errstate(divide="ignore"):
        log_q = np.sum(np.log1p(-p))
    return float(-np.expm1(log_q))


def block_logits(s, partition):
    """k-max block means ``m`` (nB, C) and the selected global indices per block."""
    s = np.asarray(s, dtype=np.float64)
    m = np.empty((partition.num_blocks, s.shape[1]))
    chosen = []
    for i, (lo, hi) in enumerate(partition.ranges):
        k = min(partition.k, hi - lo + 1)
        idx = kmax_indices(s[lo:hi + 1], k) + lo  # (k, C)
        m[i] = np.take_along_axis(s, idx, axis=0).mean(axis=0)
        chosen.append(idx)
    return m, chosen


def video_class_probs(s, partition):
    """Video-level class probabilities (C,) from clipped activations."""
    m, _ = block_logits(s, partition)
    return -np.expm1(-softplus(m).sum(axis=0))


def _label_vector(labels, num_classes):
    # sets hold class indices; anything else is a binary vector
    if isinstance(labels, (set, frozenset)):
        y = np.zeros(num_classes)
        y[list(labels)] = 1.0
        return y
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != (num_classes,):
        raise ShapeError(f"label vector shape {y.shape} != ({num_classes},)")
    return y


def _balanced_weights(y, balanced):
    num_classes = y.size
    if not balanced:
        return y / num_classes, (1.0 - y) / num_classes
    npos, nneg = y.sum(), (1.0 - y).sum()
    wpos = y / npos if npos > 0 else np.zeros_like(y)
    wneg = (1.0 - y) / nneg if nneg > 0 else np.zeros_like(y)
    return wpos, wneg


def bbce_loss(video_probs, labels, balanced=True):
    """Balanced binary cross-entropy, minimised at perfect prediction.

    Each of the positive and negative sums is normalised by its own class
    count; an empty side is dropped. ``balanced=False`` gives plain BCE
    averaged over classes.
    """
    P = np.asarray(video_probs, dtype=np.float64)
    if P.size == 0:
        raise InvalidParameterError("no classes")
    y = _label_vector(labels, P.size)
    Pc = np.clip(P, PROB_EPS, 1.0 - PROB_EPS)
    wpos, wneg = _balanced_weights(y, balanced)
    return float(-(wpos @ np.log(Pc) + wneg @ np.log1p(-Pc)))


def classification_loss(s, labels, partition, variant="bbce"):
    """Loss and dLoss/ds for one video."""
    s = np.asarray(s, dtype=np.float64)
    y = _label_vector(labels, s.shape[1])
    m, chosen = block_logits(s, partition)
    if variant in ("bbce", "bce"):
        # log(1 - P) is the log of the noisy-OR product itself; taking it from
        # log_q rather than from P keeps precision when P is close to 1
        log_q = -softplus(m).sum(axis=0)
        Q = np.exp(log_q)
        P = -np.expm1(log_q)
        Pc = np.clip(P, PROB_EPS, 1.0 - PROB_EPS)
        log_1mP = np.clip(log_q, np.log(PROB_EPS), np.log1p(-PROB_EPS))
        inside = (P > PROB_EPS) & (P < 1.0 - PROB_EPS)
        wpos, wneg = _balanced_weights(y, variant == "bbce")
        loss = -(wpos @ np.log(Pc) + wneg @ log_1mP)
        # dP/dm_i = Q * sigmoid(m_i), dlog(1-P)/dm_i = -sigmoid(m_i)
        dm = (-wpos * Q / Pc + wneg) * inside * stable_sigmoid(m)
    elif variant == "softmax-mil":
        # cross-entropy between the normalised label vector and a softmax over
        # classes of the block-averaged k-max logits
        logits = m.mean(axis=0)
        npos = y.sum()
        if npos == 0:
            return 0.0, np.zeros_like(s)
        t = y / npos
        shifted = logits - logits.max()
        log_sm = shifted - np.log(np.exp(shifted).sum())
        loss = -(t @ log_sm)
        dm = np.broadcast_to((np.exp(log_sm) - t) / m.shape[0], m.shape)
    else:
        raise InvalidParameterError(f"unknown classification loss {variant!r}")
    grad = np.zeros_like(s)
    cols = np.arange(s.shape[1])
    for i, idx in enumerate(chosen):
        # rows within one column of idx are distinct, so fancy += is exact
        grad[idx, cols] += dm[i] / idx.shape[0]
    return float(loss), grad


def attention_weights(s_col):
    return stable_softmax(s_col)


def _normalize(z):
    norm = float(np.linalg.norm(z))
    used = norm + NORM_EPS if norm < NORM_EPS else norm
    return z / used


def _normalize_backward(z, g):
    norm = float(np.linalg.norm(z))
    if norm >= NORM_EPS:
        zt = z / norm
        return (g - zt * (zt @ g)) / norm
    used = norm + NORM_EPS
    if norm == 0.0:
        return g / used
    return g / used - z * (z @ g) / (norm * used * used)


def aggregate_features(u, pi):
    """High/low-attention pooled embeddings and their unit-norm versions."""
    u = np.asarray(u, dtype=np.float64)
    pi = np.asarray(pi, dtype=np.float64)
    n = u.shape[0]
    if n < 2:
        raise DegenerateVideoError("a video needs >= 2 segments for low-attention pooling")
    z_pos = pi @ u
    z_neg = ((1.0 - pi) / (n - 1)) @ u
    return z_pos, z_neg, _normalize(z_pos), _normalize(z_neg)


def class_distance(u, v, w_row):
    """|<w, u - v>|: the seminorm induced by the rank-1 metric w^T w."""
    u, v, w = (np.asarray(a, dtype=np.float64) for a in (u, v, w_row))
    if not (u.shape == v.shape == w.shape):
        raise ShapeError(f"shape mismatch: {u.shape}, {v.shape}, {w.shape}")
    return float(abs(w @ (u - v)))


def _pair_mask(N):
    return 1.0 - np.eye(N)


def pair_distances(A, B, distance="ours", proj=None):
    """Mean positive and negative pair distances over ordered pairs j != j'.

    ``A`` rows are the unit high-attention summaries, ``B`` rows the
    low-attention ones. ``proj`` is the (r, d) projection for the squared
    projected distances: a single classifier row for ``ours``, the learnable
    factor for ``custom``; ``euclidean`` ignores it. ``cosine`` uses 1 - <a, b>.
    """
    d_pos, d_neg, _ = _pair_distances_with_grad(A, B, distance, proj)
    return d_pos, d_neg


def _pair_distances_with_grad(A, B, distance, proj):
    N = A.shape[0]
    if N < 2:
        raise InvalidParameterError(f"need >= 2 videos for pair distances, got {N}")
    O = _pair_mask(N)
    denom = N * (N - 1)
    if distance == "cosine":
        d_pos = float((O * (1.0 - A @ A.T)).sum() / denom)
        d_neg = float((O * (1.0 - A @ B.T)).sum() / denom)

        def back(g_pos, g_neg):
            dA = -(2.0 * g_pos / denom) * (O @ A) - (g_neg / denom) * (O @ B)
            dB = -(g_neg / denom) * (O.T @ A)
            return dA, dB, None

        return d_pos, d_neg, back

    P = None if distance == "euclidean" else proj
    if distance in ("ours", "custom") and P is None:
        raise InvalidParameterError(f"distance {distance!r} needs a projection")
    pA = A if P is None else A @ P.T
    pB = B if P is None else B @ P.T
    diff_p = pA[:, None, :] - pA[None, :, :]
    diff_n = (pA[:, None, :] - pB[None, :, :]) * O[:, :, None]
    d_pos = float((diff_p ** 2).sum() / denom)
    d_neg = float((diff_n ** 2).sum() / denom)

    def back(g_pos, g_neg):
        dpA = (4.0 * g_pos / denom) * diff_p.sum(axis=1) + (2.0 * g_neg / denom) * diff_n.sum(axis=1)
        dpB = -(2.0 * g_neg / denom) * diff_n.sum(axis=0)
        if P is None:
            return dpA, dpB, None
        return dpA @ P, dpB @ P, dpA.T @ A + dpB.T @ B

    return d_pos, d_neg, back


def metric_loss(d_pos, d_neg, alpha, variant="triplet"):
    if variant == "triplet":
        return max(0.0, d_pos - d_neg + alpha)
    if variant == "contrastive":
        return d_pos + max(0.0, alpha - d_neg)
    raise InvalidParameterError(f"unknown metric loss {variant!r}")


def metric_loss_grad(d_pos, d_neg, alpha, variant="triplet"):
    """(dL/dd_pos, dL/dd_neg); the hinge contributes zero when inactive."""
    if variant == "triplet":
        active = d_pos - d_neg + alpha > 0
        return (1.0, -1.0) if active else (0.0, 0.0)
    if variant == "contrastive":
        return 1.0, (-1.0 if alpha - d_neg > 0 else 0.0)
    raise InvalidParameterError(f"unknown metric loss {variant!r}")


def _group_projection(params, label, distance):
    if distance == "ours":
        return params.W_f[label:label + 1]
    if distance == "custom":
        if params.L is None:
            raise InvalidParameterError("custom distance requires params with a metric factor")
        return params.L[label]
    return None


def group_summaries(caches, group: ClassBatchGroup):
    """Per-member attention, pooled features and unit summaries for one group."""
    c = group.label
    out = []
    for j in group.members:
        cache = caches[j]
        pi = attention_weights(cache.s[:, c])
        z_pos, z_neg, zt_pos, zt_neg = aggregate_features(cache.u, pi)
        out.append((j, pi, z_pos, z_neg, zt_pos, zt_neg))
    return out


def valid_group(caches, group):
    members = tuple(j for j in group.members if caches[j].n >= 2)
    if len(members) < 2:
        return None
    return ClassBatchGroup(group.label, members)


def metric_pair_distances(caches, group, params, distance="ours"):
    summ = group_summaries(caches, group)
    A = np.stack([t[4] for t in summ])
    B = np.stack([t[5] for t in summ])
    return pair_distances(A, B, distance, _group_projection(params, group.label, distance))


def total_loss_and_grads(caches, labels, groups, params: ModelParams, cfg,
                         need_grads=True) -> LossReport:
    """Batch objective ``cls + lam * metric`` and its gradient for every block.

    ``labels`` holds one label set (or binary vector) per cache. The metric term
    is the mean over groups that keep >= 2 members with >= 2 segments.
    """
    if not caches:
        raise InvalidParameterError("empty batch")
    nvid = len(caches)
    C = params.num_classes
    grads = params.zeros_like()
    grad_s = [np.zeros_like(c.s) for c in caches]
    grad_u = [np.zeros_like(c.u) for c in caches]

    cls = 0.0
    for i, cache in enumerate(caches):
        part = video_partition(cache.n, cfg)
        loss, gs = classification_loss(cache.s, _label_vector(labels[i], C), part, cfg.loss)
        cls += loss / nvid
        grad_s[i] += gs / nvid

    metric = 0.0
    if cfg.metric != "none":
        usable = [g for g in (valid_group(caches, g) for g in groups) if g is not None]
        scale = cfg.lam / len(usable) if usable else 0.0
        for group in usable:
            c = group.label
            summ = group_summaries(caches, group)
            A = np.stack([t[4] for t in summ])
            B = np.stack([t[5] for t in summ])
            proj = _group_projection(params, c, cfg.distance)
            d_pos, d_neg, back = _pair_distances_with_grad(A, B, cfg.distance, proj)
            metric += metric_loss(d_pos, d_neg, cfg.alpha, cfg.metric) / len(usable)
            if not need_grads or scale == 0.0:
                continue
            g_pos, g_neg = metric_loss_grad(d_pos, d_neg, cfg.alpha, cfg.metric)
            if g_pos == 0.0 and g_neg == 0.0:
                continue
            dA, dB, dP = back(scale * g_pos, scale * g_neg)
            if dP is not None:
                if cfg.distance == "ours":
                    grads.W_f[c] += dP[0]
                else:
                    grads.L[c] += dP
            for row, (j, pi, z_pos, z_neg, _, _) in enumerate(summ):
                u = caches[j].u
                n = u.shape[0]
                dz_pos = _normalize_backward(z_pos, dA[row])
                dz_neg = _normalize_backward(z_neg, dB[row])
                grad_u[j] += np.outer(pi, dz_pos) + np.outer((1.0 - pi) / (n - 1), dz_neg)
                dpi = u @ dz_pos - (u @ dz_neg) / (n - 1)
                grad_s[j][:, c] += pi * (dpi - pi @ dpi)

    total = cls + cfg.lam * metric
    if need_grads:
        # a single backward over the stacked segments; same sums, fewer calls
        backward(stack_caches(caches), np.concatenate(grad_s), np.concatenate(grad_u),
                 params, grads)
    return LossReport(float(cls), float(metric), float(total), grads)


def batch_loss(batch, groups, params, cfg, rng=None, training=False):
    """Forward every video then evaluate the objective; convenience for checks."""
    caches = [forward(seq, params, cfg.kappa, cfg.dropout, training, rng, cfg.classifier_input)
              for seq, _ in batch]
    return total_loss_and_grads(caches, [y for _, y in batch], groups, params, cfg)
