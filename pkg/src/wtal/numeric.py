"""Elementwise numerics, seeded random streams and a finite-difference oracle.

All arrays are float64 numpy arrays. Nothing here mutates its inputs.
"""

from __future__ import annotations

import math

import numpy as np

from wtal.errors import InvalidParameterError, OracleError

PROB_EPS = 1e-7
NORM_EPS = 1e-12


def _check_kappa(kappa):
    if not kappa > 0:
        raise InvalidParameterError(f"clipping bound must be positive, got {kappa}")


def clip_phi(x, kappa):
    """Clip into [-kappa, kappa]. ``kappa=inf`` disables clipping."""
    _check_kappa(kappa)
    if np.isscalar(x):
        return float(min(max(x, -kappa), kappa))
    return np.clip(x, -kappa, kappa)


def clip_phi_grad(x, kappa):
    # subgradient 1 on the closed interval, so saturation onset still passes gradient
    _check_kappa(kappa)
    return (np.abs(np.asarray(x, dtype=np.float64)) <= kappa).astype(np.float64)


def stable_sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def softplus(x):
    """log(1 + e^x) without overflow."""
    return np.logaddexp(0.0, x)


def stable_softmax(v, axis=-1):
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise InvalidParameterError("softmax of an empty vector")
    shifted = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def make_rng(seed):
    return np.random.default_rng(np.random.SeedSequence(seed))


def split_rng(seed, names):
    """Independent named substreams derived from one seed.

    The mapping is keyed by position in ``names``, so reordering names changes
    which stream each one receives.
    """
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: np.random.default_rng(child) for name, child in zip(names, children)}


def finite_diff_grad(f, theta, h=1e-6):
    """Central-difference gradient of a scalar function of a flat vector."""
    if not h > 0:
        raise InvalidParameterError(f"step must be positive, got {h}")
    theta = np.array(theta, dtype=np.float64).ravel()
    grad = np.empty_like(theta)
    for j in range(theta.size):
        orig = theta[j]
        theta[j] = orig + h
        fp = f(theta)
        theta[j] = orig - h
        fm = f(theta)
        theta[j] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise OracleError(f"non-finite objective at coordinate {j}: f+={fp}, f-={fm}")
        grad[j] = (fp - fm) / (2.0 * h)
    return grad


def max_relative_error(analytic, numeric, floor=1e-12):
    """Block-wise relative error: max|a - n| / max(max|a|, max|n|).

    Two all-zero blocks compare as zero error.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    scale = max(np.max(np.abs(a)), np.max(np.abs(n)), floor)
    return float(np.max(np.abs(a - n)) / scale)
