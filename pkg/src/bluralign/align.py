"""Similarity, symmetric contrastive loss, and the distribution-aware boundary loss.

Loss functions return ``(value, grad)`` where ``grad`` is the derivative with
respect to their first argument.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax, softmax

from . import _instrument

# upper alpha/2 standard-normal quantiles for the commonly used confidence levels
_Z_TABLE = {0.10: 1.6448536269514722, 0.05: 1.959963984540054, 0.01: 2.5758293035489004}


def normal_cdf(x):
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def upper_quantile(alpha):
    """``z`` with P(N(0,1) > z) = alpha / 2."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    for key, z in _Z_TABLE.items():
        if abs(alpha - key) < 1e-15:
            return z
    target = 1.0 - alpha / 2.0
    lo, hi = 0.0, 40.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if normal_cdf(mid) < target:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-15:
            break
    return 0.5 * (lo + hi)


def normalize_rows(x):
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("cannot normalise a zero-norm vector")
    return x / norms, norms


def normalize_backward(unit, norms, grad):
    """Gradient through ``u -> u / |u|`` given the unit vectors and original norms."""
    return (grad - unit * np.sum(grad * unit, axis=-1, keepdims=True)) / norms


@dataclass
class SimilarityBatch:
    matrix: np.ndarray

    @property
    def diagonal(self):
        return np.diag(self.matrix).copy()


def cosine_similarity_matrix(z, y):
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if z.shape != y.shape:
        raise ValueError(f"batch shapes differ: {z.shape} vs {y.shape}")
    zu, _ = normalize_rows(z)
    yu, _ = normalize_rows(y)
    return SimilarityBatch(np.clip(zu @ yu.T, -1.0, 1.0))


def clip_contrastive_loss(sim, temperature):
    """Mean of row-wise and column-wise cross-entropy of ``sim / t`` against the diagonal."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    s = sim.matrix if isinstance(sim, SimilarityBatch) else np.asarray(sim, dtype=np.float64)
    b = s.shape[0]
    logits = s / temperature
    idx = np.arange(b)
    row_ls = log_softmax(logits, axis=1)
    col_ls = log_softmax(logits, axis=0)
    loss = -0.5 * (row_ls[idx, idx].mean() + col_ls[idx, idx].mean())
    eye = np.eye(b)
    d_logits = 0.5 * ((softmax(logits, axis=1) - eye) + (softmax(logits, axis=0) - eye)) / b
    return float(loss), d_logits / temperature


@dataclass
class CalibrationStats:
    mean: float
    std: float
    alpha: float
    z: float
    lower: float
    upper: float
    outlier_mask: np.ndarray

    @property
    def outlier_fraction(self):
        return float(self.outlier_mask.mean())


def batch_stats(s, alpha=0.05):
    """Population mean/std of matched similarities and the (1 - alpha) outlier interval."""
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 1 or s.size < 2:
        raise ValueError("batch statistics need at least two similarities")
    mean = float(s.mean())
    std = float(np.sqrt(np.mean((s - mean) ** 2)))
    z = upper_quantile(alpha)
    lower, upper = mean - z * std, mean + z * std
    mask = (s < lower) | (s > upper)
    return CalibrationStats(mean, std, alpha, z, lower, upper, mask)


def boundary_loss(s, stats=None, alpha=0.05, detach=True):
    """Hinge pull of outlying matched similarities back into the confidence interval.

    With ``detach`` the interval is a constant; otherwise the gradient also
    flows through the batch mean and standard deviation.  Returns 0 when no
    sample lies outside the interval.
    """
    _instrument.hit("bound")
    s = np.asarray(s, dtype=np.float64)
    if stats is None:
        stats = batch_stats(s, alpha)
    left = np.maximum(stats.lower - s, 0.0)
    right = np.maximum(s - stats.upper, 0.0)
    mask = stats.outlier_mask
    count = int(mask.sum())
    grad = np.zeros_like(s)
    if count == 0:
        return 0.0, grad
    loss = float(np.sum((left + right)[mask]) / count)
    below = mask & (left > 0)
    above = mask & (right > 0)
    grad[below] -= 1.0 / count
    grad[above] += 1.0 / count
    if not detach:
        b = s.size
        n_below, n_above = below.sum(), above.sum()
        d_mean = np.full(b, 1.0 / b)
        if stats.std > 0:
            d_std = (s - stats.mean) / (b * stats.std)
        else:
            d_std = np.zeros(b)
        # d lower = d_mean - z d_std ; d upper = d_mean + z d_std
        grad += (n_below * (d_mean - stats.z * d_std) - n_above * (d_mean + stats.z * d_std)) / count
    return loss, grad


def overall_loss(clip, bound, entropy, w1=0.01, w2=0.01):
    return clip + w1 * bound + w2 * entropy
