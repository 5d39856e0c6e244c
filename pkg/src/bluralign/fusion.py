"""EEG-query attention that mixes the saliency-blurred and center-blurred images.

Attention is scored on a coarse grid of cells.  Each cell's key comes from the
8-vector [RGB of X_A, RGB of X_B, x, y] mapped through ``key_proj``; the EEG
embedding mapped through ``query_proj`` is the query.  Scores are mean-centred
and squashed with a sigmoid, so there is no sum-to-one coupling across cells.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import expit

from . import _instrument

N_KEY_FEATURES = 8
DEFAULT_GRID = (32, 32)


@lru_cache(maxsize=64)
def _area_cached(n_in, n_out):
    # overlap of source pixel [i, i+1) with output cell [j*r, (j+1)*r), r = n_in / n_out
    ratio = n_in / n_out
    mat = np.zeros((n_out, n_in))
    for j in range(n_out):
        lo, hi = j * ratio, (j + 1) * ratio
        for i in range(int(np.floor(lo)), min(n_in, int(np.ceil(hi)))):
            overlap = min(hi, i + 1) - max(lo, i)
            if overlap > 0:
                mat[j, i] = overlap / ratio
    mat.setflags(write=False)
    return mat


def area_matrix(n_in, n_out):
    """Area-averaging resampler from ``n_in`` samples to ``n_out`` cells (rows sum to 1)."""
    if n_out < 1 or n_in < n_out:
        raise ValueError(f"cannot area-downsample {n_in} samples to {n_out} cells")
    return _area_cached(int(n_in), int(n_out))


@lru_cache(maxsize=64)
def _bilinear_cached(n_out, n_in):
    mat = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(mat, (rows, lo), 1.0 - frac)
    np.add.at(mat, (rows, hi), frac)
    mat.setflags(write=False)
    return mat


def bilinear_matrix(n_out, n_in):
    """Half-pixel-centred linear interpolation from ``n_in`` cells to ``n_out`` samples."""
    return _bilinear_cached(int(n_out), int(n_in))


def downsample(img, grid):
    """Area-average an H x W (x C) array onto a ``grid`` of cells."""
    dh = area_matrix(img.shape[0], grid[0])
    dw = area_matrix(img.shape[1], grid[1])
    out = np.tensordot(dh, img, axes=(1, 0))
    return np.moveaxis(np.tensordot(dw, out, axes=(1, 1)), 0, 1)


def downsample_adjoint(grad, shape, grid):
    dh = area_matrix(shape[0], grid[0])
    dw = area_matrix(shape[1], grid[1])
    out = np.tensordot(dh.T, grad, axes=(1, 0))
    return np.moveaxis(np.tensordot(dw.T, out, axes=(1, 1)), 0, 1)


def upsample(cells, shape):
    uh = bilinear_matrix(shape[0], cells.shape[0])
    uw = bilinear_matrix(shape[1], cells.shape[1])
    return uh @ cells @ uw.T


def upsample_adjoint(grad, grid):
    uh = bilinear_matrix(grad.shape[0], grid[0])
    uw = bilinear_matrix(grad.shape[1], grid[1])
    return uh.T @ grad @ uw


def _check_pair(x_a, x_b):
    x_a = np.asarray(x_a, dtype=np.float64)
    x_b = np.asarray(x_b, dtype=np.float64)
    if x_a.shape != x_b.shape or x_a.ndim != 3:
        raise ValueError(f"blurred images must share an H x W x 3 shape, got {x_a.shape} and {x_b.shape}")
    return x_a, x_b


def cell_features(x_a, x_b, grid=DEFAULT_GRID):
    """8 x (Gh*Gw) matrix of per-cell colors of both paths and normalised (x, y)."""
    x_a, x_b = _check_pair(x_a, x_b)
    gh, gw = grid
    feats = np.empty((N_KEY_FEATURES, gh, gw))
    feats[0:3] = np.moveaxis(downsample(x_a, grid), 2, 0)
    feats[3:6] = np.moveaxis(downsample(x_b, grid), 2, 0)
    feats[6] = ((np.arange(gw) + 0.5) / gw)[None, :]
    feats[7] = ((np.arange(gh) + 0.5) / gh)[:, None]
    return feats.reshape(N_KEY_FEATURES, gh * gw)


def pixel_keys(x_a, x_b, key_proj, grid=DEFAULT_GRID):
    key_proj = np.asarray(key_proj, dtype=np.float64)
    if key_proj.ndim != 2 or key_proj.shape[1] != N_KEY_FEATURES:
        raise ValueError(f"key_proj must be d x {N_KEY_FEATURES}, got {key_proj.shape}")
    return key_proj @ cell_features(x_a, x_b, grid)


def attention_scores(q, keys, query_proj):
    q = np.asarray(q, dtype=np.float64)
    query_proj = np.asarray(query_proj, dtype=np.float64)
    if query_proj.shape[1] != q.shape[0] or query_proj.shape[0] != keys.shape[0]:
        raise ValueError(
            f"query_proj {query_proj.shape} incompatible with query {q.shape} and keys {keys.shape}")
    return (query_proj @ q) @ keys


def attention_map(scores):
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("attention scores must be finite")
    return expit(scores - scores.mean(axis=-1, keepdims=True))


def fuse(x_a, x_b, scores, grid=DEFAULT_GRID):
    """Blend the two paths with upsampled sigmoid attention; returns (fused image, H x W map)."""
    x_a, x_b = _check_pair(x_a, x_b)
    _instrument.hit("fusion")
    a_grid = attention_map(scores).reshape(grid)
    a_full = upsample(a_grid, x_a.shape[:2])
    return x_b + a_full[..., None] * (x_a - x_b), a_full


def linear_fuse(x_a, x_b):
    x_a, x_b = _check_pair(x_a, x_b)
    _instrument.hit("fusion")
    return 0.5 * (x_a + x_b)


def mask_fuse(x_a, x_b, theta):
    """Single global learnable mix ``sigmoid(theta)`` between the two paths."""
    x_a, x_b = _check_pair(x_a, x_b)
    _instrument.hit("fusion")
    a = float(expit(theta))
    return a * x_a + (1.0 - a) * x_b


@dataclass
class AttentionCache:
    x_a: np.ndarray
    x_b: np.ndarray
    q: np.ndarray
    query: np.ndarray
    feats: np.ndarray
    keys: np.ndarray
    a_grid: np.ndarray
    a_full: np.ndarray
    grid: tuple


def attention_fuse_forward(x_a, x_b, q, query_proj, key_proj, grid=DEFAULT_GRID):
    """Full attention fusion of one image pair for one query; returns (fused, map, cache)."""
    x_a, x_b = _check_pair(x_a, x_b)
    feats = cell_features(x_a, x_b, grid)
    keys = np.asarray(key_proj) @ feats
    query = np.asarray(query_proj) @ np.asarray(q, dtype=np.float64)
    fused, a_full = fuse(x_a, x_b, query @ keys, grid)
    a_grid = attention_map(query @ keys)
    return fused, a_full, AttentionCache(x_a, x_b, np.asarray(q, float), query, feats, keys,
                                         a_grid, a_full, tuple(grid))


def attention_fuse_backward(cache, grad_fused, query_proj, key_proj):
    """Gradients of a loss w.r.t. q, query_proj, key_proj, X_A and X_B."""
    c = cache
    diff = c.x_a - c.x_b
    d_afull = (grad_fused * diff).sum(axis=2)
    d_xa = grad_fused * c.a_full[..., None]
    d_xb = grad_fused - d_xa
    d_agrid = upsample_adjoint(d_afull, c.grid).reshape(-1)
    d_z = d_agrid * c.a_grid * (1.0 - c.a_grid)
    d_s = d_z - d_z.mean()
    d_query = c.keys @ d_s
    d_keys = np.outer(c.query, d_s)
    d_feats = np.asarray(key_proj).T @ d_keys
    shape = c.x_a.shape[:2]
    cells = d_feats.reshape(N_KEY_FEATURES, *c.grid)
    d_xa = d_xa + downsample_adjoint(np.moveaxis(cells[0:3], 0, 2), shape, c.grid)
    d_xb = d_xb + downsample_adjoint(np.moveaxis(cells[3:6], 0, 2), shape, c.grid)
    return {
        "q": np.asarray(query_proj).T @ d_query,
        "query_proj": np.outer(d_query, c.q),
        "key_proj": d_keys @ c.feats.T,
        "x_a": d_xa,
        "x_b": d_xb,
    }
