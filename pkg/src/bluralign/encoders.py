"""Small trainable EEG encoder and a frozen, seeded visual encoder.

Both emit unit-norm embeddings of the same dimension.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .align import normalize_backward, normalize_rows
from .fusion import downsample, downsample_adjoint

_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x):
    th = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x * x))
    return 0.5 * x * (1.0 + th)


def gelu_grad(x):
    x2 = x * x
    th = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * _GELU_C * (1.0 + 3 * 0.044715 * x2)


@dataclass
class EEGEncoder:
    """Temporal conv (stride 2) -> GELU -> channel mixing -> flatten -> linear -> L2 normalise.

    Parameters live in a ParamStore under ``prefix``: ``temporal`` (F x k_t),
    ``mixer`` (F x C) and ``proj`` (d x F*T').
    """

    n_channels: int
    n_samples: int
    dim: int = 64
    n_maps: int = 8
    kernel: int = 9
    stride: int = 2
    nonlinearity: bool = True
    prefix: str = "eeg."

    @property
    def n_out(self):
        return (self.n_samples - self.kernel) // self.stride + 1

    def init_params(self, store, rng):
        p = self.prefix
        store.add(p + "temporal", rng.normal(0.0, 1.0 / np.sqrt(self.kernel), (self.n_maps, self.kernel)))
        store.add(p + "mixer", rng.normal(0.0, 1.0 / np.sqrt(self.n_channels), (self.n_maps, self.n_channels)))
        fan_in = self.n_maps * self.n_out
        store.add(p + "proj", rng.normal(0.0, 1.0 / np.sqrt(fan_in), (self.dim, fan_in)))
        return store

    def _windows(self, x):
        return sliding_window_view(x, self.kernel, axis=-1)[..., :: self.stride, :]

    def forward(self, x, store):
        """Encode a batch ``x`` of shape (B, C, T); returns (embeddings, cache)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[1:] != (self.n_channels, self.n_samples):
            raise ValueError(
                f"expected trials of shape (B, {self.n_channels}, {self.n_samples}), got {x.shape}")
        p = self.prefix
        win = self._windows(x)
        pre = np.tensordot(store[p + "temporal"], win, axes=(1, 3)).transpose(1, 0, 2, 3)
        act = gelu(pre) if self.nonlinearity else pre
        mixed = np.matmul(store[p + "mixer"][None, :, None, :], act).squeeze(2)
        flat = mixed.reshape(x.shape[0], -1)
        raw = flat @ store[p + "proj"].T
        norms = np.linalg.norm(raw, axis=1, keepdims=True)
        if np.any(norms < 1e-300):
            raise FloatingPointError("EEG encoder produced a zero-norm embedding")
        unit = raw / norms
        return unit, (x, win, pre, act, flat, unit, norms)

    def backward(self, cache, grad_z, store, want_input=False):
        """Accumulate parameter gradients into ``store``; optionally return d loss / d x."""
        x, win, pre, act, flat, unit, norms = cache
        p = self.prefix
        d_raw = normalize_backward(unit, norms, grad_z)
        store.accumulate_grad(p + "proj", d_raw.T @ flat)
        d_mixed = (d_raw @ store[p + "proj"]).reshape(x.shape[0], self.n_maps, self.n_out)
        store.accumulate_grad(p + "mixer", np.einsum("bft,bfct->fc", d_mixed, act, optimize=True))
        d_act = store[p + "mixer"][None, :, :, None] * d_mixed[:, :, None, :]
        d_pre = d_act * gelu_grad(pre) if self.nonlinearity else d_act
        store.accumulate_grad(p + "temporal", np.einsum("bfct,bctk->fk", d_pre, win, optimize=True))
        if not want_input:
            return None
        d_win = np.einsum("bfct,fk->bctk", d_pre, store[p + "temporal"], optimize=True)
        d_x = np.zeros_like(x)
        stop = self.stride * (self.n_out - 1) + 1
        for k in range(self.kernel):
            d_x[..., k:k + stop:self.stride] += d_win[..., k]
        return d_x


class FrozenVisualEncoder:
    """Area-downsample to a 16 x 16 patch grid, project with a seeded orthonormal matrix, normalise."""

    def __init__(self, seed=0, dim=64, patch_grid=(16, 16)):
        self.seed = seed
        self.dim = dim
        self.patch_grid = tuple(patch_grid)
        n_in = self.patch_grid[0] * self.patch_grid[1] * 3
        if dim > n_in:
            raise ValueError(f"embedding dimension {dim} exceeds input size {n_in}")
        rng = np.random.default_rng(seed)
        q, r = np.linalg.qr(rng.standard_normal((n_in, dim)))
        q *= np.sign(np.diag(r))[None, :]
        self.projection = np.ascontiguousarray(q.T)
        self.projection.setflags(write=False)

    def features(self, img):
        img = np.asarray(img, dtype=np.float64)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"expected an H x W x 3 image, got {img.shape}")
        gh, gw = self.patch_grid
        if img.shape[0] < gh or img.shape[1] < gw:
            raise ValueError(f"image {img.shape[:2]} is smaller than the patch grid {self.patch_grid}")
        return downsample(img, self.patch_grid).reshape(-1)

    def raw(self, img):
        return self.projection @ self.features(img)

    def encode(self, img):
        return normalize_rows(self.raw(img)[None])[0][0]

    def encode_backward(self, img, grad):
        """d loss / d image for a gradient on the unit embedding."""
        raw = self.raw(img)[None]
        unit, norms = normalize_rows(raw)
        d_raw = normalize_backward(unit, norms, np.asarray(grad)[None])[0]
        d_feat = (self.projection.T @ d_raw).reshape(*self.patch_grid, 3)
        return downsample_adjoint(d_feat, np.shape(img)[:2], self.patch_grid)


def eeg_encode(x, store, encoder):
    """Encode a single trial (C x T) to a unit embedding."""
    z, _ = encoder.forward(np.asarray(x)[None], store)
    return z[0]


def visual_encode(img, encoder):
    return encoder.encode(img)
