"""Gaussian blur, contrast saliency, and the saliency-guided and center-guided blur paths."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import ndimage

DEFAULT_SCALES = (2, 4, 8)


@dataclass
class BlurConfig:
    """Blur strength and blend parameters.

    Parameters
    ----------
    sigma : float
        Gaussian standard deviation in pixels.
    w0 : float
        Overall blur strength in [0, 1]; 1 means the blended image is fully blurred.
    g : float
        Radial decay rate of the center-preservation weight.
    """

    sigma: float = 5.0
    w0: float = 0.5
    g: float = 3.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not 0.0 <= self.w0 <= 1.0:
            raise ValueError(f"w0 must lie in [0, 1], got {self.w0}")
        if not self.g > 0:
            raise ValueError(f"g must be positive, got {self.g}")

    @property
    def kernel_radius(self):
        return int(math.ceil(3.0 * self.sigma))

    @classmethod
    def for_size(cls, height, width, w0=0.5, g=3.0):
        """Default sigma: 10 px at 224 px, scaled with the shorter side."""
        return cls(sigma=default_sigma(height, width), w0=w0, g=g)


def default_sigma(height, width):
    return 10.0 * min(height, width) / 224.0


def gaussian_kernel1d(sigma):
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _mirror(idx, n):
    # half-sample symmetric extension: ... 1 0 | 0 1 2 ... n-1 | n-1 n-2 ...
    m = np.mod(idx, 2 * n)
    return np.where(m >= n, 2 * n - 1 - m, m)


@lru_cache(maxsize=64)
def _blur_matrix_cached(n, sigma):
    kern = gaussian_kernel1d(sigma)
    radius = kern.size // 2
    mat = np.zeros((n, n))
    rows = np.arange(n)
    for k, weight in zip(range(-radius, radius + 1), kern):
        np.add.at(mat, (rows, _mirror(rows + k, n)), weight)
    mat.setflags(write=False)
    return mat


def blur_matrix(n, sigma):
    """1-D blur operator with mirrored borders as an n x n matrix (doubly stochastic)."""
    return _blur_matrix_cached(int(n), float(sigma))


def _as_image(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 image, got shape {img.shape}")
    return img


def _sigma_of(cfg):
    sigma = cfg.sigma if isinstance(cfg, BlurConfig) else float(cfg)
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    return sigma


def gaussian_blur(img, cfg):
    """Separable Gaussian blur of each channel; ``cfg`` is a BlurConfig or a sigma."""
    img = _as_image(img)
    sigma = _sigma_of(cfg)
    bh = blur_matrix(img.shape[0], sigma)
    bw = blur_matrix(img.shape[1], sigma)
    h, w, _ = img.shape
    out = (bh @ img.reshape(h, w * 3)).reshape(h, w, 3)
    return np.matmul(bw, out)


def gaussian_blur_adjoint(grad, cfg):
    grad = _as_image(grad)
    sigma = _sigma_of(cfg)
    bh = blur_matrix(grad.shape[0], sigma)
    bw = blur_matrix(grad.shape[1], sigma)
    h, w, _ = grad.shape
    out = (bh.T @ grad.reshape(h, w * 3)).reshape(h, w, 3)
    return np.matmul(bw.T, out)


def compute_saliency(img, scales=DEFAULT_SCALES):
    """Multi-scale center-surround color contrast, min-max normalised to [0, 1].

    Each pixel scores the RGB distance between itself and the mean color of its
    (2r+1)^2 neighbourhood, averaged over the radii in ``scales``.
    """
    img = _as_image(img)
    scales = list(scales)
    if not scales:
        raise ValueError("at least one saliency scale is required")
    limit = min(img.shape[:2]) / 2.0
    for r in scales:
        if not 0 < r < limit:
            raise ValueError(f"scale {r} must be positive and below min(H, W)/2 = {limit}")
    contrast = np.zeros(img.shape[:2])
    for r in scales:
        size = 2 * int(r) + 1
        local = ndimage.uniform_filter(img, size=(size, size, 1), mode="reflect")
        contrast += np.sqrt(((img - local) ** 2).sum(axis=2))
    contrast /= len(scales)
    lo, hi = contrast.min(), contrast.max()
    if hi - lo <= 1e-12 * max(1.0, hi):
        return np.zeros_like(contrast)
    return (contrast - lo) / (hi - lo)


def blend(img, blurred, weight):
    """``weight * img + (1 - weight) * blurred`` with an H x W weight broadcast over channels."""
    w = weight[..., None]
    return w * img + (1.0 - w) * blurred


def blend_backward(grad, weight, cfg):
    """Gradient of a blur blend with respect to the source image (weight held fixed)."""
    w = np.asarray(weight)[..., None]
    return w * grad + gaussian_blur_adjoint((1.0 - w) * grad, cfg)


def saliency_blur(img, sal, cfg):
    """Keep salient regions sharp: returns the blended image and the preservation weights."""
    img = _as_image(img)
    sal = np.asarray(sal, dtype=np.float64)
    if sal.shape != img.shape[:2]:
        raise ValueError(f"saliency map {sal.shape} does not match image {img.shape[:2]}")
    if sal.size and (sal.min() < 0.0 or sal.max() > 1.0):
        raise ValueError("saliency values must lie in [0, 1]")
    w_s = (1.0 - cfg.w0) * sal
    return blend(img, gaussian_blur(img, cfg), w_s), w_s


def center_weight_map(height, width, cfg):
    if height < 1 or width < 1:
        raise ValueError("image dimensions must be positive")
    yc, xc = (height - 1) / 2.0, (width - 1) / 2.0
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    dist = np.hypot(yy - yc, xx - xc)
    corner = math.hypot(yc, xc)
    d = dist / corner if corner > 0 else np.zeros_like(dist)
    return (1.0 - cfg.w0) * np.exp(-cfg.g * d)


def center_blur(img, cfg):
    img = _as_image(img)
    w_r = center_weight_map(img.shape[0], img.shape[1], cfg)
    return blend(img, gaussian_blur(img, cfg), w_r), w_r
