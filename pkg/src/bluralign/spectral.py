"""Learnable frequency-band screening of EEG trials.

Trials are split into sub-bands by an FFT filter bank whose masks form a
partition of unity, so the bands always sum back to the input.  Band edges are
``base_edge * gamma`` with gamma squashed into a bounded range.  A temperature
softmax over per-band logits gives the selection weights, and the screened
signal is ``n * sum_i m_i * band_i`` (the identity at uniform weights).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, softmax

from . import _instrument

BAND_NAMES = ("delta", "theta", "alpha", "beta", "gamma")
PRESETS = {"high": (40.0, None), "low": (0.0, 8.0), "mid": (8.0, 40.0)}


def default_edges(sample_rate):
    return np.array([0.5, 4.0, 8.0, 13.0, 30.0, min(100.0, sample_rate / 2.0)])


@dataclass
class BandSpec:
    base_edges: np.ndarray
    sample_rate: float
    gamma_bounds: tuple = (0.5, 2.0)
    delta: float = 1.0
    names: tuple = BAND_NAMES

    def __post_init__(self):
        self.base_edges = np.asarray(self.base_edges, dtype=np.float64)
        if self.base_edges.ndim != 1 or self.base_edges.size < 2:
            raise ValueError("need at least two band edges")
        if np.any(np.diff(self.base_edges) <= 0) or self.base_edges[0] <= 0:
            raise ValueError("base edges must be positive and strictly ascending")
        if self.base_edges[-1] > self.sample_rate / 2.0:
            raise ValueError("top edge exceeds the Nyquist frequency")
        lo, hi = self.gamma_bounds
        if not 0 < lo < 1 < hi:
            raise ValueError("gamma bounds must bracket 1")
        if not self.delta > 0:
            raise ValueError("crossfade width must be positive")
        if len(self.names) != self.n_bands:
            self.names = tuple(f"band{i + 1}" for i in range(self.n_bands))

    @classmethod
    def default(cls, sample_rate, **kwargs):
        return cls(default_edges(sample_rate), sample_rate, **kwargs)

    @property
    def n_bands(self):
        return self.base_edges.size - 1

    def gamma_to_raw(self, gamma):
        lo, hi = self.gamma_bounds
        p = (np.asarray(gamma, dtype=np.float64) - lo) / (hi - lo)
        if np.any(p <= 0) or np.any(p >= 1):
            raise ValueError(f"gamma must lie strictly inside {self.gamma_bounds}")
        return np.log(p / (1.0 - p))

    def raw_to_gamma(self, raw):
        lo, hi = self.gamma_bounds
        return lo + (hi - lo) * expit(raw)

    def initial_raw(self):
        return self.gamma_to_raw(np.ones(self.n_bands))

    def edges(self, raw):
        """Effective edges for unconstrained ``raw`` gamma parameters (see :func:`effective_edges`)."""
        return effective_edges(self, self.raw_to_gamma(raw))[0]


def effective_edges(spec, gamma):
    """Scale band ``i``'s lower edge by ``gamma[i]``, clip to Nyquist, and sort.

    Returns ``(edges, order, dedge_dgamma)`` where ``edges[k]`` came from the
    unsorted edge ``order[k]`` and ``dedge_dgamma`` is d(unsorted edge)/d(gamma).
    """
    gamma = np.asarray(gamma, dtype=np.float64)
    if gamma.shape != (spec.n_bands,):
        raise ValueError(f"expected {spec.n_bands} gamma values, got shape {gamma.shape}")
    raw = spec.base_edges.copy()
    raw[:-1] *= gamma
    nyq = spec.sample_rate / 2.0
    deriv = np.zeros_like(raw)
    deriv[:-1] = np.where(raw[:-1] < nyq, spec.base_edges[:-1], 0.0)
    raw = np.minimum(raw, nyq)
    order = np.argsort(raw, kind="stable")
    edges = raw[order]
    if np.any(np.diff(edges) <= 0):
        raise ValueError(f"band edges collapsed after scaling: {edges}")
    return edges, order, deriv


def smooth_step(freqs, edge, delta):
    """Raised-cosine step from 0 to 1 over [edge - delta/2, edge + delta/2]."""
    u = (freqs - edge) / delta + 0.5
    inside = (u > 0) & (u < 1)
    step = np.where(u >= 1, 1.0, 0.0)
    step = np.where(inside, 0.5 - 0.5 * np.cos(np.pi * np.clip(u, 0, 1)), step)
    d_edge = np.where(inside, -0.5 * np.pi / delta * np.sin(np.pi * np.clip(u, 0, 1)), 0.0)
    return step, d_edge


def band_masks(freqs, edges, delta):
    """Partition-of-unity masks (n x F) from sorted edges, plus d(step_j)/d(edge_j) for interior edges."""
    n = edges.size - 1
    steps = np.empty((n + 1, freqs.size))
    d_steps = np.zeros((n + 1, freqs.size))
    steps[0] = 1.0
    steps[n] = 0.0
    for j in range(1, n):
        steps[j], d_steps[j] = smooth_step(freqs, edges[j], delta)
    return steps[:-1] - steps[1:], d_steps


@dataclass
class SubBandSet:
    components: np.ndarray
    edges: np.ndarray
    spec: BandSpec = field(repr=False)

    @property
    def n_bands(self):
        return self.components.shape[0]


def _check_trial(x, sample_rate=None):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 1 or x.shape[-1] < 8:
        raise ValueError(f"trials need at least 8 samples, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("trial contains non-finite values")
    if sample_rate is not None and not sample_rate > 0:
        raise ValueError("sample rate must be positive")
    return x


def decompose_bands(x, spec, gamma=None):
    """Split ``x`` (..., T) into ``spec.n_bands`` components that sum to ``x``."""
    x = _check_trial(x, spec.sample_rate)
    gamma = np.ones(spec.n_bands) if gamma is None else gamma
    edges, _, _ = effective_edges(spec, gamma)
    t = x.shape[-1]
    freqs = np.fft.rfftfreq(t, 1.0 / spec.sample_rate)
    masks, _ = band_masks(freqs, edges, spec.delta)
    spectrum = np.fft.rfft(x, axis=-1)
    shape = (masks.shape[0],) + (1,) * (x.ndim - 1) + (freqs.size,)
    comps = np.fft.irfft(masks.reshape(shape) * spectrum[None], n=t, axis=-1)
    return SubBandSet(comps, edges, spec)


def selection_weights(logits, tau=1.0):
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits must be finite")
    return softmax(logits / tau)


def softmax_backward(m, d_m, tau):
    return m * (d_m - np.dot(m, d_m)) / tau


def selection_entropy(m):
    m = np.asarray(m, dtype=np.float64)
    pos = m > 0
    return float(-np.sum(m[pos] * np.log(m[pos])))


def selection_entropy_grad(m):
    """dH/dm with the 0 log 0 = 0 convention (entries at 0 get a zero gradient)."""
    m = np.asarray(m, dtype=np.float64)
    out = np.zeros_like(m)
    pos = m > 0
    out[pos] = -(np.log(m[pos]) + 1.0)
    return out


def fuse_bands(bands, m):
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (bands.n_bands,):
        raise ValueError(f"{bands.n_bands} bands but {m.size} weights")
    _instrument.hit("spectral")
    return bands.n_bands * np.tensordot(m, bands.components, axes=(0, 0))


def static_bandpass(x, sample_rate, lo, hi=None, delta=1.0):
    """Fixed band-pass with the same raised-cosine edges; ``lo <= 0`` / ``hi = fs/2`` disable a side."""
    x = _check_trial(x, sample_rate)
    nyq = sample_rate / 2.0
    hi = nyq if hi is None else hi
    if not 0 <= lo < hi <= nyq:
        raise ValueError(f"invalid band [{lo}, {hi}] for sample rate {sample_rate}")
    t = x.shape[-1]
    freqs = np.fft.rfftfreq(t, 1.0 / sample_rate)
    mask = np.ones_like(freqs)
    if lo > 0:
        mask = mask * smooth_step(freqs, lo, delta)[0]
    if hi < nyq:
        mask = mask * (1.0 - smooth_step(freqs, hi, delta)[0])
    return np.fft.irfft(mask * np.fft.rfft(x, axis=-1), n=t, axis=-1)


def preset_bandpass(x, sample_rate, preset, delta=1.0):
    lo, hi = PRESETS[preset]
    return static_bandpass(x, sample_rate, lo, hi, delta)


class BandScreen:
    """Differentiable screening ``x -> n * irfft(sum_i m_i mask_i * rfft(x))``.

    Works on a fixed batch of trials (..., C, T); the spectra are computed once
    so repeated forward/backward passes only rebuild the filter.
    """

    def __init__(self, spec, x):
        self.spec = spec
        self.x = _check_trial(x, spec.sample_rate)
        self.t = self.x.shape[-1]
        self.freqs = np.fft.rfftfreq(self.t, 1.0 / spec.sample_rate)
        self.spectrum = np.fft.rfft(self.x, axis=-1)
        # irfft adjoint weights: DC and Nyquist appear once, other bins twice
        c = np.full(self.freqs.size, 2.0)
        c[0] = 1.0
        if self.t % 2 == 0:
            c[-1] = 1.0
        self._adjoint_weight = c / self.t

    def forward(self, gamma_raw, logits, tau):
        _instrument.hit("spectral")
        spec = self.spec
        gamma = spec.raw_to_gamma(gamma_raw)
        edges, order, dedge = effective_edges(spec, gamma)
        masks, d_steps = band_masks(self.freqs, edges, spec.delta)
        m = selection_weights(logits, tau)
        n = spec.n_bands
        h = n * (m @ masks)
        y = np.fft.irfft(h * self.spectrum, n=self.t, axis=-1)
        self._cache = (gamma_raw, gamma, order, dedge, masks, d_steps, m, tau)
        return y, m

    def backward(self, grad_y):
        """Return (d gamma_raw, d logits) for an upstream gradient shaped like the output."""
        gamma_raw, gamma, order, dedge, masks, d_steps, m, tau = self._cache
        spec = self.spec
        n = spec.n_bands
        g_hat = np.fft.rfft(grad_y, axis=-1)
        prod = np.real(np.conj(g_hat) * self.spectrum)
        d_h = self._adjoint_weight * prod.reshape(-1, self.freqs.size).sum(axis=0)
        d_m = n * (masks @ d_h)
        d_logits = softmax_backward(m, d_m, tau)
        d_sorted = np.zeros(n + 1)
        for j in range(1, n):
            d_sorted[j] = n * (m[j] - m[j - 1]) * np.dot(d_h, d_steps[j])
        d_unsorted = np.zeros(n + 1)
        d_unsorted[order] = d_sorted
        lo, hi = spec.gamma_bounds
        sig = expit(gamma_raw)
        d_gamma = d_unsorted[:-1] * dedge[:-1]
        d_raw = d_gamma * (hi - lo) * sig * (1.0 - sig)
        return d_raw, d_logits
