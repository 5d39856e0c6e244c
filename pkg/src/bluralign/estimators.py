"""scikit-learn compatible wrappers around the blur, screening and alignment code."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_images, check_trials
from .blur import DEFAULT_SCALES, BlurConfig, center_blur, compute_saliency, default_sigma, saliency_blur
from .pipeline import Dataset, Split, TrainConfig, evaluate_retrieval, train
from .spectral import PRESETS, BandScreen, BandSpec, static_bandpass


class SaliencyBlur(TransformerMixin, BaseEstimator):
    """Blur non-salient regions of each image, keeping salient ones sharp.

    Parameters
    ----------
    sigma : float or None
        Gaussian sigma in pixels; None scales 10 px at 224 px with the image size.
    w0 : float
        Overall blur strength.
    scales : tuple of int
        Neighbourhood radii for the contrast saliency map.
    """

    def __init__(self, sigma=None, w0=0.5, scales=DEFAULT_SCALES):
        self.sigma = sigma
        self.w0 = w0
        self.scales = scales

    def fit(self, X, y=None):
        X = check_images(X)
        self.image_shape_ = X.shape[1:3]
        sigma = self.sigma if self.sigma is not None else default_sigma(*self.image_shape_)
        self.blur_config_ = BlurConfig(sigma=sigma, w0=self.w0)
        return self

    def transform(self, X):
        check_is_fitted(self)
        X = check_images(X)
        return np.stack([saliency_blur(img, compute_saliency(img, self.scales), self.blur_config_)[0]
                         for img in X])


class CenterBlur(TransformerMixin, BaseEstimator):
    """Keep the image center sharp and blur increasingly toward the corners."""

    def __init__(self, sigma=None, w0=0.5, g=3.0):
        self.sigma = sigma
        self.w0 = w0
        self.g = g

    def fit(self, X, y=None):
        X = check_images(X)
        self.image_shape_ = X.shape[1:3]
        sigma = self.sigma if self.sigma is not None else default_sigma(*self.image_shape_)
        self.blur_config_ = BlurConfig(sigma=sigma, w0=self.w0, g=self.g)
        return self

    def transform(self, X):
        check_is_fitted(self)
        X = check_images(X)
        return np.stack([center_blur(img, self.blur_config_)[0] for img in X])


class BandScreenTransformer(TransformerMixin, BaseEstimator):
    """Weighted sub-band recombination with fixed gamma scales and selection logits."""

    def __init__(self, sample_rate=250.0, tau=1.0, gamma=None, logits=None, delta=1.0):
        self.sample_rate = sample_rate
        self.tau = tau
        self.gamma = gamma
        self.logits = logits
        self.delta = delta

    def fit(self, X, y=None):
        check_trials(X)
        self.spec_ = BandSpec.default(self.sample_rate, delta=self.delta)
        n = self.spec_.n_bands
        gamma = np.ones(n) if self.gamma is None else np.asarray(self.gamma, dtype=np.float64)
        self.gamma_raw_ = self.spec_.gamma_to_raw(gamma)
        self.logits_ = np.zeros(n) if self.logits is None else np.asarray(self.logits, dtype=np.float64)
        return self

    def transform(self, X):
        check_is_fitted(self)
        X = check_trials(X)
        y, _ = BandScreen(self.spec_, X).forward(self.gamma_raw_, self.logits_, self.tau)
        return y


class BandPassFilter(TransformerMixin, BaseEstimator):
    """Static band-pass with raised-cosine edges; ``preset`` is one of high/low/mid."""

    def __init__(self, sample_rate=250.0, preset=None, lo=0.0, hi=None, delta=1.0):
        self.sample_rate = sample_rate
        self.preset = preset
        self.lo = lo
        self.hi = hi
        self.delta = delta

    def fit(self, X, y=None):
        check_trials(X)
        if self.preset is not None:
            if self.preset not in PRESETS:
                raise ValueError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
            self.band_ = PRESETS[self.preset]
        else:
            self.band_ = (self.lo, self.hi)
        return self

    def transform(self, X):
        check_is_fitted(self)
        X = check_trials(X)
        lo, hi = self.band_
        return static_bandpass(X, self.sample_rate, lo, hi, self.delta)


class NeuralVisualRetriever(BaseEstimator):
    """Train EEG-to-image alignment and retrieve image candidates for EEG trials.

    ``fit(images, trials, trial_image, y)`` takes training images (N, H, W, 3),
    trials (M, C, T), the image index of every trial and one class label per
    image.  Extra :class:`TrainConfig` fields can be passed via ``options``.
    """

    def __init__(self, steps=500, batch_size=32, lr=3e-3, w1=0.01, w2=0.01, tau=1.0, alpha=0.05,
                 w0=0.5, g=3.0, use_fusion=True, use_ibwave=True, use_bound=True,
                 fusion_mode="attention", sample_rate=250.0, visual_seed=0, dim=64, seed=0,
                 workers=1, options=None):
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.w1 = w1
        self.w2 = w2
        self.tau = tau
        self.alpha = alpha
        self.w0 = w0
        self.g = g
        self.use_fusion = use_fusion
        self.use_ibwave = use_ibwave
        self.use_bound = use_bound
        self.fusion_mode = fusion_mode
        self.sample_rate = sample_rate
        self.visual_seed = visual_seed
        self.dim = dim
        self.seed = seed
        self.workers = workers
        self.options = options

    def _train_config(self):
        kwargs = {k: getattr(self, k) for k in (
            "steps", "batch_size", "lr", "w1", "w2", "tau", "alpha", "w0", "g", "use_fusion",
            "use_ibwave", "use_bound", "fusion_mode", "seed", "workers")}
        kwargs.update(self.options or {})
        return TrainConfig(**kwargs)

    def fit(self, images, trials, trial_image=None, y=None):
        images = check_images(images, min_size=16)
        trials = check_trials(trials)
        if trial_image is None:
            if len(trials) != len(images):
                raise ValueError("trial_image is required unless there is one trial per image")
            trial_image = np.arange(len(images))
        trial_image = np.asarray(trial_image, dtype=int)
        labels = np.arange(len(images)) if y is None else np.asarray(y)
        split = Split(images, labels, trials, trial_image, np.zeros(len(trials), dtype=bool))
        data = Dataset(split, split, self.sample_rate, self.visual_seed, self.dim)
        result = train(data, self._train_config())
        self.result_ = result
        self.store_ = result.store
        self.model_ = result.model
        self.log_ = result.log
        self.n_channels_, self.n_samples_ = trials.shape[1:]
        return self

    def transform(self, trials):
        """EEG embeddings (unit norm) for a stack of trials."""
        check_is_fitted(self)
        trials = check_trials(trials)
        return self.model_.embed_eeg(self.store_, trials, self.workers)

    def similarity(self, trials, candidate_images):
        z = self.transform(trials)
        bank = self.model_.prepare_images(check_images(candidate_images, min_size=16))
        y, _ = self.model_.visual_forward(self.store_, bank, np.arange(len(bank.base)), z)
        return np.einsum("id,ijd->ij", z, y), z, y

    def predict(self, trials, candidate_images):
        """Index of the best-matching candidate image for each trial."""
        sim, _, _ = self.similarity(trials, candidate_images)
        return np.argmax(sim, axis=1)

    def score(self, trials, candidate_images, true_idx=None):
        """Top-1 retrieval accuracy."""
        _, z, y = self.similarity(trials, candidate_images)
        return evaluate_retrieval(z, y, true_idx).top1
