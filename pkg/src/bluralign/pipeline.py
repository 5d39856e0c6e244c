"""Synthetic EEG/image data, the end-to-end training loop, and zero-shot retrieval.

Training wires the blur paths, EEG-query attention fusion, band screening,
both encoders and the three loss terms together.  Image-side quantities that
do not depend on parameters (blurred paths, key features, and the linear map
from an attention grid to the visual pre-embedding) are computed once per
image, so every EEG query in a batch can be fused with every image cheaply.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from . import _instrument
from .align import (
    batch_stats,
    boundary_loss,
    clip_contrastive_loss,
    normalize_backward,
    overall_loss,
)
from .blur import BlurConfig, DEFAULT_SCALES, center_blur, compute_saliency, default_sigma, saliency_blur
from .diffcore import AdamState, ParamStore, adam_step
from .encoders import EEGEncoder, FrozenVisualEncoder
from .fusion import N_KEY_FEATURES, area_matrix, bilinear_matrix, cell_features
from .spectral import BandScreen, BandSpec, selection_entropy, selection_entropy_grad, selection_weights, softmax_backward, static_bandpass

logger = logging.getLogger(__name__)

FUSION_MODES = ("attention", "linear", "learnable_mask", "center_only", "saliency_only", "original")
METRIC_FIELDS = ("step", "clip_loss", "bound_loss", "entropy", "overall", "probe_top1")
CHUNK = 8  # fixed per-chunk batch slice; keeps gradient sums independent of worker count


class TrainingDiverged(RuntimeError):
    pass


# ----------------------------------------------------------------------------
# synthetic data


@dataclass
class SynthConfig:
    n_classes: int = 50
    n_test_classes: int = 20
    imgs_per_class: int = 2
    trials_per_image: int = 2
    image_size: tuple = (112, 112)
    channels: int = 17
    samples: int = 250
    sample_rate: float = 250.0
    signal_band: int = 4
    noise_band: int = 5
    noise_scale: float = 0.0
    outlier_fraction: float = 0.0
    n_blobs: int = 3
    visual_dim: int = 64
    visual_seed: int = 0
    seed: int = 0

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        if self.n_classes < 2 or self.n_test_classes < 2:
            raise ValueError("need at least two train and two test classes")
        if self.signal_band == self.noise_band:
            raise ValueError("signal_band and noise_band must differ")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be non-negative")
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise ValueError("outlier_fraction must lie in [0, 1)")
        if min(self.imgs_per_class, self.trials_per_image) < 1:
            raise ValueError("need at least one image per class and one trial per image")


@dataclass
class Split:
    images: np.ndarray        # (N_img, H, W, 3)
    image_labels: np.ndarray  # (N_img,)
    trials: np.ndarray        # (N_trial, C, T)
    trial_image: np.ndarray   # (N_trial,) index into images
    outlier: np.ndarray       # (N_trial,) bool, ground-truth noise-only trials

    @property
    def trial_labels(self):
        return self.image_labels[self.trial_image]


@dataclass
class Dataset:
    train: Split
    test: Split
    sample_rate: float
    visual_seed: int
    visual_dim: int


def _render_blobs(size, background, blobs):
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.broadcast_to(background, (h, w, 3)).copy()
    for cy, cx, radius, color in blobs:
        dist = np.hypot(yy - cy * h, xx - cx * w)
        alpha = expit((radius * min(h, w) - dist) / (0.03 * min(h, w)))[..., None]
        img = alpha * color + (1.0 - alpha) * img
    return np.clip(img, 0.0, 1.0)


def _class_prototype(rng, n_blobs):
    background = rng.uniform(0.0, 0.2, 3)
    blobs = []
    for _ in range(n_blobs):
        blobs.append((rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8),
                      rng.uniform(0.08, 0.22), rng.uniform(0.0, 1.0, 3)))
    return background, blobs


def _jitter(rng, proto):
    background, blobs = proto
    out = []
    for cy, cx, radius, color in blobs:
        out.append((cy + rng.normal(0, 0.03), cx + rng.normal(0, 0.03),
                    radius * rng.uniform(0.9, 1.1), np.clip(color + rng.normal(0, 0.04, 3), 0, 1)))
    return np.clip(background + rng.normal(0, 0.02, 3), 0, 1), out


def band_frequencies(cfg, band):
    """FFT-bin frequencies lying at least 1 Hz inside the nominal edges of ``band`` (1-indexed)."""
    spec = BandSpec.default(cfg.sample_rate)
    lo, hi = spec.base_edges[band - 1], spec.base_edges[band]
    freqs = np.fft.rfftfreq(cfg.samples, 1.0 / cfg.sample_rate)
    inside = freqs[(freqs >= lo + 1.0) & (freqs <= hi - 1.0)]
    if inside.size == 0:
        raise ValueError(f"band {band} has no usable frequency bins")
    return inside


def _band_noise(rng, cfg, band, shape):
    spec = BandSpec.default(cfg.sample_rate)
    lo, hi = spec.base_edges[band - 1], spec.base_edges[band]
    white = rng.standard_normal(shape)
    return static_bandpass(white, cfg.sample_rate, lo, min(hi, cfg.sample_rate / 2.0))


def synth_dataset(cfg):
    """Blob images per class and EEG trials driven by a shared linear forward model.

    Every trial is ``sum_k M[:, k] * v_k * cos(2 pi f_k t + phi_k)`` where ``v``
    is the frozen visual embedding of the clean image and the carriers lie inside
    ``signal_band``.  The forward model is shared by all classes so test classes,
    which never appear in training, remain decodable.
    """
    if not 1 <= cfg.signal_band <= 5 or not 1 <= cfg.noise_band <= 5:
        raise ValueError("band indices must be in 1..5")
    rng = np.random.default_rng(cfg.seed)
    visual = FrozenVisualEncoder(cfg.visual_seed, cfg.visual_dim)
    d = cfg.visual_dim
    mixing = rng.standard_normal((cfg.channels, d))
    carriers = band_frequencies(cfg, cfg.signal_band)
    freqs = carriers[np.arange(d) % carriers.size]
    phases = rng.uniform(0, 2 * np.pi, d)
    t = np.arange(cfg.samples) / cfg.sample_rate
    basis = np.cos(2 * np.pi * freqs[:, None] * t[None, :] + phases[:, None])  # (d, T)

    def make_split(n_cls, imgs_per_class, label_offset, allow_outliers):
        images, labels = [], []
        for c in range(n_cls):
            proto = _class_prototype(rng, cfg.n_blobs)
            for _ in range(imgs_per_class):
                images.append(_render_blobs(cfg.image_size, *_jitter(rng, proto)))
                labels.append(label_offset + c)
        images = np.stack(images)
        trials, owner = [], []
        for j, img in enumerate(images):
            v = visual.encode(img)
            clean = np.sqrt(2.0) * (mixing * v[None, :]) @ basis
            rms = np.sqrt(np.mean(clean ** 2))
            for _ in range(cfg.trials_per_image):
                x = clean.copy()
                if cfg.noise_scale > 0:
                    noise = _band_noise(rng, cfg, cfg.noise_band, x.shape)
                    x += cfg.noise_scale * rms * noise / np.sqrt(np.mean(noise ** 2))
                trials.append(x)
                owner.append(j)
        trials = np.stack(trials)
        owner = np.asarray(owner)
        outlier = np.zeros(len(owner), dtype=bool)
        if allow_outliers and cfg.outlier_fraction > 0:
            n_out = int(round(cfg.outlier_fraction * len(owner)))
            picked = rng.choice(len(owner), size=n_out, replace=False)
            for i in picked:
                noise = rng.standard_normal(trials[i].shape)
                trials[i] = noise * np.sqrt(np.mean(trials[i] ** 2)) / np.sqrt(np.mean(noise ** 2))
            outlier[picked] = True
        return Split(images, np.asarray(labels), trials, owner, outlier)

    train = make_split(cfg.n_classes, cfg.imgs_per_class, 0, True)
    test = make_split(cfg.n_test_classes, 1, cfg.n_classes, False)
    return Dataset(train, test, cfg.sample_rate, cfg.visual_seed, cfg.visual_dim)


# ----------------------------------------------------------------------------
# model


@dataclass
class TrainConfig:
    batch_size: int = 32
    steps: int = 500
    lr: float = 3e-3
    w1: float = 0.01
    w2: float = 0.01
    tau: float = 1.0
    alpha: float = 0.05
    w0: float = 0.5
    g: float = 3.0
    sigma: float | None = None
    temperature_init: float = 0.07
    learn_temperature: bool = True
    seed: int = 0
    use_fusion: bool = True
    use_ibwave: bool = True
    use_bound: bool = True
    fusion_mode: str = "attention"
    freeze_query: bool = False
    detach_stats: bool = True
    grid: tuple = (32, 32)
    key_dim: int = 16
    n_maps: int = 8
    kernel: int = 9
    nonlinearity: bool = True
    saliency_scales: tuple = DEFAULT_SCALES
    band_delta: float = 1.0
    gamma_bounds: tuple = (0.5, 2.0)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    workers: int = 1

    def __post_init__(self):
        self.grid = tuple(int(v) for v in self.grid)
        self.saliency_scales = tuple(self.saliency_scales)
        self.gamma_bounds = tuple(float(v) for v in self.gamma_bounds)
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.tau <= 0 or self.temperature_init <= 0:
            raise ValueError("temperatures must be positive")

    @property
    def effective_mode(self):
        return self.fusion_mode if self.use_fusion else "center_only"


@dataclass
class ImageBank:
    """Per-image constants for the visual branch in one fusion mode."""

    mode: str
    base: np.ndarray                  # (N, d) pre-embedding of the fixed part
    delta: np.ndarray | None = None   # (N, d) for scalar blends
    operator: np.ndarray | None = None  # (N, d, G) attention grid -> pre-embedding
    feats: np.ndarray | None = None   # (N, 8, G) key features
    x_a: list = field(default_factory=list)
    x_b: list = field(default_factory=list)


class Model:
    """Parameters and forward/backward passes for the whole alignment model."""

    def __init__(self, tcfg, n_channels, n_samples, sample_rate, image_shape,
                 visual_seed=0, dim=64):
        self.cfg = tcfg
        self.mode = tcfg.effective_mode
        self.image_shape = tuple(image_shape)
        h, w = self.image_shape
        sigma = tcfg.sigma if tcfg.sigma is not None else default_sigma(h, w)
        self.blur_cfg = BlurConfig(sigma=sigma, w0=tcfg.w0, g=tcfg.g)
        self.visual = FrozenVisualEncoder(visual_seed, dim)
        self.encoder = EEGEncoder(n_channels, n_samples, dim=dim, n_maps=tcfg.n_maps,
                                  kernel=tcfg.kernel, nonlinearity=tcfg.nonlinearity)
        self.band_spec = BandSpec.default(sample_rate, gamma_bounds=tcfg.gamma_bounds,
                                          delta=tcfg.band_delta)
        self.dim = dim

    # -- parameters ---------------------------------------------------------

    def init_params(self, seed=None):
        rng = np.random.default_rng(self.cfg.seed if seed is None else seed)
        store = ParamStore()
        self.encoder.init_params(store, rng)
        store.add("band.gamma_raw", self.band_spec.initial_raw())
        store.add("band.logits", np.zeros(self.band_spec.n_bands))
        dk = self.cfg.key_dim
        store.add("fusion.query_proj", rng.normal(0, 1.0 / np.sqrt(self.dim), (dk, self.dim)))
        store.add("fusion.key_proj", rng.normal(0, 1.0 / np.sqrt(N_KEY_FEATURES), (dk, N_KEY_FEATURES)))
        store.add("fusion.mask_logit", np.zeros(()))
        store.add("logit_scale", np.array(math.log(1.0 / self.cfg.temperature_init)),
                  trainable=self.cfg.learn_temperature)
        self._freeze_unused(store)
        return store

    def _freeze_unused(self, store):
        used = set(store.names())
        if not self.cfg.use_ibwave:
            used -= {"band.gamma_raw", "band.logits"}
        if self.mode != "attention":
            used -= {"fusion.query_proj", "fusion.key_proj"}
        if self.mode != "learnable_mask":
            used.discard("fusion.mask_logit")
        for name in store.names():
            if name not in used:
                store._entry(name).trainable = False

    # -- image side ---------------------------------------------------------

    def _features(self, img):
        return self.visual.features(img)

    def prepare_images(self, images):
        """Blur every image and cache what the visual branch needs for the active mode."""
        mode = self.mode
        cfg = self.blur_cfg
        grid = self.cfg.grid
        proj = self.visual.projection
        bank = ImageBank(mode, np.empty((len(images), self.dim)))
        need_a = mode in ("attention", "linear", "learnable_mask", "saliency_only")
        need_b = mode in ("attention", "linear", "learnable_mask", "center_only")
        if mode == "attention":
            h, w = self.image_shape
            gh, gw = grid
            ph, pw = self.visual.patch_grid
            rows = area_matrix(h, ph)[:, :, None] * bilinear_matrix(h, gh)[None, :, :]  # (ph, h, gh)
            cols = area_matrix(w, pw)[:, :, None] * bilinear_matrix(w, gw)[None, :, :]  # (pw, w, gw)
            rows = rows.transpose(0, 2, 1)  # (ph, gh, h)
            cols = cols.transpose(1, 0, 2).reshape(w, pw * gw)  # (w, pw*gw)
            bank.operator = np.empty((len(images), self.dim, gh * gw))
            bank.feats = np.empty((len(images), N_KEY_FEATURES, gh * gw))
        elif mode in ("linear", "learnable_mask"):
            bank.delta = np.empty((len(images), self.dim))
        for j, img in enumerate(images):
            img = np.asarray(img, dtype=np.float64)
            x_a = x_b = None
            if need_a:
                sal = compute_saliency(img, self.cfg.saliency_scales)
                x_a, _ = saliency_blur(img, sal, cfg)
                _instrument.hit("saliency")
            if need_b:
                x_b, _ = center_blur(img, cfg)
            if mode == "original":
                bank.base[j] = proj @ self._features(img)
            elif mode == "saliency_only":
                bank.base[j] = proj @ self._features(x_a)
            else:
                bank.base[j] = proj @ self._features(x_b)
            if mode in ("linear", "learnable_mask"):
                bank.delta[j] = proj @ self._features(x_a - x_b)
            if mode == "attention":
                diff = (x_a - x_b).reshape(h, w * 3)
                # e[p, g, x, c] = sum_y D[p, y] U[y, g] diff[y, x, c]
                e = np.matmul(rows, diff).reshape(ph, gh, w, 3)
                e = e.transpose(0, 1, 3, 2).reshape(ph * gh * 3, w)
                t = (e @ cols).reshape(ph, gh, 3, pw, gw)
                t = t.transpose(0, 3, 2, 1, 4).reshape(ph * pw * 3, gh * gw)
                bank.operator[j] = proj @ t
                bank.feats[j] = cell_features(x_a, x_b, grid)
            bank.x_a.append(x_a)
            bank.x_b.append(x_b)
        return bank

    # -- EEG side -----------------------------------------------------------

    def eeg_forward(self, store, x):
        """Screen (optional) and encode a batch of trials; returns (Z, cache)."""
        x = np.asarray(x, dtype=np.float64)
        screen = m = None
        if self.cfg.use_ibwave:
            screen = BandScreen(self.band_spec, x)
            x, m = screen.forward(store["band.gamma_raw"], store["band.logits"], self.cfg.tau)
        z, enc_cache = self.encoder.forward(x, store)
        return z, (screen, enc_cache, m)

    def eeg_backward(self, store, cache, grad_z):
        screen, enc_cache, _ = cache
        d_x = self.encoder.backward(enc_cache, grad_z, store, want_input=screen is not None)
        if screen is not None:
            d_raw, d_logits = screen.backward(d_x)
            store.accumulate_grad("band.gamma_raw", d_raw)
            store.accumulate_grad("band.logits", d_logits)

    def embed_eeg(self, store, x, workers=1):
        parts = _chunked(lambda sl: self.eeg_forward(store, x[sl])[0], len(x), workers)
        return np.concatenate(parts, axis=0)

    def band_weights(self, store):
        return selection_weights(store["band.logits"], self.cfg.tau)

    # -- visual side --------------------------------------------------------

    def visual_forward(self, store, bank, idx, z, pairwise=True):
        """Pre-embeddings for images ``idx`` conditioned on queries ``z``.

        Returns unit embeddings of shape (Bq, Bi, d) when ``pairwise`` else
        (B, d) with query i paired with image idx[i].
        """
        idx = np.asarray(idx)
        mode = bank.mode
        cache = {"idx": idx, "pairwise": pairwise}
        if mode == "attention":
            _instrument.hit("fusion")
            query = z @ store["fusion.query_proj"].T                       # (Bq, k)
            keys = np.matmul(store["fusion.key_proj"], bank.feats[idx])      # (Bi, k, G)
            if pairwise:
                scores = np.matmul(query[None], keys).transpose(1, 0, 2)   # (Bq, Bi, G)
            else:
                scores = np.einsum("ik,ikg->ig", query, keys)
            att = expit(scores - scores.mean(axis=-1, keepdims=True))
            op = bank.operator[idx]                                         # (Bi, d, G)
            if pairwise:
                mixed = np.matmul(att.transpose(1, 0, 2), op.transpose(0, 2, 1)).transpose(1, 0, 2)
                raw = bank.base[idx][None, :, :] + mixed
            else:
                raw = bank.base[idx] + np.einsum("idg,ig->id", op, att)
            cache.update(query=query, keys=keys, att=att, op=op)
        elif mode in ("linear", "learnable_mask"):
            _instrument.hit("fusion")
            a = 0.5 if mode == "linear" else float(expit(store["fusion.mask_logit"]))
            raw = bank.base[idx] + a * bank.delta[idx]
            cache["a"] = a
            if pairwise:
                raw = np.broadcast_to(raw, (len(z),) + raw.shape)
        else:
            raw = bank.base[idx]
            if pairwise:
                raw = np.broadcast_to(raw, (len(z),) + raw.shape)
        norms = np.linalg.norm(raw, axis=-1, keepdims=True)
        unit = raw / norms
        cache.update(unit=unit, norms=norms)
        return unit, cache

    def visual_backward(self, store, bank, cache, grad_y, z):
        """Accumulate fusion-parameter grads; returns d loss / d query embeddings."""
        mode = bank.mode
        d_raw = normalize_backward(cache["unit"], cache["norms"], grad_y)
        d_z = np.zeros_like(z)
        idx = cache["idx"]
        if mode == "attention":
            att, op, keys, query = cache["att"], cache["op"], cache["keys"], cache["query"]
            if cache["pairwise"]:
                d_att = np.matmul(d_raw.transpose(1, 0, 2), op).transpose(1, 0, 2)  # (Bq, Bi, G)
            else:
                d_att = np.einsum("id,idg->ig", d_raw, op)
            d_pre = d_att * att * (1.0 - att)
            d_s = d_pre - d_pre.mean(axis=-1, keepdims=True)
            if cache["pairwise"]:
                d_s_j = d_s.transpose(1, 0, 2)                              # (Bi, Bq, G)
                d_query = np.matmul(d_s_j, keys.transpose(0, 2, 1)).sum(axis=0)
                d_keys = np.matmul(query.T[None], d_s_j)
            else:
                d_query = np.einsum("ikg,ig->ik", keys, d_s)
                d_keys = np.einsum("ik,ig->ikg", query, d_s)
            d_key_proj = np.matmul(d_keys, bank.feats[idx].transpose(0, 2, 1)).sum(axis=0)
            store.accumulate_grad("fusion.key_proj", d_key_proj)
            store.accumulate_grad("fusion.query_proj", d_query.T @ z)
            if not self.cfg.freeze_query:
                d_z = d_query @ store["fusion.query_proj"]
        elif mode == "learnable_mask":
            a = cache["a"]
            d_a = float(np.sum(d_raw * bank.delta[idx]))
            store.accumulate_grad("fusion.mask_logit", np.array(d_a * a * (1.0 - a)))
        return d_z

    # -- objective ----------------------------------------------------------

    def objective(self, store, bank, x, idx, frozen_stats=None, backward=True, workers=1):
        """Overall loss on one batch; with ``backward`` the grads land in ``store``.

        ``frozen_stats`` pins the boundary interval and outlier set (used by
        finite-difference checks of the detached boundary loss).
        """
        cfg = self.cfg
        chunks = _chunked(lambda sl: self.eeg_forward(store, x[sl]), len(x), workers)
        z = np.concatenate([c[0] for c in chunks], axis=0)
        m = chunks[0][1][2]
        y, vcache = self.visual_forward(store, bank, idx, z, pairwise=True)
        sim = np.einsum("id,ijd->ij", z, y)
        t = math.exp(-float(store["logit_scale"]))
        clip, d_sim = clip_contrastive_loss(sim, t)
        d_logit_scale = float(np.sum(d_sim * sim))
        matched = np.diag(sim).copy()
        bound = 0.0
        stats = None
        if cfg.use_bound:
            stats = frozen_stats if frozen_stats is not None else batch_stats(matched, cfg.alpha)
            bound, d_matched = boundary_loss(matched, stats, detach=cfg.detach_stats)
            d_sim = d_sim + cfg.w1 * np.diag(d_matched)
        entropy = 0.0
        if cfg.use_ibwave:
            entropy = selection_entropy(m)
        total = overall_loss(clip, bound, entropy, cfg.w1 if cfg.use_bound else 0.0,
                             cfg.w2 if cfg.use_ibwave else 0.0)
        hits = np.argmax(sim, axis=1) == np.arange(len(sim))
        info = {"clip_loss": clip, "bound_loss": bound, "entropy": entropy, "overall": total,
                "probe_top1": float(hits.mean()), "stats": stats, "sim": sim, "m": m}
        if not backward:
            return total, info
        if store.is_trainable("logit_scale"):
            store.accumulate_grad("logit_scale", np.array(d_logit_scale))
        d_y = d_sim[:, :, None] * z[:, None, :]
        d_z = np.einsum("ij,ijd->id", d_sim, y)
        d_z += self.visual_backward(store, bank, vcache, d_y, z)
        if cfg.use_ibwave:
            d_m = cfg.w2 * selection_entropy_grad(m)
            store.accumulate_grad("band.logits", softmax_backward(m, d_m, cfg.tau))
        grads = _chunked(lambda sl: self._eeg_grad_chunk(store, chunks, sl, d_z), len(x), workers)
        for part in grads:
            for name, value in part.items():
                store.accumulate_grad(name, value)
        return total, info

    def _eeg_grad_chunk(self, store, chunks, sl, d_z):
        sink = _GradSink(store)
        self.eeg_backward(sink, chunks[sl.start // CHUNK][1], d_z[sl])
        return sink.grads

    def matched_similarities(self, store, bank, x, idx, workers=1):
        z = self.embed_eeg(store, x, workers)
        y, _ = self.visual_forward(store, bank, idx, z, pairwise=False)
        return np.einsum("id,id->i", z, y)


class _GradSink:
    """Reads parameter values from a store but collects gradients locally."""

    def __init__(self, store):
        self._store = store
        self.grads = {}

    def __getitem__(self, name):
        return self._store[name]

    def accumulate_grad(self, name, value):
        if name in self.grads:
            self.grads[name] = self.grads[name] + value
        else:
            self.grads[name] = np.array(value, dtype=np.float64)


def _chunked(fn, n, workers=1):
    """Apply ``fn`` to fixed slices of ``range(n)`` and return results in slice order."""
    slices = [slice(s, min(s + CHUNK, n)) for s in range(0, n, CHUNK)]
    if workers <= 1 or len(slices) == 1:
        return [fn(sl) for sl in slices]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, slices))


# ----------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    store: ParamStore
    model: Model
    log: list
    bank: ImageBank
    initial_store: ParamStore


def build_model(data, tcfg):
    h, w = data.train.images.shape[1:3]
    _, c, t = data.train.trials.shape
    return Model(tcfg, c, t, data.sample_rate, (h, w), data.visual_seed, data.visual_dim)


def train(data, tcfg, workers=None, bank=None, callback=None):
    """Adam on the overall objective; returns the trained store and a per-step metrics log."""
    if len(data.train.trials) == 0:
        raise ValueError("training split is empty")
    workers = tcfg.workers if workers is None else workers
    model = build_model(data, tcfg)
    store = model.init_params()
    initial = store.copy()
    bank = model.prepare_images(data.train.images) if bank is None else bank
    state = AdamState(lr=tcfg.lr, beta1=tcfg.beta1, beta2=tcfg.beta2, eps=tcfg.eps)
    rng = np.random.default_rng(tcfg.seed + 1)
    labels = data.train.trial_labels
    classes = np.unique(labels)
    by_class = [np.flatnonzero(labels == c) for c in classes]
    b = min(tcfg.batch_size, len(classes))
    log = []
    for step in range(tcfg.steps):
        picked = rng.choice(len(classes), size=b, replace=False)
        trials = np.array([by_class[c][rng.integers(len(by_class[c]))] for c in picked])
        x = data.train.trials[trials]
        idx = data.train.trial_image[trials]
        total, info = model.objective(store, bank, x, idx, workers=workers)
        if not np.isfinite(total):
            raise TrainingDiverged(f"loss became non-finite at step {step}")
        row = {"step": step, **{k: float(info[k]) for k in METRIC_FIELDS[1:]}}
        log.append(row)
        if callback is not None:
            callback(row)
        adam_step(store, state)
        if step % 50 == 0:
            logger.debug("step %d overall %.4f top1 %.3f", step, total, row["probe_top1"])
    return TrainResult(store, model, log, bank, initial)


# ----------------------------------------------------------------------------
# evaluation


@dataclass
class RetrievalReport:
    top1: float
    top5: float
    topk: dict
    per_class: dict
    ranks: np.ndarray
    band_weights: list = field(default_factory=list)
    outlier_frac_before: float | None = None
    outlier_frac_after: float | None = None
    histogram: dict | None = None

    def to_json_dict(self):
        return {
            "top1": self.top1,
            "top5": self.top5,
            "per_class": {str(k): v for k, v in self.per_class.items()},
            "band_weights": [float(v) for v in self.band_weights],
            "outlier_frac_before": self.outlier_frac_before,
            "outlier_frac_after": self.outlier_frac_after,
        }


def retrieval_ranks(sim, true_idx):
    """0-based rank of the true candidate per row; ties go to the lower candidate index."""
    sim = np.asarray(sim, dtype=np.float64)
    true_idx = np.asarray(true_idx)
    if sim.ndim != 2 or sim.shape[1] == 0:
        raise ValueError("need a non-empty (queries x candidates) similarity matrix")
    rows = np.arange(sim.shape[0])
    true_sim = sim[rows, true_idx][:, None]
    cand = np.arange(sim.shape[1])[None, :]
    beats = (sim > true_sim) | ((sim == true_sim) & (cand < true_idx[:, None]))
    return beats.sum(axis=1)


def evaluate_retrieval(z, y, true_idx=None, k_list=(1, 5), labels=None):
    """Top-k zero-shot retrieval of candidates ``y`` for EEG embeddings ``z``.

    ``y`` is (n_cand, d) or query-conditioned (n_query, n_cand, d).  By default
    query i's true candidate is candidate i.
    """
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y.size == 0:
        raise ValueError("empty candidate set")
    zn = z / np.linalg.norm(z, axis=-1, keepdims=True)
    yn = y / np.linalg.norm(y, axis=-1, keepdims=True)
    sim = zn @ yn.T if yn.ndim == 2 else np.einsum("id,ijd->ij", zn, yn)
    return report_from_similarity(sim, true_idx, k_list, labels)


def report_from_similarity(sim, true_idx=None, k_list=(1, 5), labels=None):
    sim = np.asarray(sim, dtype=np.float64)
    true_idx = np.arange(sim.shape[0]) if true_idx is None else np.asarray(true_idx)
    labels = np.arange(sim.shape[0]) if labels is None else np.asarray(labels)
    ranks = retrieval_ranks(sim, true_idx)
    topk = {int(k): float(np.mean(ranks < k)) for k in sorted(set(k_list) | {1, 5})}
    per_class = {int(lbl): int(r) for lbl, r in zip(labels, ranks)}
    return RetrievalReport(topk[1], topk[5], topk, per_class, ranks)


def similarity_histogram(s, bins=20, alpha=0.05):
    """Equal-width counts over [-1, 1] plus the confidence interval and outlier fraction."""
    if bins < 2:
        raise ValueError("need at least two bins")
    s = np.asarray(s, dtype=np.float64)
    counts, edges = np.histogram(np.clip(s, -1.0, 1.0), bins=bins, range=(-1.0, 1.0))
    stats = batch_stats(s, alpha)
    rows = [(float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(bins)]
    return {"rows": rows, "lower": stats.lower, "upper": stats.upper,
            "outlier_fraction": stats.outlier_fraction}


def test_similarity(result, data, workers=1):
    """(n_test x n_cand) similarity of averaged test trials to the test candidates."""
    model, store = result.model, result.store
    test = data.test
    n_img = len(test.images)
    avg = np.stack([test.trials[test.trial_image == j].mean(axis=0) for j in range(n_img)])
    z = model.embed_eeg(store, avg, workers)
    bank = model.prepare_images(test.images)
    y, _ = model.visual_forward(store, bank, np.arange(n_img), z, pairwise=True)
    return np.einsum("id,ijd->ij", z, y)


def outlier_fraction(model, store, data, bank, alpha=0.05, workers=1):
    s = model.matched_similarities(store, bank, data.train.trials, data.train.trial_image, workers)
    return batch_stats(s, alpha).outlier_fraction, s


def evaluate(result, data, bins=20, workers=1):
    """Full report: test retrieval, band weights, and train-set outlier fractions."""
    model = result.model
    sim = test_similarity(result, data, workers)
    report = report_from_similarity(sim, labels=data.test.image_labels)
    if model.cfg.use_ibwave:
        report.band_weights = list(model.band_weights(result.store))
    before, _ = outlier_fraction(model, result.initial_store, data, result.bank, model.cfg.alpha, workers)
    after, s = outlier_fraction(model, result.store, data, result.bank, model.cfg.alpha, workers)
    report.outlier_frac_before = before
    report.outlier_frac_after = after
    report.histogram = similarity_histogram(s, bins, model.cfg.alpha)
    return report


def config_dict(cfg):
    return asdict(cfg)
