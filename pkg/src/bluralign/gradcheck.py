"""Finite-difference checks of every hand-written backward pass on small random problems."""
from __future__ import annotations

import numpy as np

from .blur import BlurConfig, blend_backward, center_blur, compute_saliency, saliency_blur
from .diffcore import ParamStore, fd_gradient_check
from .fusion import attention_fuse_backward, attention_fuse_forward
from .pipeline import Dataset, Model, Split, TrainConfig
from .spectral import BandScreen, BandSpec


def _image(rng, size=12):
    return rng.uniform(0.05, 0.95, (size, size, 3))


def check_blur(seed=0, h=1e-4, tol=1e-4):
    """Saliency and center blur paths w.r.t. image values (weights held fixed)."""
    rng = np.random.default_rng(seed)
    img = _image(rng)
    cfg = BlurConfig(sigma=1.3, w0=0.4, g=2.0)
    sal = compute_saliency(img, (2,))
    out = {}
    for name, run in (("saliency", lambda x: saliency_blur(x, sal, cfg)),
                      ("center", lambda x: center_blur(x, cfg))):
        coef = rng.standard_normal(img.shape)
        store = ParamStore()
        store.add("image", img.copy())
        _, weight = run(img)
        store.accumulate_grad("image", blend_backward(coef, weight, cfg))
        out[f"blur.{name}"] = fd_gradient_check(
            lambda s, run=run, coef=coef: float(np.sum(coef * run(s["image"])[0])), store, h, tol)
    return out


def check_fusion(seed=0, h=1e-4, tol=1e-4, dim=6, key_dim=4, grid=(4, 4)):
    """Attention fusion w.r.t. the query, both projections and both blurred inputs."""
    rng = np.random.default_rng(seed)
    size = 10
    store = ParamStore()
    store.add("q", rng.standard_normal(dim))
    store.add("query_proj", rng.standard_normal((key_dim, dim)))
    store.add("key_proj", rng.standard_normal((key_dim, 8)))
    store.add("x_a", _image(rng, size))
    store.add("x_b", _image(rng, size))
    coef = rng.standard_normal((size, size, 3))

    def f(s):
        fused, _, _ = attention_fuse_forward(s["x_a"], s["x_b"], s["q"], s["query_proj"],
                                             s["key_proj"], grid)
        return float(np.sum(coef * fused))

    _, _, cache = attention_fuse_forward(store["x_a"], store["x_b"], store["q"],
                                         store["query_proj"], store["key_proj"], grid)
    grads = attention_fuse_backward(cache, coef, store["query_proj"], store["key_proj"])
    for name, value in grads.items():
        store.accumulate_grad(name, value)
    return {"fusion.attention": fd_gradient_check(f, store, h, tol)}


def check_spectral(seed=0, h=1e-4, tol=1e-4, tau=0.7):
    """Band screening w.r.t. the gamma scales and the selection logits."""
    rng = np.random.default_rng(seed)
    spec = BandSpec.default(250.0)
    x = rng.standard_normal((2, 3, 250))
    screen = BandScreen(spec, x)
    coef = rng.standard_normal(x.shape)
    store = ParamStore()
    store.add("gamma_raw", spec.gamma_to_raw(rng.uniform(0.7, 1.3, spec.n_bands)))
    store.add("logits", rng.standard_normal(spec.n_bands))

    def f(s):
        return float(np.sum(coef * screen.forward(s["gamma_raw"], s["logits"], tau)[0]))

    f(store)
    d_raw, d_logits = screen.backward(coef)
    store.accumulate_grad("gamma_raw", d_raw)
    store.accumulate_grad("logits", d_logits)
    return {"spectral.screen": fd_gradient_check(f, store, h, tol)}


def tiny_dataset(seed=0, n_images=6, channels=3, samples=64, sample_rate=64.0, size=16, dim=8):
    """Random images and trials, one trial per image, sized for fast FD checks."""
    rng = np.random.default_rng(seed)
    images = rng.uniform(0.0, 1.0, (n_images, size, size, 3))
    trials = rng.standard_normal((n_images, channels, samples))
    labels = np.arange(n_images)
    split = Split(images, labels, trials, labels.copy(), np.zeros(n_images, dtype=bool))
    return Dataset(split, split, sample_rate, seed, dim)


def _model_case(data, seed, h, tol, **overrides):
    kwargs = dict(grid=(4, 4), key_dim=4, n_maps=2, kernel=9, saliency_scales=(2,),
                  w1=1.0, w2=1.0, alpha=0.5, tau=0.8, seed=seed)
    kwargs.update(overrides)
    tcfg = TrainConfig(**kwargs)
    train = data.train
    _, c, t = train.trials.shape
    model = Model(tcfg, c, t, data.sample_rate, train.images.shape[1:3], data.visual_seed,
                  data.visual_dim)
    store = model.init_params()
    rng = np.random.default_rng(seed + 7)
    # move off the symmetric initial point so every gradient path is exercised
    store.set_value("band.gamma_raw", store["band.gamma_raw"] + rng.normal(0, 0.05, store["band.gamma_raw"].shape))
    store.set_value("band.logits", rng.normal(0, 0.5, store["band.logits"].shape))
    store.set_value("fusion.mask_logit", np.array(0.3))
    bank = model.prepare_images(train.images)
    x, idx = train.trials, train.trial_image
    _, info = model.objective(store, bank, x, idx, backward=False)
    frozen = info["stats"] if tcfg.detach_stats else None
    model.objective(store, bank, x, idx, frozen_stats=frozen)
    return fd_gradient_check(
        lambda s: model.objective(s, bank, x, idx, frozen_stats=frozen, backward=False)[0],
        store, h, tol)


def check_end_to_end(seed=0, h=1e-4, tol=1e-4):
    """Overall loss through both encoders, fusion and band screening."""
    data = tiny_dataset(seed)
    return {
        "e2e.attention": _model_case(data, seed, h, tol),
        "e2e.attention_live_stats": _model_case(data, seed, h, tol, detach_stats=False),
        "e2e.learnable_mask": _model_case(data, seed, h, tol, fusion_mode="learnable_mask"),
        "e2e.clip_only": _model_case(data, seed, h, tol, use_fusion=False, use_ibwave=False,
                                     use_bound=False),
    }


def run_suite(seed=0, h=1e-4, tol=1e-4):
    """Run every check; returns ``{name: GradCheckReport}``."""
    reports = {}
    for check in (check_blur, check_fusion, check_spectral, check_end_to_end):
        reports.update(check(seed, h, tol))
    return reports
