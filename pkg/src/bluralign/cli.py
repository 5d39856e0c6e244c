"""Command-line entry point: blur, synth, train, eval, gradcheck and bands."""
from __future__ import annotations

import argparse
import csv
import io as _stdio
import json
import logging
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import io
from .blur import DEFAULT_SCALES, BlurConfig, center_blur, compute_saliency, default_sigma, gaussian_blur, saliency_blur
from .fusion import fuse, linear_fuse, mask_fuse, pixel_keys, attention_scores
from .gradcheck import run_suite
from .pipeline import (
    METRIC_FIELDS,
    Dataset,
    Split,
    SynthConfig,
    TrainConfig,
    TrainingDiverged,
    TrainResult,
    build_model,
    evaluate,
    synth_dataset,
    train,
)
from .spectral import PRESETS, BandScreen, BandSpec, decompose_bands, effective_edges, static_bandpass

logger = logging.getLogger("bluralign")


@dataclass
class BlurSection:
    """Blur options for ``blur``; a null sigma scales 10 px at 224 px with the image."""

    sigma: float | None = None
    w0: float = 0.5
    g: float = 3.0
    scales: tuple = DEFAULT_SCALES

    def blur_config(self, height, width):
        sigma = self.sigma if self.sigma is not None else default_sigma(height, width)
        return BlurConfig(sigma=sigma, w0=self.w0, g=self.g)


@dataclass
class BandSection:
    """Band options for ``bands``; null edges use the default five-band layout."""

    sample_rate: float = 250.0
    base_edges: list | None = None
    delta: float = 1.0
    gamma_bounds: tuple = (0.5, 2.0)
    gamma: list | None = None
    logits: list | None = None
    tau: float = 1.0
    preset: str | None = None

    def spec(self):
        if self.base_edges is None:
            return BandSpec.default(self.sample_rate, gamma_bounds=self.gamma_bounds, delta=self.delta)
        return BandSpec(self.base_edges, self.sample_rate, self.gamma_bounds, self.delta)


SECTIONS = {"synth": SynthConfig, "train": TrainConfig, "blur": BlurSection, "bands": BandSection}


class CommandError(RuntimeError):
    pass


def load_config(path):
    """Return ``(sections, raw_text)``; no path means all defaults."""
    text = Path(path).read_text() if path else ""
    return io.parse_run_config(text, SECTIONS), text


def _prepare_out(path, force):
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise CommandError(f"{out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not force:
        raise CommandError(f"{out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- dataset directories ---------------------------------------------------------


SPLIT_FIELDS = ("images", "image_labels", "trials", "trial_image", "outlier")


def save_dataset(data, out, cfg=None):
    tensors = {}
    for split_name in ("train", "test"):
        split = getattr(data, split_name)
        for name in SPLIT_FIELDS:
            tensors[f"{split_name}_{name}"] = np.asarray(getattr(split, name), dtype=np.float64)
    meta = {"sample_rate": data.sample_rate, "visual_seed": data.visual_seed,
            "visual_dim": data.visual_dim, "test_candidates": int(len(data.test.images)),
            "synth": asdict(cfg) if cfg is not None else None}
    return io.write_manifest(out, tensors, meta)


def load_dataset(directory):
    manifest, tensors = io.read_manifest(directory)
    meta = manifest["meta"]
    splits = {}
    for split_name in ("train", "test"):
        get = lambda name: tensors[f"{split_name}_{name}"]  # noqa: E731
        splits[split_name] = Split(get("images").astype(np.float64),
                                   get("image_labels").astype(np.int64),
                                   get("trials").astype(np.float64),
                                   get("trial_image").astype(np.int64),
                                   get("outlier").astype(bool))
    return Dataset(splits["train"], splits["test"], float(meta["sample_rate"]),
                   int(meta["visual_seed"]), int(meta["visual_dim"]))


# -- params directories ------------------------------------------------------------


def save_params(store, out, tcfg, data):
    tensors = {name: store[name] for name in store.names()}
    meta = {"train": asdict(tcfg), "trainable": {n: store.is_trainable(n) for n in store.names()},
            "n_channels": int(data.train.trials.shape[1]), "n_samples": int(data.train.trials.shape[2]),
            "image_shape": list(data.train.images.shape[1:3]), "sample_rate": data.sample_rate,
            "visual_seed": data.visual_seed, "visual_dim": data.visual_dim}
    return io.write_manifest(out, tensors, meta)


def load_params(directory, data):
    """Rebuild the model for ``data`` and load the stored parameter values."""
    manifest, tensors = io.read_manifest(directory)
    meta = manifest["meta"]
    tcfg = TrainConfig(**meta["train"])
    got = (meta["n_channels"], meta["n_samples"], meta["visual_dim"])
    want = (data.train.trials.shape[1], data.train.trials.shape[2], data.visual_dim)
    if got != want:
        raise CommandError(f"params expect (channels, samples, dim) = {got}, data has {want}")
    model = build_model(data, tcfg)
    initial = model.init_params()
    store = initial.copy()
    if set(tensors) != set(store.names()):
        raise CommandError("parameter names in the manifest do not match the model")
    for name, value in tensors.items():
        store.set_value(name, value.astype(np.float64))
    return model, store, initial, tcfg


# -- report writers ----------------------------------------------------------------


def _csv_text(header, rows):
    buf = _stdio.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def metrics_csv(log):
    return _csv_text(METRIC_FIELDS, ([row["step"]] + [repr(float(row[k])) for k in METRIC_FIELDS[1:]]
                                     for row in log))


def band_rows(spec, gamma, weights):
    """(name, lo_hz, hi_hz, weight) per band; the outer bands reach DC and Nyquist."""
    edges = effective_edges(spec, gamma)[0]
    n = spec.n_bands
    rows = []
    for i in range(n):
        lo = 0.0 if i == 0 else edges[i]
        hi = spec.sample_rate / 2.0 if i == n - 1 else edges[i + 1]
        rows.append((spec.names[i], float(lo), float(hi), float(weights[i])))
    return rows


def write_report(out, report, bands=()):
    """Write report.json, histogram.csv and bands.csv into ``out``."""
    out = Path(out)
    (out / "report.json").write_text(json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n")
    hist = report.histogram or {"rows": []}
    (out / "histogram.csv").write_text(
        _csv_text(("bin_lo", "bin_hi", "count"), ([repr(lo), repr(hi), c] for lo, hi, c in hist["rows"])))
    (out / "bands.csv").write_text(
        _csv_text(("band_name", "lo_hz", "hi_hz", "weight"),
                  ([name, repr(lo), repr(hi), repr(w)] for name, lo, hi, w in bands)))


# -- commands -------------------------------------------------------------------------


def _load_map(path, shape):
    path = Path(path)
    if path.suffix == ".caia":
        arr = io.read_tensor(path).astype(np.float64)
    else:
        arr = io.read_pnm(path).astype(np.float64) / 255.0
    if arr.shape != tuple(shape):
        raise CommandError(f"saliency map {arr.shape} does not match image {tuple(shape)}")
    return arr


def _write_map(out, name, values):
    io.write_tensor(out / f"{name}.caia", values)
    io.write_pnm(out / f"{name}.pgm", np.clip(values, 0.0, 1.0))


def cmd_blur(image, out, config=None, force=False, saliency=None, params=None, trial=None,
             data=None):
    """Blur one P6 image along both paths and fuse them per the configured mode.

    Attention fusion needs an EEG query: pass ``params`` and ``data`` plus a
    ``trial`` file; without them the query is zero and the map is uniformly 0.5.
    """
    sections, _ = load_config(config)
    try:
        img = io.read_image(image)
    except (OSError, ValueError) as exc:
        raise CommandError(f"cannot read {image}: {exc}") from exc
    out = _prepare_out(out, force)
    bcfg = sections["blur"].blur_config(*img.shape[:2])
    tcfg = sections["train"]
    sal = _load_map(saliency, img.shape[:2]) if saliency else compute_saliency(img, sections["blur"].scales)
    x_a, w_s = saliency_blur(img, sal, bcfg)
    x_b, w_r = center_blur(img, bcfg)
    io.write_pnm(out / "gaussian.ppm", gaussian_blur(img, bcfg))
    io.write_pnm(out / "x_a.ppm", x_a)
    io.write_pnm(out / "x_b.ppm", x_b)
    _write_map(out, "w_s", w_s)
    _write_map(out, "w_r", w_r)
    mode = tcfg.effective_mode
    if mode == "attention":
        if params:
            dataset = load_dataset(data)
            model, store, _, tcfg = load_params(params, dataset)
            x = io.read_tensor(trial).astype(np.float64) if trial else dataset.test.trials[:1]
            q = model.embed_eeg(store, x.reshape((-1,) + x.shape[-2:])[:1])[0]
            query_proj, key_proj = store["fusion.query_proj"], store["fusion.key_proj"]
        else:
            rng = np.random.default_rng(tcfg.seed)
            q = np.zeros(64)
            query_proj = rng.normal(size=(tcfg.key_dim, q.size))
            key_proj = rng.normal(size=(tcfg.key_dim, 8))
        # images smaller than the attention grid get one cell per pixel
        grid = (min(tcfg.grid[0], img.shape[0]), min(tcfg.grid[1], img.shape[1]))
        scores = attention_scores(q, pixel_keys(x_a, x_b, key_proj, grid), query_proj)
        fused, att = fuse(x_a, x_b, scores, grid)
        _write_map(out, "attention", att)
    elif mode == "linear":
        fused = linear_fuse(x_a, x_b)
    elif mode == "learnable_mask":
        theta = 0.0
        if params:
            _, tensors = io.read_manifest(params)
            theta = float(tensors["fusion.mask_logit"])
        fused = mask_fuse(x_a, x_b, theta)
    else:
        fused = {"center_only": x_b, "saliency_only": x_a, "original": img}[mode]
    io.write_pnm(out / "x_fused.ppm", fused)
    return 0


def cmd_synth(out, config=None, force=False, seed=None):
    sections, _ = load_config(config)
    cfg = sections["synth"]
    if seed is not None:
        cfg.seed = seed
    out = _prepare_out(out, force)
    data = synth_dataset(cfg)
    save_dataset(data, out, cfg)
    return 0


def cmd_train(data_dir, out, config=None, force=False, seed=None, workers=1, steps=None):
    sections, _ = load_config(config)
    tcfg = sections["train"]
    if seed is not None:
        tcfg.seed = seed
    if steps is not None:
        tcfg.steps = steps
    try:
        data = load_dataset(data_dir)
    except (io.ChecksumError, io.TensorFormatError, KeyError, OSError) as exc:
        raise CommandError(f"dataset at {data_dir} failed validation: {exc}") from exc
    out = _prepare_out(out, force)
    if config:
        (out / "config.yaml").write_bytes(Path(config).read_bytes())
    else:
        (out / "config.yaml").write_text(io.dump_run_config(sections))
    log = []
    status = 0
    try:
        result = train(data, tcfg, workers=workers, callback=log.append)
        store = result.store
    except TrainingDiverged as exc:
        logger.error("%s", exc)
        status = 3
        store = None
    (out / "metrics.csv").write_text(metrics_csv(log))
    if store is not None:
        params = out / "params"
        params.mkdir(exist_ok=True)
        save_params(store, params, tcfg, data)
    return status


def cmd_eval(params, data_dir, out, force=False, workers=1, bins=20):
    data = load_dataset(data_dir)
    model, store, initial, tcfg = load_params(params, data)
    out = _prepare_out(out, force)
    bank = model.prepare_images(data.train.images)
    report = evaluate(TrainResult(store, model, [], bank, initial), data, bins, workers)
    bands = ()
    if tcfg.use_ibwave:
        gamma = model.band_spec.raw_to_gamma(store["band.gamma_raw"])
        bands = band_rows(model.band_spec, gamma, model.band_weights(store))
    write_report(out, report, bands)
    return 0


def cmd_gradcheck(seed=0, h=1e-4, tol=1e-4, stream=None):
    stream = stream or sys.stdout
    reports = run_suite(seed, h, tol)
    for name, rep in reports.items():
        flag = "ok" if rep.passed else "FAIL"
        print(f"{name:28s} {flag:4s} max_rel_err={rep.max_rel_err:.3e} ({rep.worst})", file=stream)
    return 0 if all(r.passed for r in reports.values()) else 1


def cmd_bands(trial, out, config=None, force=False, mode="decompose"):
    """Decompose a trial file into sub-bands, screen it, or apply the static/preset band-pass."""
    sections, _ = load_config(config)
    bs = sections["bands"]
    x = io.read_tensor(trial).astype(np.float64)
    out = _prepare_out(out, force)
    spec = bs.spec()
    gamma = np.ones(spec.n_bands) if bs.gamma is None else np.asarray(bs.gamma, dtype=np.float64)
    if mode == "decompose":
        sub = decompose_bands(x, spec, gamma)
        for name, comp in zip(spec.names, sub.components):
            io.write_tensor(out / f"{name}.caia", comp)
        rows = band_rows(spec, gamma, np.full(spec.n_bands, 1.0 / spec.n_bands))
        (out / "bands.csv").write_text(_csv_text(("band_name", "lo_hz", "hi_hz"),
                                                 ([n, repr(lo), repr(hi)] for n, lo, hi, _ in rows)))
    elif mode == "screen":
        logits = np.zeros(spec.n_bands) if bs.logits is None else np.asarray(bs.logits, dtype=np.float64)
        y, m = BandScreen(spec, x).forward(spec.gamma_to_raw(gamma), logits, bs.tau)
        io.write_tensor(out / "screened.caia", y)
        (out / "bands.csv").write_text(_csv_text(("band_name", "lo_hz", "hi_hz", "weight"),
                                                 ([n, repr(lo), repr(hi), repr(w)]
                                                  for n, lo, hi, w in band_rows(spec, gamma, m))))
    elif mode == "bandpass":
        if bs.preset is None:
            raise CommandError("bandpass mode needs bands.preset in the config")
        if bs.preset not in PRESETS:
            raise CommandError(f"unknown preset {bs.preset!r}; choose from {sorted(PRESETS)}")
        lo, hi = PRESETS[bs.preset]
        io.write_tensor(out / f"{bs.preset}.caia", static_bandpass(x, bs.sample_rate, lo, hi, bs.delta))
    else:
        raise CommandError(f"unknown bands mode {mode!r}")
    return 0


# -- argument parsing ---------------------------------------------------------------------


def _global_flags(suppress):
    # the subcommand copies suppress their defaults so flags given before the
    # subcommand are not reset by the subparser
    def default(value):
        return argparse.SUPPRESS if suppress else value

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=default(None),
                        help="YAML run config (sections: synth, train, blur, bands)")
    common.add_argument("--seed", type=int, default=default(None), help="override the configured seed")
    common.add_argument("--force", action="store_true", default=default(False),
                        help="overwrite a non-empty output directory")
    common.add_argument("--workers", type=int, default=default(1),
                        help="worker threads (results do not depend on it)")
    common.add_argument("-v", "--verbose", action="store_true", default=default(False))
    return common


def build_parser():
    common = _global_flags(suppress=True)
    parser = argparse.ArgumentParser(prog="bluralign", parents=[_global_flags(suppress=False)],
                                     description="EEG-to-image alignment with adaptive blurring")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("blur", parents=[common], help="blur one P6 image along both paths")
    p.add_argument("image")
    p.add_argument("out")
    p.add_argument("--saliency", help="precomputed saliency map (.pgm or .caia)")
    p.add_argument("--params", help="trained params directory for the attention query")
    p.add_argument("--data", help="dataset directory matching --params")
    p.add_argument("--trial", help="EEG trial tensor (C x T) used as the attention query")

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("out")

    p = sub.add_parser("train", parents=[common], help="train on a dataset directory")
    p.add_argument("data")
    p.add_argument("out")
    p.add_argument("--steps", type=int, default=None)

    p = sub.add_parser("eval", parents=[common], help="zero-shot retrieval report")
    p.add_argument("params")
    p.add_argument("data")
    p.add_argument("out")
    p.add_argument("--bins", type=int, default=20)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of all gradients")
    p.add_argument("--h", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-4)

    p = sub.add_parser("bands", parents=[common], help="sub-band decomposition and filters for a trial file")
    p.add_argument("trial")
    p.add_argument("out")
    p.add_argument("--mode", choices=("decompose", "screen", "bandpass"), default="decompose")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "blur":
            return cmd_blur(args.image, args.out, args.config, args.force, args.saliency,
                            args.params, args.trial, args.data)
        if args.command == "synth":
            return cmd_synth(args.out, args.config, args.force, args.seed)
        if args.command == "train":
            return cmd_train(args.data, args.out, args.config, args.force, args.seed, args.workers,
                             args.steps)
        if args.command == "eval":
            return cmd_eval(args.params, args.data, args.out, args.force, args.workers, args.bins)
        if args.command == "gradcheck":
            return cmd_gradcheck(args.seed or 0, args.h, args.tol)
        return cmd_bands(args.trial, args.out, args.config, args.force, args.mode)
    except (CommandError, io.ConfigError, io.ChecksumError, io.TensorFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
