import csv
import json

import numpy as np
import pytest

from bluralign import cli, io
from bluralign.pipeline import report_from_similarity

CONFIG = """\
synth:
  n_classes: 4
  n_test_classes: 2
  image_size: [32, 32]
  channels: 3
  samples: 64
  sample_rate: 128.0
  visual_dim: 16
train:
  steps: 3
  batch_size: 4
  grid: [8, 8]
  key_dim: 4
  n_maps: 2
bands:
  sample_rate: 128.0
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "cfg.yaml").write_text(CONFIG)
    assert cli.main(["synth", str(root / "data"), "--config", str(root / "cfg.yaml")]) == 0
    assert cli.main(["train", str(root / "data"), str(root / "run"), "--config", str(root / "cfg.yaml")]) == 0
    return root


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_synth_manifest_and_determinism(workspace, tmp_path):
    manifest, _ = io.read_manifest(workspace / "data")
    assert manifest["meta"]["test_candidates"] == 2
    assert cli.main(["synth", str(tmp_path / "again"), "--config", str(workspace / "cfg.yaml")]) == 0
    for f in sorted((workspace / "data").iterdir()):
        assert f.read_bytes() == (tmp_path / "again" / f.name).read_bytes()


def test_synth_refuses_non_empty_dir(workspace, capsys):
    assert cli.main(["synth", str(workspace / "data")]) == 2
    assert "--force" in capsys.readouterr().err


def test_train_outputs(workspace):
    run = workspace / "run"
    assert (run / "config.yaml").read_bytes() == (workspace / "cfg.yaml").read_bytes()
    rows = read_csv(run / "metrics.csv")
    assert rows[0] == ["step", "clip_loss", "bound_loss", "entropy", "overall", "probe_top1"]
    assert len(rows) == 4
    manifest, tensors = io.read_manifest(run / "params")
    assert "eeg.proj" in tensors and manifest["meta"]["train"]["steps"] == 3


def test_train_zero_steps_and_rerun(workspace, tmp_path):
    cfg = str(workspace / "cfg.yaml")
    data = str(workspace / "data")
    assert cli.main(["train", data, str(tmp_path / "z"), "--config", cfg, "--steps", "0"]) == 0
    assert (tmp_path / "z" / "metrics.csv").read_text() == "step,clip_loss,bound_loss,entropy,overall,probe_top1\n"
    assert (tmp_path / "z" / "params" / "manifest.json").exists()
    assert cli.main(["--force", "train", data, str(workspace / "run"), "--config", cfg, "--workers", "2"]) == 0
    first = (workspace / "run" / "metrics.csv").read_bytes()
    assert cli.main(["train", data, str(workspace / "run"), "--config", cfg, "--force"]) == 0
    assert (workspace / "run" / "metrics.csv").read_bytes() == first


def test_train_rejects_tampered_data(workspace, tmp_path):
    import shutil
    bad = tmp_path / "bad"
    shutil.copytree(workspace / "data", bad)
    raw = bytearray((bad / "train_trials.caia").read_bytes())
    raw[100] ^= 0xFF
    (bad / "train_trials.caia").write_bytes(bytes(raw))
    assert cli.main(["train", str(bad), str(tmp_path / "out")]) == 2


def test_eval_outputs(workspace, tmp_path):
    out = tmp_path / "eval"
    assert cli.main(["eval", str(workspace / "run" / "params"), str(workspace / "data"), str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert set(report) == {"top1", "top5", "per_class", "band_weights", "outlier_frac_before", "outlier_frac_after"}
    assert report["top1"] <= report["top5"]
    bands = read_csv(out / "bands.csv")
    assert bands[0] == ["band_name", "lo_hz", "hi_hz", "weight"]
    assert abs(sum(float(r[3]) for r in bands[1:]) - 1.0) < 1e-6
    hist = read_csv(out / "histogram.csv")
    assert hist[0] == ["bin_lo", "bin_hi", "count"]
    assert sum(int(r[2]) for r in hist[1:]) == 16


def test_eval_dimension_mismatch(workspace, tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(CONFIG.replace("channels: 3", "channels: 5"))
    assert cli.main(["synth", str(tmp_path / "d5"), "--config", str(cfg)]) == 0
    assert cli.main(["eval", str(workspace / "run" / "params"), str(tmp_path / "d5"), str(tmp_path / "e")]) == 2


def test_report_writer_identity_fixture(tmp_path):
    cli.write_report(tmp_path, report_from_similarity(np.eye(5)))
    assert json.loads((tmp_path / "report.json").read_text())["top1"] == 1.0


def write_image(path, img):
    io.write_pnm(path, img)
    return io.read_image(path)


def test_blur_constant_image(tmp_path):
    write_image(tmp_path / "c.ppm", np.full((24, 20, 3), 0.4))
    assert cli.main(["blur", str(tmp_path / "c.ppm"), str(tmp_path / "out")]) == 0
    src = (tmp_path / "c.ppm").read_bytes()
    for name in ("x_a", "x_b", "x_fused", "gaussian"):
        assert (tmp_path / "out" / f"{name}.ppm").read_bytes() == src


def test_blur_w0_one_and_attention_map(tmp_path, rng):
    write_image(tmp_path / "r.ppm", rng.uniform(size=(30, 26, 3)))
    (tmp_path / "cfg.yaml").write_text("blur:\n  w0: 1.0\n")
    assert cli.main(["blur", str(tmp_path / "r.ppm"), str(tmp_path / "out"), "--config", str(tmp_path / "cfg.yaml")]) == 0
    out = tmp_path / "out"
    assert (out / "x_a.ppm").read_bytes() == (out / "gaussian.ppm").read_bytes()
    att = io.read_tensor(out / "attention.caia")
    np.testing.assert_allclose(att, 0.5)
    assert np.max(np.abs(io.read_pnm(out / "attention.pgm") / 255.0 - att)) <= 1 / 255
    w_s = io.read_tensor(out / "w_s.caia")
    assert np.max(np.abs(io.read_pnm(out / "w_s.pgm") / 255.0 - w_s)) <= 1 / 255


def test_blur_with_trained_query(workspace, tmp_path, rng):
    write_image(tmp_path / "r.ppm", rng.uniform(size=(32, 32, 3)))
    args = ["blur", str(tmp_path / "r.ppm"), str(tmp_path / "out"), "--params", str(workspace / "run" / "params"),
            "--data", str(workspace / "data")]
    assert cli.main(args) == 0
    att = io.read_tensor(tmp_path / "out" / "attention.caia")
    assert att.shape == (32, 32) and att.std() > 0


def test_blur_errors(tmp_path):
    (tmp_path / "bad.ppm").write_bytes(b"nope")
    assert cli.main(["blur", str(tmp_path / "bad.ppm"), str(tmp_path / "o")]) == 2
    (tmp_path / "cfg.yaml").write_text("blur:\n  sigmaa: 1\n")
    write_image(tmp_path / "ok.ppm", np.zeros((20, 20, 3)))
    assert cli.main(["blur", str(tmp_path / "ok.ppm"), str(tmp_path / "o2"), "--config", str(tmp_path / "cfg.yaml")]) == 2


def test_bands_modes(workspace, tmp_path):
    _, tensors = io.read_manifest(workspace / "data")
    trial = tensors["test_trials"][0]
    io.write_tensor(tmp_path / "t.caia", trial)
    cfg = str(workspace / "cfg.yaml")
    assert cli.main(["bands", str(tmp_path / "t.caia"), str(tmp_path / "dec"), "--config", cfg]) == 0
    parts = [io.read_tensor(tmp_path / "dec" / f"{n}.caia") for n in ("delta", "theta", "alpha", "beta", "gamma")]
    np.testing.assert_allclose(np.sum(parts, axis=0), trial, atol=1e-4)
    assert cli.main(["bands", str(tmp_path / "t.caia"), str(tmp_path / "scr"), "--config", cfg, "--mode", "screen"]) == 0
    np.testing.assert_allclose(io.read_tensor(tmp_path / "scr" / "screened.caia"), trial, atol=1e-4)
    assert cli.main(["bands", str(tmp_path / "t.caia"), str(tmp_path / "bp"), "--config", cfg, "--mode", "bandpass"]) == 2


def test_gradcheck_command(capsys):
    assert cli.main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "e2e.attention" in out
