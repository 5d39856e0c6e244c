import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bluralign import _instrument
from bluralign.pipeline import (
    FUSION_MODES,
    METRIC_FIELDS,
    Model,
    SynthConfig,
    TrainConfig,
    TrainingDiverged,
    band_frequencies,
    build_model,
    evaluate,
    evaluate_retrieval,
    report_from_similarity,
    retrieval_ranks,
    similarity_histogram,
    synth_dataset,
    train,
)

SMALL = dict(n_classes=12, n_test_classes=4, image_size=(32, 32), channels=4, samples=64,
             sample_rate=128.0, visual_dim=16)
FAST = dict(grid=(8, 8), batch_size=12, key_dim=8, n_maps=4)


@pytest.fixture(scope="module")
def small_data():
    return synth_dataset(SynthConfig(**SMALL))


def test_synth_shapes_and_determinism(small_data):
    tr, te = small_data.train, small_data.test
    assert tr.images.shape == (24, 32, 32, 3)
    assert tr.trials.shape == (48, 4, 64)
    assert te.images.shape == (4, 32, 32, 3)
    assert set(te.image_labels).isdisjoint(tr.image_labels)
    assert tr.images.min() >= 0 and tr.images.max() <= 1
    again = synth_dataset(SynthConfig(**SMALL))
    np.testing.assert_array_equal(again.train.trials, tr.trials)
    np.testing.assert_array_equal(again.test.images, te.images)


def test_signal_lives_in_its_band(small_data):
    cfg = SynthConfig(**SMALL)
    freqs = np.fft.rfftfreq(cfg.samples, 1 / cfg.sample_rate)
    power = (np.abs(np.fft.rfft(small_data.train.trials, axis=-1)) ** 2).sum(axis=(0, 1))
    carriers = band_frequencies(cfg, cfg.signal_band)
    inside = np.isin(freqs, carriers)
    assert power[inside].sum() / power.sum() > 0.999
    assert np.all((carriers > 13) & (carriers < 30))


def test_noise_and_outliers_train_only():
    data = synth_dataset(SynthConfig(**SMALL, noise_scale=1.0, outlier_fraction=0.25))
    assert data.train.outlier.sum() == 12
    assert not data.test.outlier.any()
    with pytest.raises(ValueError):
        SynthConfig(signal_band=2, noise_band=2)


def test_clip_loss_drops_within_50_steps(small_data):
    result = train(small_data, TrainConfig(steps=50, **FAST))
    losses = [row["clip_loss"] for row in result.log]
    assert min(losses[1:]) < losses[0]
    assert list(result.log[0]) == list(METRIC_FIELDS)


def test_worker_count_does_not_change_training(small_data):
    cfg = TrainConfig(steps=4, **FAST)
    a = train(small_data, cfg, workers=1)
    b = train(small_data, cfg, workers=3)
    assert a.log == b.log
    for name in a.store.names():
        np.testing.assert_array_equal(a.store[name], b.store[name])


def test_all_flags_off_is_plain_clip(small_data):
    cfg = TrainConfig(steps=3, use_fusion=False, use_ibwave=False, use_bound=False, **FAST)
    result = train(small_data, cfg)
    for row in result.log:
        assert row["overall"] == row["clip_loss"]
        assert row["bound_loss"] == 0.0 and row["entropy"] == 0.0
    assert sum(_instrument.counters.values()) == 0
    assert not result.store.is_trainable("band.logits")
    assert not result.store.is_trainable("fusion.query_proj")


@pytest.mark.parametrize("mode", FUSION_MODES)
def test_every_fusion_mode_trains(small_data, mode):
    result = train(small_data, TrainConfig(steps=2, fusion_mode=mode, **FAST))
    assert np.isfinite(result.log[-1]["overall"])
    assert result.model.mode == mode


def test_frozen_temperature(small_data):
    result = train(small_data, TrainConfig(steps=3, learn_temperature=False, **FAST))
    assert result.store["logit_scale"] == result.initial_store["logit_scale"]


def test_divergence_guard(small_data, monkeypatch):
    monkeypatch.setattr(Model, "objective", lambda self, *a, **k: (float("nan"), {}))
    with pytest.raises(TrainingDiverged):
        train(small_data, TrainConfig(steps=2, **FAST))


def test_evaluate_report(small_data):
    result = train(small_data, TrainConfig(steps=5, **FAST))
    report = evaluate(result, small_data, bins=10)
    assert 0 <= report.top1 <= report.top5 <= 1
    assert abs(sum(report.band_weights) - 1) < 1e-12
    assert sum(c for _, _, c in report.histogram["rows"]) == len(small_data.train.trials)
    assert set(report.to_json_dict()) == {"top1", "top5", "per_class", "band_weights",
                                          "outlier_frac_before", "outlier_frac_after"}


def test_retrieval_ranks_oracle(rng):
    sim = rng.standard_normal((7, 7))
    ranks = retrieval_ranks(sim, np.arange(7))
    expected = [int(np.where(np.argsort(-sim[i], kind="stable") == i)[0][0]) for i in range(7)]
    np.testing.assert_array_equal(ranks, expected)
    # ties resolve toward the lower candidate index
    np.testing.assert_array_equal(retrieval_ranks(np.ones((3, 3)), np.arange(3)), [0, 1, 2])


def test_identity_similarity_is_perfect():
    rep = report_from_similarity(np.eye(6))
    assert rep.top1 == 1.0 and rep.top5 == 1.0
    z = np.eye(4)
    assert evaluate_retrieval(z, z).top1 == 1.0
    assert evaluate_retrieval(z, np.broadcast_to(z, (4, 4, 4))).top1 == 1.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 12))
def test_topk_monotone(seed, n):
    rep = report_from_similarity(np.random.default_rng(seed).standard_normal((n, n)), k_list=(1, 3, 5))
    assert rep.topk[1] <= rep.topk[3] <= rep.topk[5]


def test_histogram_counts():
    s = np.array([-0.95, 0.0, 0.05, 0.99, 1.0])
    hist = similarity_histogram(s, bins=4)
    assert [c for _, _, c in hist["rows"]] == [1, 0, 2, 2]
    with pytest.raises(ValueError):
        similarity_histogram(s, bins=1)


def test_build_model_dims(small_data):
    model = build_model(small_data, TrainConfig(**FAST))
    store = model.init_params()
    assert store["eeg.mixer"].shape == (4, 4)
    assert store["fusion.query_proj"].shape == (8, 16)
