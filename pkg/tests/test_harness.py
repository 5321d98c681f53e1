import copy

import jsonschema
import numpy as np
import pytest
import torch

from helpers import small_config, small_data, small_model, small_series
from memda.checkpoint import checkpoint_bytes, load_checkpoint, read_checkpoint, save_checkpoint
from memda.config import PRESETS, TrainConfig, build_variant
from memda.data import UrbanSeries, earliest_anchor, enumerate_samples, segment_ends
from memda.errors import ConfigurationError, DivergenceError, OrderingError, ShapeError, WindowError
from memda.harness import (
    REPORT_SCHEMA,
    baseline_copy_last_day,
    evaluate_copy_last_day,
    evaluate_online,
    metric_mae,
    metric_mape,
    metric_rmse,
    prepare_data,
    train,
)
from memda.replay import ROLLING, ReplayMemory


def _train(variant="memda", data=None, **overrides):
    config = small_config(variant=variant, **overrides)
    data = data if data is not None else small_data()
    return train(small_model(config), data, config), data, config


# -- metrics -----------------------------------------------------------------


def test_metrics_examples():
    target = np.array([[1.0, 2.0], [3.0, -4.0]])
    assert metric_mae(target, target) == metric_rmse(target, target) == metric_mape(target, target) == 0
    assert metric_mae(target + 1, target) == pytest.approx(1.0)
    assert metric_rmse(target + 1, target) == pytest.approx(1.0)
    assert metric_mape([2.0, 4.0], [1.0, 2.0]) == pytest.approx(100.0)


def test_metric_masks():
    pred, target = np.array([5.0, 2.0, 9.0]), np.array([0.0, 1.0, 9.0])
    # the zero target is dropped from the percentage error only
    assert metric_mape(pred, target) == pytest.approx(50.0)
    assert metric_mae(pred, target, mask=[False, True, True]) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        metric_mae(pred, target, mask=[False] * 3)
    with pytest.raises(ValueError):
        metric_mape([1.0], [0.0])
    with pytest.raises(ShapeError):
        metric_rmse(pred, target[:2])


# -- copy-last-day -----------------------------------------------------------


def _periodic(days=5, p=24, shift=0.0):
    t = np.arange(days * p)
    day = np.sin(2 * np.pi * np.arange(p) / p) + 0.3 * np.cos(4 * np.pi * np.arange(p) / p)
    base = day[t % p]
    values = (base + shift * (t // p))[:, None, None].repeat(2, axis=1)
    return UrbanSeries(values=values, samples_per_day=p)


def test_copy_last_day_exact():
    series = _periodic()
    pred = baseline_copy_last_day(series, 40, 12, 24)
    np.testing.assert_array_equal(pred, series.values[17:29])
    data = prepare_data(series, 72, 0.0)
    anchors = list(range(23, 100))
    assert evaluate_copy_last_day(data, anchors, 12)["mae"] == 0.0
    shifted = prepare_data(_periodic(shift=0.75), 72, 0.0)
    assert evaluate_copy_last_day(shifted, anchors, 12)["mae"] == pytest.approx(0.75, abs=1e-12)


def test_copy_last_day_window_errors():
    series = _periodic()
    with pytest.raises(WindowError):
        baseline_copy_last_day(series, 5, 12, 24)  # t < p - alpha
    with pytest.raises(WindowError):
        baseline_copy_last_day(series, 30, 12, 8)  # p < alpha would leak the future


# -- training ----------------------------------------------------------------


def test_backbone_skips_memory_machinery():
    result, data, config = _train("backbone")
    model = result.model
    assert model.K == 0 and model.pattern_memory is None and model.weights is None
    assert result.replay_memory is None
    assert "warmup" not in result.history.encoder_calls
    assert result.history.embedding_drift == []
    # backbone anchors only need their own window
    assert result.history.n_train_samples == len(enumerate_samples(data.series, 12, 0, data.split.train))


def test_fixed_seed_is_bit_identical():
    a, data, config = _train("memda")
    b, _, _ = _train("memda", data=data)
    assert a.history.train_loss == b.history.train_loss
    assert a.history.val_mae == b.history.val_mae
    assert checkpoint_bytes(a.model, config, data.stats) == checkpoint_bytes(b.model, config, data.stats)


def test_seed_changes_initialization():
    a = build_variant(small_config(seed=0))
    b = build_variant(small_config(seed=1))
    assert not torch.equal(next(a.encoder.parameters()), next(b.encoder.parameters()))


def test_early_stopping_restores_best_epoch():
    config = small_config(max_epochs=6, patience=2, learning_rate=0.02)
    model = small_model(config)
    snapshots = {}

    def remember(epoch, history):
        snapshots[epoch] = copy.deepcopy(model.state_dict())

    result = train(model, small_data(), config, on_epoch=remember)
    h = result.history
    assert h.best_epoch == int(np.argmin(h.val_mae)) + 1
    for name, value in result.model.state_dict().items():
        assert torch.equal(value, snapshots[h.best_epoch][name])


def test_empty_validation_needs_early_stopping_off():
    data = small_data(val_fraction=0.0)
    config = small_config()
    with pytest.raises(ConfigurationError):
        train(small_model(config), data, config)
    config = small_config(early_stopping=False, max_epochs=1)
    assert train(small_model(config), data, config).history.epochs_run == 1


def test_nan_loss_aborts():
    data = small_data()
    data.values[100:110] = float("nan")
    config = small_config()
    with pytest.raises(DivergenceError):
        train(small_model(config), data, config)


def test_encoder_calls_with_replay_memory():
    result, data, config = _train("memda")
    h = result.history
    keys = set()
    train_anchors = enumerate_samples(data.series, 12, 2, data.split.train)
    val_anchors = enumerate_samples(data.series, 12, 2, data.split.val)
    for t in train_anchors + val_anchors:
        keys.update(segment_ends(t, 12, data.p, 2))
    assert h.encoder_calls["warmup"] == len(keys)
    assert h.calls_per_epoch == [h.n_train_samples] * h.epochs_run
    assert h.encoder_calls["train"] == h.n_train_samples * h.epochs_run
    assert h.encoder_calls["refresh"] == (len(keys) - len(train_anchors)) * h.epochs_run


def test_encoder_calls_in_plain_mode():
    result, data, config = _train("memda", replay=False, max_epochs=2)
    h = result.history
    assert result.replay_memory is None
    assert h.calls_per_epoch == [5 * h.n_train_samples] * 2
    assert "warmup" not in h.encoder_calls


def test_replayed_embeddings_lag_one_epoch(monkeypatch):
    seen = []
    original = ReplayMemory.gather

    def spy(self, t, alpha, p, K, fallback_encoder=None, epoch=0):
        ends = segment_ends(t, alpha, p, K)[1:]
        seen.append((epoch, {self.epoch_of(e) for e in ends}))
        return original(self, t, alpha, p, K, fallback_encoder, epoch)

    monkeypatch.setattr(ReplayMemory, "gather", spy)
    result, _, config = _train("memda", max_epochs=3)
    assert seen
    # training in epoch e reads tags e - 1; validation after epoch e reads tags e
    for epoch, tags in seen:
        assert tags == {epoch}
    assert {epoch for epoch, _ in seen} == {0, 1, 2, 3}
    rm = result.replay_memory
    assert {rm.epoch_of(t) for t in rm.keys()} == {3}


def test_embedding_drift_is_recorded():
    result, _, _ = _train("memda", max_epochs=4)
    d = result.history.embedding_drift
    assert len(d) == 4
    assert all(np.isfinite(d)) and all(x >= 0 for x in d)


def test_leakage_perturbing_test_data_changes_nothing():
    series = small_series()
    data = small_data(series)
    noisy = series.values.copy()
    test = data.split.test
    noisy[test.start:] += np.random.default_rng(0).normal(0, 5, noisy[test.start:].shape)
    perturbed = small_data(series.replace_values(noisy))
    a, _, config = _train("memda", data=data)
    b, _, _ = _train("memda", data=perturbed)
    assert checkpoint_bytes(a.model, config, data.stats) == checkpoint_bytes(b.model, config, perturbed.stats)


# -- variants ------------------------------------------------------------------


def test_variant_structure():
    config = small_config()
    models = {v: build_variant(small_config(variant=v)) for v in ("backbone", "rm", "rm_pm", "meta", "memda")}
    groups = {v: {g["group"] for g in read_header(m, config)} for v, m in models.items()}
    assert "pattern-memory" not in groups["rm"]
    assert "pattern-memory" in groups["rm_pm"]
    assert groups["backbone"] == {"encoder", "decoder", "normalization"}
    assert models["rm"].n_entries == 5 and models["rm_pm"].n_entries == 10
    assert models["meta"].weight_input_dim == 16
    assert models["memda"].weight_input_dim == (3 * 2 - 2) * 3
    with pytest.raises(ConfigurationError):
        build_variant(small_config(variant="transformer"))


def read_header(model, config):
    import json
    import struct

    from memda.data import NormalizationStats

    raw = checkpoint_bytes(model, config, NormalizationStats(np.zeros(1), np.ones(1)))
    (n,) = struct.unpack("<I", raw[9:13])
    return json.loads(raw[13:13 + n])["tensors"]


def test_static_weights_constant_and_memda_weights_vary():
    data = small_data()
    rm_pm, _, _ = _train("rm_pm", data=data, max_epochs=1)
    memda, _, _ = _train("memda", data=data, max_epochs=1)
    W_static = evaluate_online(rm_pm.model, data).weights
    W_dynamic = evaluate_online(memda.model, data).weights
    assert (W_static == W_static[0]).all()
    assert W_dynamic.std(axis=0).max() > 1e-6
    np.testing.assert_allclose(W_dynamic.sum(1), 1.0, atol=1e-6)


# -- online evaluation ---------------------------------------------------------


def test_rolling_memory_size_and_contents():
    result, data, _ = _train("memda", max_epochs=1)
    rm = ReplayMemory(ROLLING, capacity=data.p * 2)
    report = evaluate_online(result.model, data, rm=rm)
    assert len(report.anchors) >= data.p * 2
    assert report.rm_size == len(rm) == data.p * 2
    # the newest p*K anchors remain, oldest first
    assert rm.keys() == report.anchors[-data.p * 2:]
    assert report.encoder_calls["anchor"] == len(report.anchors)
    assert report.encoder_calls["prime"] == data.p * 2
    assert "fallback" not in report.encoder_calls


def test_fallback_covers_gaps_in_the_anchor_stream():
    result, data, _ = _train("memda", max_epochs=1)
    rm = ReplayMemory(ROLLING, capacity=data.p * 2)
    anchors = [200, 260]
    report = evaluate_online(result.model, data, anchors=anchors, rm=rm)
    # primed up to 199; anchor 260 needs 212, 224, 236 and 248, none stored
    assert report.encoder_calls["fallback"] == 4
    assert len(rm) == data.p * 2


def test_online_replay_matches_plain_encoding():
    result, data, _ = _train("memda", max_epochs=1)
    replayed = evaluate_online(result.model, data)
    plain = evaluate_online(result.model, data, plain=True)
    np.testing.assert_allclose(replayed.predictions, plain.predictions, atol=1e-5)
    assert plain.encoder_calls["plain"] == 5 * len(plain.anchors)


def test_anchor_order_is_enforced():
    result, data, _ = _train("rm", max_epochs=1)
    with pytest.raises(OrderingError):
        evaluate_online(result.model, data, anchors=[230, 229])
    with pytest.raises(OrderingError):
        evaluate_online(result.model, data, anchors=[230, 230])


def test_too_short_test_range():
    result, data, _ = _train("rm", max_epochs=1)
    with pytest.raises(ConfigurationError):
        evaluate_online(result.model, data, range(0, earliest_anchor(12, 24, 2) + 12))


def test_pattern_memory_frozen_during_evaluation():
    result, data, _ = _train("memda", max_epochs=1)
    pm = result.model.pattern_memory
    before = [p.detach().clone() for p in pm.parameters()]
    evaluate_online(result.model, data)
    assert pm.frozen
    assert all(torch.equal(a, b) for a, b in zip(before, pm.parameters()))


def test_report_json_validates_and_is_denormalized():
    result, data, config = _train("memda", max_epochs=1)
    report = evaluate_online(result.model, data)
    payload = report.to_json({"train": config.to_dict()})
    jsonschema.validate(payload, REPORT_SCHEMA)
    expected = np.abs(report.predictions - report.targets).mean()
    assert report.mae == pytest.approx(expected)
    first = report.anchors[0]
    np.testing.assert_array_equal(report.targets[0], data.series.values[first + 1:first + 13])
    assert sum(d["n_anchors"] for d in report.per_day) == len(report.anchors)


# -- checkpoints ---------------------------------------------------------------


@pytest.mark.parametrize("variant", ["backbone", "rm", "rm_pm", "meta", "memda"])
def test_checkpoint_roundtrip(tmp_path, variant):
    result, data, config = _train(variant, max_epochs=1)
    path = tmp_path / "ck.bin"
    save_checkpoint(path, result.model, config, data.stats, extra={"note": "x"})
    model, config2, stats, extra = load_checkpoint(path)
    assert config2 == config and extra == {"note": "x"}
    np.testing.assert_array_equal(stats.mean, data.stats.mean)
    assert checkpoint_bytes(model, config2, stats, extra) == path.read_bytes()
    a = evaluate_online(result.model, data)
    b = evaluate_online(model, data)
    np.testing.assert_array_equal(a.predictions, b.predictions)


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        read_checkpoint(path)


def test_resume_continues_from_saved_state(tmp_path):
    data = small_data()
    state = tmp_path / "state.pt"
    first_cfg = small_config(max_epochs=2)
    first = train(small_model(first_cfg), data, first_cfg, state_file=state)
    cfg = small_config(max_epochs=4)
    resumed = train(small_model(cfg), data, cfg, state_file=state, resume=True)
    h = resumed.history
    assert h.epochs_run == 4 and len(h.train_loss) == 4
    assert h.train_loss[:2] == first.history.train_loss
    assert h.calls_per_epoch == [h.n_train_samples] * 4


def test_desk_preset_defaults():
    cfg = TrainConfig(**PRESETS["desk"]["train"])
    assert (cfg.batch_size, cfg.learning_rate, cfg.max_epochs) == (64, 0.001, 200)
    assert (cfg.C_e, cfg.L, cfg.D, cfg.N_s, cfg.alpha, cfg.K) == (64, 8, 16, 5, 12, 2)
    full = TrainConfig()
    assert (full.C_e, full.L, full.D) == (256, 20, 32)
