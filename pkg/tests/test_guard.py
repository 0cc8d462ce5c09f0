# tests/test_guard.py
import time

import numpy as np
import pytest

from app.services.assets import net_injections
from app.services.config import EnvConfig, GuardConfig
from app.services.errors import ConfigurationError, ReadinessError, ShapeError
from app.services.grid import PowerFlowSolver
from app.services.guard import (
    GuardModel,
    HighRiskSet,
    evaluate_guard,
    feature_scale_from_profiles,
    featurize,
    generate_guard_samples,
    predict_and_assess,
    train_guard,
)


def constant_guard(network, value, buses=(3, 4), config=None):
    """Guard whose every prediction equals value"""
    model = GuardModel(network, HighRiskSet(buses), config or GuardConfig(hidden_sizes=[4]))
    for w in model.params.weights:
        w[:] = 0.0
    model.params.biases[-1][:] = value - model.v_offset
    model.ready = True
    return model


def test_features_of_idle_feeder_are_zero(small_feeder, feeder_devices, make_profiles):
    profiles = make_profiles(small_feeder, feeder_devices, load_kw=0.0)
    features = featurize(small_feeder, profiles, feeder_devices.ess, [0.0], 0)
    assert features.shape == (10,)
    np.testing.assert_array_equal(features, 0.0)

    charged = featurize(small_feeder, profiles, feeder_devices.ess, [150.0], 0)
    assert charged[3] == pytest.approx(0.15)
    assert np.count_nonzero(charged) == 1


def test_assessment_against_shrunk_limits(small_feeder):
    limits = (0.95, 1.05)
    features = np.zeros(10)
    assert predict_and_assess(constant_guard(small_feeder, 1.00), features, limits)[1]
    assert not predict_and_assess(constant_guard(small_feeder, 0.949), features, limits)[1]

    near = constant_guard(small_feeder, 0.951)
    predicted, safe = predict_and_assess(near, features, limits)
    np.testing.assert_allclose(predicted, 0.951)
    assert not safe
    assert predict_and_assess(near, features, limits, margin=0.0)[1]


def test_unready_guard_refuses_to_assess(small_feeder):
    model = GuardModel(small_feeder, HighRiskSet((3,)))
    with pytest.raises(ReadinessError):
        model.assess(np.zeros(10))


def test_rmse_over_all_entries(small_feeder):
    model = constant_guard(small_feeder, 1.0)
    labels = np.array([[0.98, 1.02], [1.02, 0.98]])
    assert model.loss(np.zeros((2, 10)), labels) == pytest.approx(0.02, abs=1e-8)


def test_online_readiness(small_feeder):
    config = GuardConfig(hidden_sizes=[4], loss_window=5, ready_loss=1.0, batch_size=2)
    model = GuardModel(small_feeder, HighRiskSet((3, 4)), config)
    features, labels = np.full(10, 0.1), np.array([0.99, 0.98])
    for _ in range(4):
        model.observe(features, labels)
    assert not model.ready
    model.observe(features, labels)
    assert model.ready and model.samples_seen == 5

    version = model.params.version
    model.observe(features, labels)
    assert model.params.version == version


def test_high_risk_set_validation(small_feeder):
    with pytest.raises(ConfigurationError):
        HighRiskSet(())
    with pytest.raises(ConfigurationError):
        HighRiskSet((2, 2))
    with pytest.raises(ConfigurationError):
        HighRiskSet((7,)).validate(small_feeder)
    assert HighRiskSet((3, 4)).labels == [4, 5]


def test_feature_scale(small_feeder, feeder_profiles, feeder_devices):
    scale = feature_scale_from_profiles(small_feeder, feeder_profiles, feeder_devices.ess)
    assert scale.shape == (10,)
    assert scale[3] == pytest.approx((150.0 + 200.0) / 1000.0)
    assert scale[0] == pytest.approx(1e-3)


def test_offline_training_reduces_error(small_feeder, feeder_profiles, feeder_devices):
    high_risk = HighRiskSet((3, 4))
    features, labels = generate_guard_samples(
        small_feeder, feeder_profiles, feeder_devices.ess, high_risk, 64, np.random.default_rng(0)
    )
    assert features.shape == (64, 10) and labels.shape == (64, 2)

    config = GuardConfig(hidden_sizes=[16], batch_size=16, lr=1e-3)
    model = GuardModel(
        small_feeder, high_risk, config,
        feature_scale=feature_scale_from_profiles(small_feeder, feeder_profiles, feeder_devices.ess),
    )
    before = model.loss(features, labels)
    model, trace = train_guard(model, features, labels, epochs=20)
    assert len(trace) == 20
    assert trace[-1] < before

    report = evaluate_guard(model, features[:5], labels[:5])
    assert list(report.columns) == ["sample", "rmse", "max_abs_err"]
    assert len(report) == 5

    with pytest.raises(ShapeError):
        train_guard(model, features, labels[:10], epochs=1)


def test_checkpoint_round_trip(tmp_path, small_feeder):
    model = constant_guard(small_feeder, 0.97)
    path = model.save(tmp_path / "guard.npz")
    restored = GuardModel.load(path, small_feeder)
    assert restored.ready
    assert restored.high_risk.buses == (3, 4)
    np.testing.assert_allclose(restored.predict(np.zeros(10)), 0.97)


def test_checkpoint_keeps_online_state(tmp_path, small_feeder):
    config = GuardConfig(hidden_sizes=[8], loss_window=200, batch_size=8, reservoir_size=64)
    model = GuardModel(small_feeder, HighRiskSet((3, 4)), config, seed=4)
    rng = np.random.default_rng(1)
    for _ in range(50):
        model.observe(rng.normal(0.0, 0.1, 10), rng.uniform(0.96, 1.0, 2))
    assert not model.ready

    restored = GuardModel.load(model.save(tmp_path / "guard.npz"), small_feeder)
    assert restored.running_loss == pytest.approx(model.running_loss)
    assert len(restored.recent_losses) == 50
    assert restored._reservoir_n == model._reservoir_n == 50
    np.testing.assert_array_equal(restored._reservoir_x[:50], model._reservoir_x[:50])

    # Both copies continue identically from the same sample
    features, labels = np.full(10, 0.05), np.array([0.98, 0.97])
    assert restored.observe(features, labels) == pytest.approx(model.observe(features, labels))
    for a, b in zip(restored.params.arrays(), model.params.arrays()):
        np.testing.assert_allclose(a, b)


def test_loss_gradient_matches_finite_differences(small_feeder):
    model = GuardModel(small_feeder, HighRiskSet((3, 4)), GuardConfig(hidden_sizes=[6]), seed=2)
    rng = np.random.default_rng(5)
    features = rng.normal(0.0, 1.0, (7, 10))
    labels = rng.uniform(0.95, 1.0, (7, 2))
    _, grads = model.loss_and_grad(features, labels)

    h = 1e-6
    for param, grad in zip(model.params.arrays(), grads.arrays()):
        for index in [(0,) * param.ndim, tuple(s - 1 for s in param.shape)]:
            saved = param[index]
            param[index] = saved + h
            up = model.loss(features, labels)
            param[index] = saved - h
            down = model.loss(features, labels)
            param[index] = saved
            assert grad[index] == pytest.approx((up - down) / (2 * h), rel=1e-4, abs=1e-8)


def test_held_out_error_below_readiness_threshold(small_feeder, feeder_profiles, feeder_devices):
    high_risk = HighRiskSet((3, 4))
    train_x, train_y = generate_guard_samples(
        small_feeder, feeder_profiles, feeder_devices.ess, high_risk, 400, np.random.default_rng(10)
    )
    test_x, test_y = generate_guard_samples(
        small_feeder, feeder_profiles, feeder_devices.ess, high_risk, 100, np.random.default_rng(11)
    )
    model = GuardModel(
        small_feeder, high_risk, GuardConfig(hidden_sizes=[32], batch_size=32, lr=1e-3),
        feature_scale=feature_scale_from_profiles(small_feeder, feeder_profiles, feeder_devices.ess),
    )
    model, _ = train_guard(model, train_x, train_y, epochs=150)

    assert model.loss(test_x, test_y) < 1e-2
    assert evaluate_guard(model, test_x, test_y)["max_abs_err"].max() < 3e-2


@pytest.mark.slow
def test_held_out_error_on_full_feeder(ieee33, profiles, devices):
    high_risk = HighRiskSet(tuple(EnvConfig().high_risk_indices))
    train_hours = profiles.split_indices("train")
    test_hours = profiles.split_indices("test")
    train_x, train_y = generate_guard_samples(
        ieee33, profiles, devices.ess, high_risk, 600, np.random.default_rng(0), hours=train_hours
    )
    test_x, test_y = generate_guard_samples(
        ieee33, profiles, devices.ess, high_risk, 150, np.random.default_rng(1), hours=test_hours
    )
    model = GuardModel(
        ieee33, high_risk, GuardConfig(hidden_sizes=[64, 64], batch_size=32, lr=1e-3),
        feature_scale=feature_scale_from_profiles(ieee33, profiles, devices.ess),
    )
    model, _ = train_guard(model, train_x, train_y, epochs=200)
    assert model.loss(test_x, test_y) < 1e-2


def test_inference_much_faster_than_power_flow(ieee33, profiles, devices):
    high_risk = HighRiskSet(tuple(EnvConfig().high_risk_indices))
    model = GuardModel(ieee33, high_risk, GuardConfig())
    solver = PowerFlowSolver(ieee33)
    power = np.array([100.0, -50.0, 0.0, 150.0])
    features = featurize(ieee33, profiles, devices.ess, power, 19)
    inj = net_injections(ieee33, profiles, devices.ess, power, 19)

    def best_of(call, repeats=100):
        times = []
        for _ in range(repeats):
            started = time.perf_counter()
            call()
            times.append(time.perf_counter() - started)
        return min(times)

    assert best_of(lambda: solver.solve(inj)) >= 10 * best_of(lambda: model.predict(features))
