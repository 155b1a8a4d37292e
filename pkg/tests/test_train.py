import csv

import numpy as np
import pytest

from qrlattice import train as train_mod
from qrlattice.data import ColumnSpec, Dataset, Schema
from qrlattice.errors import ConfigError, InputError, NumericalError
from qrlattice.loss import TauDistribution, pinball
from qrlattice.metrics import crossing_rate
from qrlattice.model import FeatureSpec, ModelConfig, QuantileModel, check_model, init_model
from qrlattice.rates import RateConstraintSpec
from qrlattice.train import (DEFAULT_EVAL_TAUS, AdamState, TrainConfig, adam_step, evaluate, fit)

from factories import random_model, random_inputs


def line_data(rng, n, noise=1.0, shift=2.0):
    x = rng.uniform(0, 1, n)
    y = shift + x + noise * rng.normal(size=n)
    return Dataset(x[:, None], y, Schema([ColumnSpec("x")]))


def line_model(seed=0, tau_knots=2, out=(-1.0, 5.0)):
    cfg = ModelConfig([FeatureSpec("x", bounds=(0, 1), keypoints=3)], tau_knots=tau_knots,
                      tau_calibrator_keypoints=6, output_range=out)
    return init_model(cfg, seed)


class TestAdam:
    def test_zero_gradient(self):
        p = np.array([1.0, -2.0])
        new, st = adam_step(p, np.zeros(2), AdamState.create(2))
        assert np.array_equal(new, p) and st.step == 1

    def test_first_step(self):
        new, _ = adam_step(np.array([0.0]), np.array([1.0]), AdamState.create(1))
        # m_hat = 1, v_hat = 1: delta = -lr / (1 + eps)
        assert new[0] == pytest.approx(-0.001 / (1 + 1e-7), rel=1e-12)

    def test_first_step_is_sign_like(self):
        g = np.array([3.0, -0.02, 50.0])
        new, _ = adam_step(np.zeros(3), g, AdamState.create(3, lr=0.01))
        np.testing.assert_allclose(new, -0.01 * np.sign(g), rtol=1e-5)

    def test_matrix_parameters(self, rng):
        p = rng.normal(size=(3, 4))
        new, st = adam_step(p, np.ones((3, 4)), AdamState.create((3, 4)))
        assert new.shape == (3, 4) and st.m.shape == (3, 4)

    def test_deterministic(self, rng):
        grads = rng.normal(size=(20, 5))
        runs = []
        for _ in range(2):
            p, st = np.zeros(5), AdamState.create(5)
            for g in grads:
                p, st = adam_step(p, g, st)
            runs.append(p)
        assert np.array_equal(runs[0], runs[1])

    def test_nan_gradient(self):
        with pytest.raises(NumericalError):
            adam_step(np.zeros(2), np.array([0.0, np.nan]), AdamState.create(2))

    def test_shape_mismatch(self):
        with pytest.raises(InputError):
            adam_step(np.zeros(2), np.zeros(3), AdamState.create(2))


class TestEvaluate:
    def test_perfect(self, rng):
        model = random_model(rng)
        X = random_inputs(rng, model.config, 10)
        y = model.predict_batch(X, 0.3)
        per, mean = evaluate(model, (X, y), [0.3])
        assert per[0] == 0.0 and mean == 0.0

    def test_single_point(self):
        model = init_model(ModelConfig([], init_noise=0.0))
        model.thetas[0][:] = 0.0
        _, mean = evaluate(model, (np.zeros((1, 0)), [1.0]), [0.5])
        assert mean == pytest.approx(0.5)

    def test_matches_pinball(self, rng):
        model = random_model(rng)
        X = random_inputs(rng, model.config, 50)
        y = rng.normal(size=50)
        per, mean = evaluate(model, (X, y), [0.1, 0.6])
        for t, v in zip([0.1, 0.6], per):
            assert v == pytest.approx(np.mean(pinball(y, model.predict_batch(X, t), t)))
        assert mean == pytest.approx(per.mean())

    def test_empty(self):
        with pytest.raises(InputError):
            evaluate(init_model(ModelConfig([])), (np.zeros((0, 0)), []), [0.5])


class TestTrainConfig:
    def test_invalid(self):
        with pytest.raises(ConfigError):
            TrainConfig(epochs=0)
        with pytest.raises(ConfigError):
            TrainConfig(eval_taus=(0.5, 1.0))

    def test_round_trip(self):
        cfg = TrainConfig(epochs=3, tau_dist=TauDistribution.beta_mode(0.5, 10),
                          constraints=[RateConstraintSpec(0.9, 0.02, 0.02, "g", "a")])
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg


class TestFit:
    def test_median_of_gaussian(self, rng):
        train = line_data(rng, 1000)
        val = line_data(rng, 500)
        cfg = TrainConfig(epochs=20, batch_size=32, learning_rate=0.01, seed=1, eval_taus=(0.5,))
        model, _ = fit(line_model(), train, val, cfg)
        xs = np.array([[0.2], [0.5], [0.8]])
        pred = model.predict_batch(xs, 0.5)
        se = 1.2533 / np.sqrt(1000)
        assert np.all(np.abs(pred - (2.0 + xs[:, 0])) < 3 * se + 0.03)

    def test_constant_labels(self, rng):
        data = Dataset(rng.uniform(0, 1, (200, 1)), np.full(200, 0.7), Schema([ColumnSpec("x")]))
        cfg = TrainConfig(epochs=60, batch_size=20, learning_rate=0.01, seed=0)
        model, hist = fit(line_model(out=(0.0, 1.0)), data, data, cfg)
        _, mean = evaluate(model, data, DEFAULT_EVAL_TAUS)
        assert mean < 1e-3

    def test_no_crossing_after_fit(self, rng):
        train = line_data(rng, 300, noise=2.0)
        model, _ = fit(line_model(tau_knots=4), train, None,
                       TrainConfig(epochs=5, learning_rate=0.05, seed=3))
        assert crossing_rate(model, rng.uniform(-0.5, 1.5, (1000, 1))) == 0.0

    def test_every_epoch_feasible(self, rng):
        train = line_data(rng, 200, noise=2.0)
        cfg = TrainConfig(epochs=6, learning_rate=0.05, seed=3)
        # start from an infeasible model so projection has real work to do
        start = QuantileModel(*_noisy_parts(line_model(tau_knots=3)))
        model, hist = fit(start, train, None, cfg)
        for params in hist.snapshots.values():
            m = model.copy()
            m.set_params(params)
            assert check_model(m)[0]

    def test_deterministic(self, rng):
        train = line_data(rng, 150)
        cfg = TrainConfig(epochs=3, seed=5, learning_rate=0.02)
        a, ha = fit(line_model(), train, None, cfg)
        b, hb = fit(line_model(), train, None, cfg)
        assert a.dumps() == b.dumps()
        assert ha.rows == hb.rows

    def test_input_model_untouched(self, rng):
        model = line_model()
        before = model.get_params()
        fit(model, line_data(rng, 50), None, TrainConfig(epochs=1))
        assert np.array_equal(model.get_params(), before)

    def test_convex_subcase_loss_decreases(self, rng):
        y = 10.0 + rng.normal(size=64)
        data = (np.zeros((64, 0)), y)
        model = init_model(ModelConfig([], init_noise=0.0))
        cfg = TrainConfig(epochs=30, batch_size=64, tau_dist=TauDistribution.point(0.5), seed=0)
        _, hist = fit(model, data, None, cfg)
        losses = [r["loss"] for r in hist.rows]
        assert all(b <= a for a, b in zip(losses[1:], losses[2:]))

    def test_best_validation_epoch(self, rng):
        train = line_data(rng, 100)
        _, hist = fit(line_model(), train, None, TrainConfig(epochs=4, learning_rate=0.05))
        vals = [r["val_metric"] for r in hist.rows]
        assert hist.best_epoch == 1 + int(np.argmin(vals))

    def test_constrained_history(self, rng, tmp_path):
        g = np.repeat([0.0, 1.0], 50)
        x = rng.uniform(0, 1, 100)
        schema = Schema([ColumnSpec("x"), ColumnSpec("g", "categorical", ["a", "b"])])
        data = Dataset(np.column_stack([x, g]), x + (1 + g) * rng.normal(size=100), schema)
        cfg_model = ModelConfig([FeatureSpec("x", bounds=(0, 1)),
                                 FeatureSpec("g", kind="categorical", categories=["a", "b"])],
                                output_range=(-3, 3))
        cfg = TrainConfig(epochs=3, constraints=[RateConstraintSpec(0.9, 0.02, 0.02, "g", "b")])
        _, hist = fit(init_model(cfg_model), data, None, cfg)
        path = tmp_path / "h.csv"
        hist.to_csv(path)
        rows = list(csv.reader(open(path)))
        assert rows[0] == ["epoch", "loss", "val_metric", "max_violation"]
        assert len(rows) == 4

    def test_numerical_failure_returns_last_good(self, rng, monkeypatch):
        calls = {"n": 0}
        real = train_mod.expected_pinball_batch

        def flaky(*args, **kw):
            calls["n"] += 1
            loss, grad = real(*args, **kw)
            return (np.nan, grad) if calls["n"] > 4 else (loss, grad)

        monkeypatch.setattr(train_mod, "expected_pinball_batch", flaky)
        train = line_data(rng, 64)
        model, hist = fit(line_model(), train, None, TrainConfig(epochs=5, batch_size=32))
        assert len(hist.rows) == 2 and hist.error is not None
        assert np.array_equal(model.get_params(), hist.snapshots[2])

    def test_failure_in_first_epoch_raises(self, rng, monkeypatch):
        monkeypatch.setattr(train_mod, "expected_pinball_batch", lambda *a, **k: (np.nan, None))
        with pytest.raises(NumericalError):
            fit(line_model(), line_data(rng, 10), None, TrainConfig(epochs=2))


def _noisy_parts(model):
    return (model.config, model.calibrators, model.tau_calibrator, model.grids,
            [t + np.random.default_rng(0).normal(size=t.size) for t in model.thetas],
            model.weights, model.bias)
