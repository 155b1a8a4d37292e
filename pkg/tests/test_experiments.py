import numpy as np
import pytest

from qrlattice.errors import ConfigError
from qrlattice.experiments import (GROUPS, SweepSettings, concentration_experiment, constant_experiment,
                                   fit_linear_tau, grouped_data, rate_experiment, rate_specs,
                                   unconditional_experiment)
from qrlattice.lattice import Grid, MonotoneSpec, project_monotone
from qrlattice.loss import TauDistribution, pinball_subgrad_yhat, sample_tau
from qrlattice.metrics import harrell_davis, sample_quantile
from qrlattice.train import AdamState, adam_step


def loop_fit(y, dist, steps, lr, rng):
    """One row at a time, with the library's lattice projection."""
    theta = np.array([y.min(), y.max()])
    state = AdamState.create(2, lr=lr)
    grid, spec = Grid.uniform([2]), MonotoneSpec([0])
    for _ in range(steps):
        t = sample_tau(dist, rng, size=y.size)
        g = pinball_subgrad_yhat(y, theta[0] + t * (theta[1] - theta[0]), t) / y.size
        theta, state = adam_step(theta, np.array([np.sum(g * (1 - t)), np.sum(g * t)]), state)
        theta = project_monotone(theta, grid, spec)
    return theta


class TestFitLinearTau:
    def test_matches_row_loop(self, rng):
        # the vectorized fit draws taus row-major, so one row reproduces the loop exactly
        y = rng.exponential(size=(1, 31))
        dist = TauDistribution.beta_mode(0.5, 20)
        got = fit_linear_tau(y, dist, steps=300, lr=0.01, seed=5)
        want = loop_fit(y[0], dist, 300, 0.01, np.random.default_rng(5))
        np.testing.assert_allclose(got[0], want, atol=1e-12)

    def test_rows_stay_ordered(self, rng):
        theta = fit_linear_tau(rng.normal(size=(40, 11)), TauDistribution.uniform(), steps=200, lr=0.05)
        assert np.all(theta[:, 0] <= theta[:, 1])

    def test_point_mass_recovers_sample_quantile(self, rng):
        y = rng.normal(size=(5, 21))
        theta = fit_linear_tau(y, TauDistribution.point(0.5), steps=4000, lr=0.01)
        est = theta[:, 0] + 0.5 * (theta[:, 1] - theta[:, 0])
        want = [sample_quantile(r, 0.5) for r in y]
        np.testing.assert_allclose(est, want, atol=0.03)


class TestUnconditional:
    def test_rows_per_estimator(self):
        res = unconditional_experiment(n=11, repeats=5, concentrations=(10, 1000), steps=20)
        rows = res.rows()
        assert [(r["estimator"], r["concentration"]) for r in rows] == [
            ("sample", None), ("harrell_davis", None), ("linear", 10.0), ("linear", 1000.0)]
        assert all(r["mse"] >= 0 and r["ci_half_width"] >= 0 for r in rows)

    def test_sample_column_is_recomputable(self):
        from qrlattice.data import sample_exponential
        res = unconditional_experiment(lam=2.0, n=15, tau=0.3, repeats=6, concentrations=(), seed=4)
        Y, q = sample_exponential(2.0, (6, 15), seed=4)
        np.testing.assert_array_equal(res.estimates["sample"], [sample_quantile(y, 0.3) for y in Y])
        np.testing.assert_array_equal(res.estimates["harrell_davis"], [harrell_davis(y, 0.3) for y in Y])
        assert res.truth == pytest.approx(q(0.3))

    def test_constant_distribution_is_exact(self):
        res = constant_experiment(2.5, n=9, tau=0.5, repeats=4, concentrations=(10, 10000), steps=50, lr=0.01)
        for label in res.estimates:
            assert res.mse(label) == pytest.approx(0.0, abs=1e-24)

    def test_bad_tau(self):
        with pytest.raises(ConfigError):
            unconditional_experiment(tau=1.0, repeats=3)


class TestConcentration:
    def test_shapes_and_determinism(self):
        s = SweepSettings(steps=20, eval_points=11)
        a = concentration_experiment(1.0, 1.0, 40, concentrations=(2, 100), repeats=2, settings=s)
        b = concentration_experiment(1.0, 1.0, 40, concentrations=(2, 100), repeats=2, settings=s)
        assert set(a) == {2.0, 100.0} and a[2.0].shape == (2,)
        assert all(np.array_equal(a[c], b[c]) for c in a)
        assert np.all(a[2.0] > 0)

    def test_epochs_follow_steps(self):
        s = SweepSettings(steps=400, batch_size=100)
        assert s.epochs(100) == 400 and s.epochs(1000) == 40 and s.epochs(50) == 400


class TestRates:
    def test_grouped_data(self):
        d = grouped_data(3000, 1)
        assert d.X.shape == (3000, 2)
        for g in GROUPS:
            assert 800 < d.mask("group", g).sum() < 1200
        resid = d.y - 2 * d.X[:, 0]
        right, left = resid[d.mask("group", "right")], resid[d.mask("group", "left")]
        assert np.mean(right) > np.median(right) and np.mean(left) < np.median(left)

    def test_specs(self):
        specs = rate_specs(eps=0.03)
        assert len(specs) == 6 and {s.tau for s in specs} == {0.5, 0.9}
        assert all(s.eps_minus == s.eps_plus == 0.03 for s in specs)

    def test_single_seed(self):
        run = rate_experiment(0, n_train=300, n_test=300, epochs=5, finetune_epochs=5)
        assert set(run.train_violation) == {"unconstrained", "constrained"}
        assert all(0 <= v <= 1 for v in run.test_violation.values())
