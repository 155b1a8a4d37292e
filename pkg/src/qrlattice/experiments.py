"""Desk-scale experiment drivers shared by the command line, demos and acceptance tests.

* :func:`unconditional_experiment` compares the sample quantile, Harrell-Davis
  and a linear-in-tau model trained with Beta-mode quantile sampling on
  repeated exponential samples.
* :func:`concentration_experiment` trains sine-skew models under different
  Beta concentrations and reports the error of the learned median.
* :func:`rate_experiment` trains the same grouped-data model with and without
  per-group rate constraints.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from .data import ColumnSpec, Dataset, Schema, SimSpec, generate_sim, sample_exponential
from .errors import ConfigError
from .loss import TauDistribution, pinball_subgrad_yhat, sample_tau
from .metrics import harrell_davis, max_quantile_violation, mean_ci, quantile_mse, sample_quantile
from .model import FeatureSpec, ModelConfig, init_model
from .rates import RateConstraintSpec
from .train import AdamState, TrainConfig, adam_step, fit

# ---------------------------------------------------------------------------
# Unconditional quantile estimation
# ---------------------------------------------------------------------------


def fit_linear_tau(Y, dist: TauDistribution, steps: int = 3000, lr: float = 0.005, seed: int = 0):
    """Fit ``f(tau) = theta_0 + tau * (theta_1 - theta_0)`` to each row of ``Y`` at once.

    This is a two-knot tau lattice with an identity tau calibrator: each step
    draws one tau per sample from ``dist``, takes an Adam step on the mean
    pinball loss of the whole row and projects onto ``theta_0 <= theta_1``
    (averaging an inverted pair, the exact projection).  Rows are independent
    problems sharing the random draws' generator.  Starts from
    ``(min(row), max(row))``.

    Returns ``theta`` of shape ``(rows, 2)``.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    R, N = Y.shape
    rng = np.random.default_rng(seed)
    theta = np.stack([Y.min(axis=1), Y.max(axis=1)], axis=1)
    state = AdamState.create(theta.shape, lr=lr)
    for _ in range(steps):
        T = sample_tau(dist, rng, size=(R, N))
        pred = theta[:, :1] + T * (theta[:, 1:] - theta[:, :1])
        g = pinball_subgrad_yhat(Y, pred, T) / N
        grad = np.stack([np.sum(g * (1.0 - T), axis=1), np.sum(g * T, axis=1)], axis=1)
        theta, state = adam_step(theta, grad, state)
        bad = theta[:, 0] > theta[:, 1]
        if np.any(bad):
            theta[bad] = theta[bad].mean(axis=1, keepdims=True)
    return theta


@dataclass
class UqeResult:
    truth: float
    estimates: Dict[str, np.ndarray]  # estimator label -> per-repeat estimates

    def rows(self) -> List[dict]:
        """One summary row per estimator: MSE against the truth with a 95% interval."""
        out = []
        for label, est in self.estimates.items():
            sq = (est - self.truth) ** 2
            m, h = mean_ci(sq)
            name, _, c = label.partition("@")
            out.append({"estimator": name, "concentration": float(c) if c else None,
                        "mse": m, "ci_half_width": h, "repeats": int(est.size)})
        return out

    def mse(self, label: str) -> float:
        return float(np.mean((self.estimates[label] - self.truth) ** 2))


def unconditional_experiment(lam: float = 1.0, n: int = 51, tau: float = 0.5, repeats: int = 1000,
                             concentrations: Sequence[float] = (10, 30, 100, 300, 1000, 10000),
                             steps: int = 3000, lr: float = 0.005, seed: int = 0) -> UqeResult:
    """Quantile estimates on ``repeats`` independent exponential samples of size ``n``.

    Estimator labels are ``"sample"``, ``"harrell_davis"`` and ``"linear@C"``
    for each Beta concentration ``C``.
    """
    if not 0 < tau < 1:
        raise ConfigError("tau must lie in (0, 1)")
    if repeats < 2 or n < 1:
        raise ConfigError("need at least two repeats of at least one sample")
    Y, quantile = sample_exponential(lam, (repeats, n), seed=seed)
    est = {"sample": np.array([sample_quantile(y, tau) for y in Y]),
           "harrell_davis": np.array([harrell_davis(y, tau) for y in Y])}
    for c in concentrations:
        theta = fit_linear_tau(Y, TauDistribution.beta_mode(tau, c), steps, lr, seed + 1)
        est[f"linear@{c:g}"] = theta[:, 0] + tau * (theta[:, 1] - theta[:, 0])
    return UqeResult(float(quantile(tau)), est)


def constant_experiment(value: float, n: int, tau: float, repeats: int, concentrations,
                        steps: int, lr: float) -> UqeResult:
    """Degenerate case: every sample equals ``value``, so every estimator is exact."""
    Y = np.full((repeats, n), float(value))
    est = {"sample": np.array([sample_quantile(y, tau) for y in Y]),
           "harrell_davis": np.array([harrell_davis(y, tau) for y in Y])}
    for c in concentrations:
        theta = fit_linear_tau(Y, TauDistribution.beta_mode(tau, c), steps, lr)
        est[f"linear@{c:g}"] = theta[:, 0] + tau * (theta[:, 1] - theta[:, 0])
    return UqeResult(float(value), est)


# ---------------------------------------------------------------------------
# Beta concentration on simulated conditional quantiles
# ---------------------------------------------------------------------------


@dataclass
class SweepSettings:
    """Model and optimizer settings for the sine-skew concentration sweep.

    Training runs ``steps`` minibatch updates whatever the sample size, so
    ``epochs = steps * batch_size / n``.  The linear x calibrator feeding a
    dense lattice fits the sine without a kinked calibrator, and the linear
    tau calibrator makes every quantile curve an interpolation between two
    lattice outputs.
    """

    steps: int = 400
    batch_size: int = 100
    learning_rate: float = 0.02
    keypoints: int = 2
    lattice_knots: int = 12
    tau_calibrator_keypoints: int = 2
    n_val: int = None  # defaults to the training size
    eval_points: int = 201

    def epochs(self, n: int) -> int:
        return max(1, round(self.steps * min(self.batch_size, n) / n))


def _sine_model(train: Dataset, s: SweepSettings, seed: int):
    lo, hi = np.quantile(train.y, [0.01, 0.99])
    cfg = ModelConfig([FeatureSpec("x", bounds=(-1.0, 1.0), keypoints=s.keypoints,
                                   lattice_knots=s.lattice_knots)],
                      tau_knots=2, tau_calibrator_keypoints=s.tau_calibrator_keypoints,
                      output_range=(float(lo), float(hi)))
    return init_model(cfg, seed)


def concentration_experiment(a: float, b: float, n: int, concentrations=(2, 10000), repeats: int = 100,
                             settings: SweepSettings = None, seed: int = 0) -> Dict[float, np.ndarray]:
    """Median MSE of sine-skew models trained with ``BetaMode(0.5, C)``.

    Repeat ``r`` draws fresh training and validation sets; every concentration
    sees the same data and initial model.  The best epoch is picked by
    validation pinball at tau = 0.5, and the median error is averaged over an
    even grid of ``x`` on ``[-1, 1]``.

    Returns ``{C: per-repeat median MSE}``.
    """
    s = settings or SweepSettings()
    xs = np.linspace(-1.0, 1.0, s.eval_points)[:, None]
    out = {float(c): np.empty(repeats) for c in concentrations}
    for r in range(repeats):
        base = seed * 100_003 + r
        train = generate_sim(SimSpec("sine-skew", n, seed=2 * base, a=a, b=b))
        val = generate_sim(SimSpec("sine-skew", s.n_val or n, seed=2 * base + 1, a=a, b=b))
        start = _sine_model(train, s, base)
        for c in concentrations:
            cfg = TrainConfig(epochs=s.epochs(n), batch_size=s.batch_size, seed=base,
                              tau_dist=TauDistribution.beta_mode(0.5, c),
                              learning_rate=s.learning_rate, eval_taus=(0.5,))
            model, _ = fit(start, train, val, cfg)
            out[float(c)][r] = quantile_mse(model, train.oracle, xs, [0.5])
    return out


# ---------------------------------------------------------------------------
# Rate constraints on grouped data
# ---------------------------------------------------------------------------

GROUPS = ("narrow", "right", "left")


def grouped_data(n: int, seed: int) -> Dataset:
    """Three equally likely groups sharing a linear trend but not their noise.

    ``narrow`` has small symmetric noise, ``right`` a long right tail and
    ``left`` a long left tail, so one shared quantile curve shape cannot be
    calibrated for every group at once.
    """
    rng = np.random.default_rng(seed)
    g = rng.integers(0, 3, n)
    x = rng.uniform(0.0, 1.0, n)
    z = rng.standard_normal(n)
    e = rng.exponential(1.0, n) - 1.0
    noise = np.select([g == 0, g == 1, g == 2], [0.3 * z, 1.5 * e, -1.5 * e])
    y = 2.0 * x + noise
    schema = Schema([ColumnSpec("x"), ColumnSpec("group", "categorical", list(GROUPS))])
    return Dataset(np.column_stack([x, g.astype(float)]), y, schema)


def grouped_model(train: Dataset, seed: int):
    lo, hi = np.quantile(train.y, [0.01, 0.99])
    cfg = ModelConfig([FeatureSpec("x", bounds=(0.0, 1.0), keypoints=5),
                       FeatureSpec("group", kind="categorical", categories=list(GROUPS))],
                      ensemble=[["x"], ["group"]], tau_knots=2, tau_calibrator_keypoints=2,
                      output_range=(float(lo), float(hi)))
    return init_model(cfg, seed)


@dataclass
class RateRun:
    seed: int
    train_violation: Dict[str, float] = field(default_factory=dict)  # "constrained"/"unconstrained"
    test_violation: Dict[str, float] = field(default_factory=dict)


def rate_specs(taus=(0.5, 0.9), eps: float = 0.02) -> List[RateConstraintSpec]:
    return [RateConstraintSpec(t, eps, eps, "group", g) for g in GROUPS for t in taus]


def rate_experiment(seed: int, n_train: int = 600, n_test: int = 3000, eps: float = 0.02,
                    epochs: int = 60, batch_size: int = 64, learning_rate: float = 0.05,
                    finetune_epochs: int = 100, finetune_learning_rate: float = 0.01,
                    multiplier_lr: float = 0.01, temperature: float = 0.3) -> RateRun:
    """Max quantile violation of unconstrained and constrained training on the same data.

    The unconstrained model is trained first and the constrained one
    continues from it.  Small model and multiplier steps plus a sigmoid
    temperature wide enough to see a whole group keep the descent-ascent
    dynamics from swinging entire groups across their labels; the best
    iterate then absorbs the remaining oscillation.
    """
    train = grouped_data(n_train, 2 * seed)
    test = grouped_data(n_test, 2 * seed + 1)
    specs = rate_specs(eps=eps)
    run = RateRun(seed)
    base = TrainConfig(epochs=epochs, batch_size=batch_size, seed=seed, learning_rate=learning_rate,
                       eval_taus=(0.5, 0.9))
    free, _ = fit(grouped_model(train, seed), train, None, base)
    tuned = TrainConfig(epochs=finetune_epochs, batch_size=batch_size, seed=seed + 1,
                        learning_rate=finetune_learning_rate, constraints=specs,
                        multiplier_lr=multiplier_lr, temperature=temperature, eval_taus=(0.5, 0.9))
    constrained, _ = fit(free, train, None, tuned)
    for label, model in (("unconstrained", free), ("constrained", constrained)):
        run.train_violation[label] = max_quantile_violation(model, train, specs)
        run.test_violation[label] = max_quantile_violation(model, test, specs)
    return run
