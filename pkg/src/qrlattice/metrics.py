"""Quantile-regression metrics and classical unconditional quantile estimators."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, InputError
from .train import DEFAULT_EVAL_TAUS, evaluate

# ---------------------------------------------------------------------------
# Model metrics
# ---------------------------------------------------------------------------


def _curves(model, X, taus) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, len(model.config.features))
    taus = np.asarray(taus, dtype=float).ravel()
    n, m = X.shape[0], taus.size
    return model.predict_batch(np.repeat(X, m, axis=0), np.tile(taus, n)).reshape(n, m)


def quantile_mse(model, oracle, X, taus=DEFAULT_EVAL_TAUS) -> float:
    """Mean over points and quantiles of ``(f(x, tau) - q_true(x, tau))**2``.

    ``oracle(X, taus)`` must return true quantiles of shape ``(len(X), len(taus))``.
    """
    pred = _curves(model, X, taus)
    return float(np.mean((pred - oracle(np.asarray(X, dtype=float), np.asarray(taus, dtype=float))) ** 2))


def crossing_rate_from_curves(curves) -> float:
    """Fraction of rows whose quantile curve strictly decreases somewhere."""
    curves = np.asarray(curves, dtype=float)
    return float(np.mean(np.any(np.diff(curves, axis=1) < 0, axis=1)))


def crossing_rate(model, X, taus=DEFAULT_EVAL_TAUS) -> float:
    """Fraction of points ``x`` at which at least two of the predicted quantiles cross."""
    taus = np.asarray(taus, dtype=float)
    if np.any(np.diff(taus) < 0):
        raise InputError("taus must be sorted")
    return crossing_rate_from_curves(_curves(model, X, taus))


def quantile_violations(model, dataset, specs) -> np.ndarray:
    """``|tau_s - rate_s|`` for each constraint spec evaluated on ``dataset``."""
    out = []
    for s in specs:
        rows = s.rows(dataset)
        pred = model.predict_batch(dataset.X[rows], np.full(rows.size, s.tau))
        out.append(abs(s.tau - float(np.mean(dataset.y[rows] <= pred))))
    return np.array(out)


def max_quantile_violation(model, dataset, specs) -> float:
    """Largest absolute gap between target quantile and empirical rate over the subsets."""
    if not specs:
        raise ConfigError("max_quantile_violation needs at least one subset")
    return float(np.max(quantile_violations(model, dataset, specs)))


# ---------------------------------------------------------------------------
# Unconditional estimators
# ---------------------------------------------------------------------------


def sample_quantile(samples, tau: float) -> float:
    """``inf {q : F_n(q) >= tau}``: the smallest order statistic ``y_(k)`` with ``k/n >= tau``."""
    y = np.sort(np.asarray(samples, dtype=float).ravel())
    n = y.size
    if n == 0:
        raise InputError("empty sample")
    k = max(1, math.ceil(n * tau))
    while k > 1 and (k - 1) / n >= tau:
        k -= 1
    while k < n and k / n < tau:
        k += 1
    return float(y[k - 1])


def _betacf(a: float, b: float, x: float, tol: float = 1e-15, max_iter: int = 10000) -> float:
    """Continued fraction of the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function ``I_x(a, b)``."""
    if a <= 0 or b <= 0:
        raise InputError("beta parameters must be positive")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def harrell_davis_weights(n: int, tau: float) -> np.ndarray:
    """Weights on the order statistics: ``I_{i/n}(a, b) - I_{(i-1)/n}(a, b)``."""
    if n < 1:
        raise InputError("empty sample")
    a, b = (n + 1) * tau, (n + 1) * (1.0 - tau)
    cdf = np.array([betainc_reg(a, b, i / n) for i in range(n + 1)])
    return np.diff(cdf)


def harrell_davis(samples, tau: float) -> float:
    """Harrell-Davis estimate: a Beta-weighted average of all order statistics."""
    y = np.sort(np.asarray(samples, dtype=float).ravel())
    if y.size == 0:
        raise InputError("empty sample")
    if not 0 < tau < 1:
        raise InputError("tau must lie in (0, 1)")
    return float(np.dot(harrell_davis_weights(y.size, tau), y))


def mean_ci(values):
    """Mean and 95% normal-approximation half-width ``1.96 * sd / sqrt(n)``."""
    v = np.asarray(values, dtype=float).ravel()
    if v.size < 2:
        raise InputError("need at least two values for a confidence interval")
    return float(v.mean()), float(1.96 * v.std(ddof=1) / math.sqrt(v.size))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    taus: list
    pinball_per_tau: list
    pinball_mean: float
    quantile_mse: Optional[float] = None
    crossing_rate: Optional[float] = None
    subset_rates: dict = field(default_factory=dict)
    max_quantile_violation: Optional[float] = None
    repeats: dict = field(default_factory=dict)  # metric -> [mean, half_width]

    def to_dict(self) -> dict:
        return {"format": "qrlattice.report", "version": 1, **self.__dict__}

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    def write_csv(self, path) -> None:
        """Long-format CSV: ``metric,key,value``."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "key", "value"])
            for t, v in zip(self.taus, self.pinball_per_tau):
                w.writerow(["pinball", t, repr(float(v))])
            w.writerow(["pinball_mean", "", repr(float(self.pinball_mean))])
            for name in ("quantile_mse", "crossing_rate", "max_quantile_violation"):
                val = getattr(self, name)
                if val is not None:
                    w.writerow([name, "", repr(float(val))])
            for key, val in sorted(self.subset_rates.items()):
                w.writerow(["subset_rate", key, repr(float(val))])


def build_report(model, dataset, taus=DEFAULT_EVAL_TAUS, specs=(), x_samples=None,
                 crossing_taus=DEFAULT_EVAL_TAUS) -> MetricReport:
    """Every metric that applies to ``dataset``.

    Quantile MSE needs ``dataset.oracle``; ``x_samples`` (default: the dataset's
    own features) are the points used for MSE and crossing checks.
    """
    per_tau, mean = evaluate(model, dataset, taus)
    X = dataset.X if x_samples is None else x_samples
    rep = MetricReport(list(map(float, taus)), per_tau.tolist(), mean)
    rep.crossing_rate = crossing_rate(model, X, crossing_taus)
    if getattr(dataset, "oracle", None) is not None:
        rep.quantile_mse = quantile_mse(model, dataset.oracle, X, crossing_taus)
    if specs:
        rep.subset_rates = {s.label: _rate(model, dataset, s) for s in specs}
        rep.max_quantile_violation = max_quantile_violation(model, dataset, specs)
    return rep


def _rate(model, dataset, spec) -> float:
    rows = spec.rows(dataset)
    pred = model.predict_batch(dataset.X[rows], np.full(rows.size, spec.tau))
    return float(np.mean(dataset.y[rows] <= pred))
