"""Rate constraints on the empirical quantile property of data subsets.

A constraint asks that, on a subset ``D_s``, the fraction of labels at or below
the ``tau_s`` prediction lies in ``[tau_s - eps_minus, tau_s + eps_plus]``.
Training uses a proxy-Lagrangian scheme: the model descends on the loss plus
multiplier-weighted sigmoid surrogates of the rates, and the multipliers ascend
on the true (indicator) constraint values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.special import expit

from .errors import ConfigError, InputError, NumericalError
from .loss import expected_pinball_batch
from .model import project_model


@dataclass(frozen=True)
class RateConstraintSpec:
    """Subset selector (``column == value``, or everything), target quantile and slacks."""

    tau: float
    eps_minus: float = 0.0
    eps_plus: float = 0.0
    column: Optional[str] = None
    value: Optional[str] = None

    def __post_init__(self):
        if not 0 < self.tau < 1:
            raise ConfigError("constraint tau must lie in (0, 1)")
        if not (0 <= self.eps_minus <= 1 and 0 <= self.eps_plus <= 1):
            raise ConfigError("constraint slacks must lie in [0, 1]")

    @property
    def label(self) -> str:
        sel = "all" if self.column in (None, "all") else f"{self.column}={self.value}"
        return f"{sel}@{self.tau:g}"

    def rows(self, dataset) -> np.ndarray:
        idx = np.flatnonzero(dataset.mask(self.column, self.value))
        if idx.size == 0:
            raise ConfigError(f"constraint {self.label} selects no rows")
        return idx

    @classmethod
    def from_dict(cls, d: dict) -> "RateConstraintSpec":
        eps = d.get("eps")
        return cls(tau=d["tau"], eps_minus=d.get("eps_minus", eps or 0.0),
                   eps_plus=d.get("eps_plus", eps or 0.0), column=d.get("column"),
                   value=None if d.get("value") is None else str(d["value"]))

    def to_dict(self) -> dict:
        return {"tau": self.tau, "eps_minus": self.eps_minus, "eps_plus": self.eps_plus,
                "column": self.column, "value": self.value}


@dataclass
class MultiplierState:
    """Two nonnegative multipliers per constraint (lower, upper) plus the iterate log.

    Log entries are ``(snapshot_id, objective, max_violation)``.
    """

    lower: np.ndarray
    upper: np.ndarray
    lr: float = 0.01
    log: List[tuple] = field(default_factory=list)

    @classmethod
    def create(cls, n_constraints: int, lr: float = 0.01) -> "MultiplierState":
        return cls(np.zeros(n_constraints), np.zeros(n_constraints), lr)


def empirical_rate(model, X, y, tau: float) -> float:
    """Fraction of labels ``y_j <= f(x_j, tau)``."""
    y = np.asarray(y, dtype=float)
    if y.size == 0:
        raise ConfigError("empirical rate of an empty subset")
    pred = model.predict_batch(X, np.full(y.size, tau))
    return float(np.mean(y <= pred))


def violation(spec: RateConstraintSpec, rate: float):
    """``(lower_violation, upper_violation)``, both zero inside the slack band."""
    return (max(0.0, (spec.tau - spec.eps_minus) - rate),
            max(0.0, rate - (spec.tau + spec.eps_plus)))


def signed_constraints(spec: RateConstraintSpec, rate: float):
    """Lower and upper constraint functions; nonpositive means satisfied."""
    return (spec.tau - spec.eps_minus) - rate, rate - (spec.tau + spec.eps_plus)


def surrogate_rate(model, X, y, tau: float, temperature: float) -> float:
    if temperature <= 0:
        raise InputError("temperature must be positive")
    y = np.asarray(y, dtype=float)
    pred = model.predict_batch(X, np.full(y.size, tau))
    return float(np.mean(expit((pred - y) / temperature)))


def surrogate_rate_grad(model, X, y, tau: float, temperature: float):
    """Sigmoid-smoothed rate and its parameter gradient.

    The indicator ``y <= f`` is replaced by ``sigmoid((f - y) / temperature)``.
    Returns ``(rate, grad_increase, grad_decrease)``: the gradient of the
    smoothed rate and its negation, i.e. the ascent directions that raise or
    lower the rate.
    """
    if temperature <= 0:
        raise InputError("temperature must be positive")
    y = np.asarray(y, dtype=float)
    pred, cache = model.forward(X, np.full(y.size, tau))
    s = expit((pred - y) / temperature)
    grad = model.backward(cache, s * (1.0 - s) / (temperature * y.size))
    return float(np.mean(s)), grad, -grad


class ConstraintSet:
    """Constraint specs resolved against a fixed constraint dataset."""

    def __init__(self, specs: Sequence[RateConstraintSpec], dataset, temperature: Optional[float] = None):
        self.specs = list(specs)
        self.dataset = dataset
        self.rows = [s.rows(dataset) for s in self.specs]
        if temperature is None:
            temperature = 0.05 * float(np.std(dataset.y)) or 0.05
        self.temperature = float(temperature)
        self.taus = sorted({s.tau for s in self.specs})

    def __len__(self):
        return len(self.specs)

    def _predictions(self, model):
        X = self.dataset.X
        return {t: model.forward(X, np.full(X.shape[0], t)) for t in self.taus}

    def rates(self, model) -> np.ndarray:
        y = self.dataset.y
        out = np.empty(len(self.specs))
        preds = {t: model.predict_batch(self.dataset.X, np.full(y.size, t)) for t in self.taus}
        for i, (spec, rows) in enumerate(zip(self.specs, self.rows)):
            out[i] = np.mean(y[rows] <= preds[spec.tau][rows])
        return out

    def max_violation(self, model) -> float:
        r = self.rates(model)
        return float(max(max(violation(s, ri)) for s, ri in zip(self.specs, r)))

    def evaluate(self, model):
        """True rates plus the gradient of ``sum_i coef_i * surrogate_rate_i`` factory.

        Returns ``(rates, backprop)`` where ``backprop(coefs)`` gives the
        parameter gradient of the coefficient-weighted sum of surrogate rates,
        sharing one forward pass per distinct tau.
        """
        y = self.dataset.y
        fw = self._predictions(model)
        rates = np.empty(len(self.specs))
        for i, (spec, rows) in enumerate(zip(self.specs, self.rows)):
            rates[i] = np.mean(y[rows] <= fw[spec.tau][0][rows])

        def backprop(coefs):
            grad = np.zeros(model.n_params)
            for t in self.taus:
                pred, cache = fw[t]
                up = np.zeros(y.size)
                for c, spec, rows in zip(coefs, self.specs, self.rows):
                    if spec.tau != t or c == 0:
                        continue
                    s = expit((pred[rows] - y[rows]) / self.temperature)
                    up[rows] += c * s * (1.0 - s) / (self.temperature * rows.size)
                if np.any(up):
                    grad += model.backward(cache, up)
            return grad

        return rates, backprop


def lagrangian_step(model, batch, loss_dist, constraints: ConstraintSet, state: MultiplierState,
                    adam, rng, projection_tol: float = 1e-9):
    """One projected descent step for the model and one ascent step for the multipliers.

    The model minimizes ``loss + sum lam_lower * (tau - eps_minus - r~)
    + sum lam_upper * (r~ - tau - eps_plus)`` with ``r~`` the surrogate rates;
    the multipliers move by ``lr`` times the true signed constraint values and
    are clipped at zero.

    Returns ``(model, state, adam, loss)``.
    """
    from .train import adam_step

    X, y = batch
    loss, grad = expected_pinball_batch(model, X, y, loss_dist, rng)
    if not np.isfinite(loss):
        raise NumericalError("training loss is not finite")
    rates, backprop = constraints.evaluate(model)
    coefs = state.upper - state.lower
    if np.any(coefs != 0):
        grad = grad + backprop(coefs)
    params, adam = adam_step(model.get_params(), grad, adam)
    model.set_params(params)
    model = project_model(model, projection_tol)

    lower_g = np.array([signed_constraints(s, r)[0] for s, r in zip(constraints.specs, rates)])
    upper_g = np.array([signed_constraints(s, r)[1] for s, r in zip(constraints.specs, rates)])
    state.lower = np.maximum(0.0, state.lower + state.lr * lower_g)
    state.upper = np.maximum(0.0, state.upper + state.lr * upper_g)
    return model, state, adam, loss


def best_iterate(state_or_log, tolerance: Optional[float] = None):
    """Snapshot id of the best logged iterate.

    Among iterates whose max violation is within ``tolerance`` (default: the
    smallest violation seen plus 0.005) the lowest objective wins.
    """
    log = state_or_log.log if isinstance(state_or_log, MultiplierState) else list(state_or_log)
    if not log:
        raise ConfigError("best_iterate needs at least one logged iterate")
    viols = np.array([e[2] for e in log], dtype=float)
    if tolerance is None:
        tolerance = float(viols.min()) + 0.005
    feasible = [e for e in log if e[2] <= tolerance]
    if feasible:
        return min(feasible, key=lambda e: e[1])[0]
    return min(log, key=lambda e: e[2])[0]
