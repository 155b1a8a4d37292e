"""Adam, the projected stochastic training loop and pinball evaluation."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np

from .errors import ConfigError, InputError, NumericalError
from .loss import TauDistribution, expected_pinball_batch, pinball
from .model import QuantileModel, project_model
from .rates import ConstraintSet, MultiplierState, RateConstraintSpec, best_iterate, lagrangian_step

logger = logging.getLogger(__name__)

DEFAULT_EVAL_TAUS = tuple(np.round(np.arange(1, 100) / 100.0, 2))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7

    @classmethod
    def create(cls, shape, lr: float = 0.001, **kw) -> "AdamState":
        return cls(np.zeros(shape), np.zeros(shape), 0, lr, **kw)


def adam_step(params, grad, state: AdamState):
    """Bias-corrected Adam update; works elementwise on arrays of any shape.

    Returns new ``(params, state)``; the inputs are not modified.
    """
    grad = np.asarray(grad, dtype=float)
    if grad.shape != np.shape(params) or grad.shape != state.m.shape:
        raise InputError("parameter, gradient and moment shapes differ")
    if not np.all(np.isfinite(grad)):
        raise NumericalError("non-finite gradient")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, replace(state, m=m, v=v, step=t)


@dataclass
class TrainConfig:
    """Optimization settings.

    ``eval_taus`` are the quantiles whose mean validation pinball loss picks the
    best epoch of unconstrained runs.
    """

    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    tau_dist: TauDistribution = field(default_factory=TauDistribution.uniform)
    learning_rate: float = 0.001
    constraints: List[RateConstraintSpec] = field(default_factory=list)
    multiplier_lr: float = 0.01
    temperature: Optional[float] = None
    projection_tol: float = 1e-9
    eval_taus: tuple = DEFAULT_EVAL_TAUS

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be at least 1")
        if self.learning_rate <= 0 or self.multiplier_lr < 0:
            raise ConfigError("learning rates must be positive")
        if isinstance(self.tau_dist, dict):
            self.tau_dist = TauDistribution.from_dict(self.tau_dist)
        self.constraints = [c if isinstance(c, RateConstraintSpec) else RateConstraintSpec.from_dict(c)
                            for c in self.constraints]
        self.eval_taus = tuple(float(t) for t in self.eval_taus)
        if not self.eval_taus or any(not 0 < t < 1 for t in self.eval_taus):
            raise ConfigError("eval_taus must be a nonempty list inside (0, 1)")

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "batch_size": self.batch_size, "seed": self.seed,
                "tau_dist": self.tau_dist.to_dict(), "learning_rate": self.learning_rate,
                "constraints": [c.to_dict() for c in self.constraints],
                "multiplier_lr": self.multiplier_lr, "temperature": self.temperature,
                "projection_tol": self.projection_tol, "eval_taus": list(self.eval_taus)}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def evaluate(model: QuantileModel, data, taus=DEFAULT_EVAL_TAUS):
    """Mean pinball loss per quantile and overall.

    Returns ``(per_tau, mean)`` with ``per_tau[i]`` the average over ``data`` at
    ``taus[i]``.
    """
    X, y = _xy(data)
    if y.size == 0:
        raise InputError("cannot evaluate on empty data")
    taus = np.asarray(taus, dtype=float).ravel()
    per_tau = np.empty(taus.size)
    for i, t in enumerate(taus):
        per_tau[i] = np.mean(pinball(y, model.predict_batch(X, np.full(y.size, t)), t))
    return per_tau, float(per_tau.mean())


def _xy(data):
    if hasattr(data, "X"):
        return data.X, data.y
    X, y = data
    return np.asarray(X, dtype=float), np.asarray(y, dtype=float)


@dataclass
class History:
    """Per-epoch training record plus parameter snapshots (snapshot id = epoch)."""

    rows: list = field(default_factory=list)
    snapshots: dict = field(default_factory=dict)
    best_epoch: Optional[int] = None
    constrained: bool = False
    error: Optional[str] = None  # set when training stopped on a numerical failure

    def to_csv(self, path) -> None:
        cols = ["epoch", "loss", "val_metric"] + (["max_violation"] if self.constrained else [])
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in self.rows:
                w.writerow([r["epoch"]] + [repr(float(r[c])) for c in cols[1:]])


def fit(model: QuantileModel, train_data, val_data=None, config: Optional[TrainConfig] = None,
        constraint_data=None):
    """Projected stochastic training of ``model`` (not modified in place).

    Every step draws a shuffled minibatch, computes the expected pinball gradient
    (plus proxy-Lagrangian terms when ``config.constraints`` is set), takes an
    Adam step and projects onto the model's monotonicity constraints.  Each
    epoch logs the validation metric and, for constrained runs, the max true
    violation on ``constraint_data`` (default: the training set).

    Returns ``(best_model, history)``: the best-validation epoch for
    unconstrained runs, otherwise the best iterate by violation then objective.
    """
    config = config or TrainConfig()
    X, y = _xy(train_data)
    n = y.size
    if n == 0:
        raise InputError("empty training set")
    val = val_data if val_data is not None else train_data
    rng = np.random.default_rng(config.seed)
    model = project_model(model, config.projection_tol)
    adam = AdamState.create(model.n_params, lr=config.learning_rate)
    history = History(constrained=bool(config.constraints))

    cons = state = None
    if config.constraints:
        cons = ConstraintSet(config.constraints, constraint_data if constraint_data is not None else train_data,
                             config.temperature)
        state = MultiplierState.create(len(cons), config.multiplier_lr)

    last_good = model.copy()
    try:
        for epoch in range(1, config.epochs + 1):
            perm = rng.permutation(n)
            losses = []
            for start in range(0, n, config.batch_size):
                rows = perm[start:start + config.batch_size]
                if cons is None:
                    loss, grad = expected_pinball_batch(model, X[rows], y[rows], config.tau_dist, rng)
                    if not np.isfinite(loss):
                        raise NumericalError("training loss is not finite")
                    params, adam = adam_step(model.get_params(), grad, adam)
                    model.set_params(params)
                    model = project_model(model, config.projection_tol)
                else:
                    model, state, adam, loss = lagrangian_step(
                        model, (X[rows], y[rows]), config.tau_dist, cons, state, adam, rng,
                        config.projection_tol)
                losses.append(loss * rows.size)
            row = {"epoch": epoch, "loss": float(np.sum(losses) / n),
                   "val_metric": evaluate(model, val, config.eval_taus)[1]}
            if cons is not None:
                row["max_violation"] = cons.max_violation(model)
                state.log.append((epoch, row["val_metric"], row["max_violation"]))
            history.rows.append(row)
            history.snapshots[epoch] = model.get_params()
            last_good = model.copy()
            logger.debug("epoch %d: %s", epoch, row)
    except NumericalError as exc:
        logger.error("training aborted (%s); returning last good snapshot", exc)
        if not history.rows:
            raise
        history.error = str(exc)
        history.best_epoch = history.rows[-1]["epoch"]
        return last_good, history

    if cons is not None:
        history.best_epoch = best_iterate(state)
    else:
        history.best_epoch = min(history.rows, key=lambda r: r["val_metric"])["epoch"]
    best = model.copy()
    best.set_params(history.snapshots[history.best_epoch])
    return best, history
