"""Pinball loss, quantile sampling distributions and the expected pinball training loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, InputError

TAU_CLIP = 1e-4


def pinball(y, yhat, tau):
    """Pinball loss ``max(tau * (y - yhat), (tau - 1) * (y - yhat))``.

    Works elementwise on arrays.  ``tau`` must lie strictly inside (0, 1).
    """
    tau_arr = np.asarray(tau, dtype=float)
    if np.any((tau_arr <= 0) | (tau_arr >= 1)):
        raise InputError("tau must lie in the open interval (0, 1)")
    r = np.asarray(y, dtype=float) - np.asarray(yhat, dtype=float)
    out = np.maximum(tau_arr * r, (tau_arr - 1.0) * r)
    return float(out) if out.ndim == 0 else out


def pinball_subgrad_yhat(y, yhat, tau):
    """Subgradient of the pinball loss in ``yhat``; zero is chosen at ``y == yhat``."""
    r = np.asarray(y, dtype=float) - np.asarray(yhat, dtype=float)
    tau = np.asarray(tau, dtype=float)
    out = np.where(r > 0, -tau, np.where(r < 0, 1.0 - tau, 0.0))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class TauDistribution:
    """Sampling law of the quantile level used for the expected pinball loss.

    Build instances with the ``uniform``, ``discrete``, ``beta_mode`` and
    ``point`` constructors.  ``beta_mode(mode, C)`` is the Beta law with
    ``alpha = mode * (C - 2) + 1`` and ``beta = (1 - mode) * (C - 2) + 1``, so
    its mode is ``mode``, ``alpha + beta = C`` and ``C = 2`` is uniform.
    """

    kind: str
    taus: tuple = ()
    probs: tuple = ()
    mode: float = 0.5
    concentration: float = 2.0

    @classmethod
    def uniform(cls):
        return cls("uniform")

    @classmethod
    def point(cls, tau: float):
        if not 0 < tau < 1:
            raise ConfigError("point tau must lie in (0, 1)")
        return cls("point", taus=(float(tau),), probs=(1.0,))

    @classmethod
    def discrete(cls, taus: Sequence[float], probs: Optional[Sequence[float]] = None):
        taus = tuple(float(t) for t in taus)
        if not taus or any(not 0 < t < 1 for t in taus):
            raise ConfigError("discrete taus must be a nonempty list inside (0, 1)")
        if probs is None:
            probs = (1.0 / len(taus),) * len(taus)
        probs = tuple(float(p) for p in probs)
        if len(probs) != len(taus) or any(p < 0 for p in probs) or abs(sum(probs) - 1) > 1e-9:
            raise ConfigError("discrete probabilities must be nonnegative and sum to 1")
        return cls("discrete", taus=taus, probs=probs)

    @classmethod
    def beta_mode(cls, mode: float, concentration: float):
        if not 0 < mode < 1:
            raise ConfigError("beta mode must lie in (0, 1)")
        if concentration < 2:
            raise ConfigError("beta concentration must be at least 2")
        return cls("beta", mode=float(mode), concentration=float(concentration))

    @property
    def alpha(self) -> float:
        return self.mode * (self.concentration - 2.0) + 1.0

    @property
    def beta(self) -> float:
        return (1.0 - self.mode) * (self.concentration - 2.0) + 1.0

    def to_dict(self) -> dict:
        if self.kind == "uniform":
            return {"kind": "uniform"}
        if self.kind == "beta":
            return {"kind": "beta", "mode": self.mode, "concentration": self.concentration}
        if self.kind == "point":
            return {"kind": "point", "tau": self.taus[0]}
        return {"kind": "discrete", "taus": list(self.taus), "probs": list(self.probs)}

    @classmethod
    def from_dict(cls, d: dict) -> "TauDistribution":
        kind = d.get("kind")
        if kind == "uniform":
            return cls.uniform()
        if kind == "beta":
            return cls.beta_mode(d["mode"], d["concentration"])
        if kind == "point":
            return cls.point(d["tau"])
        if kind == "discrete":
            return cls.discrete(d["taus"], d.get("probs"))
        raise ConfigError(f"unknown tau distribution kind {kind!r}")


def sample_tau(dist: TauDistribution, rng: np.random.Generator, size=None):
    """Draw quantile levels from ``dist``, clipped to ``[1e-4, 1 - 1e-4]``."""
    if dist.kind == "uniform":
        t = rng.random(size)
    elif dist.kind == "beta":
        t = rng.beta(dist.alpha, dist.beta, size)
    elif dist.kind == "point":
        t = np.full(() if size is None else size, dist.taus[0])
    elif dist.kind == "discrete":
        t = rng.choice(np.asarray(dist.taus), size=size, p=np.asarray(dist.probs))
    else:
        raise ConfigError(f"unknown tau distribution kind {dist.kind!r}")
    t = np.clip(t, TAU_CLIP, 1.0 - TAU_CLIP)
    return float(t) if np.ndim(t) == 0 else t


def expected_pinball_batch(model, X, y, dist: TauDistribution, rng: np.random.Generator,
                           taus=None):
    """Mean pinball loss of a batch at freshly drawn quantile levels, with its gradient.

    One tau is drawn per example per call.  Passing ``taus`` freezes the draws
    (used by gradient checks).

    Returns
    -------
    loss : float
    grad : ndarray
        Gradient with respect to ``model.get_params()``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if y.size == 0:
        raise InputError("empty batch")
    if taus is None:
        taus = sample_tau(dist, rng, size=y.size)
    taus = np.asarray(taus, dtype=float)
    pred, cache = model.forward(X, taus)
    loss = float(np.mean(pinball(y, pred, taus)))
    upstream = pinball_subgrad_yhat(y, pred, taus) / y.size
    return loss, model.backward(cache, upstream)
