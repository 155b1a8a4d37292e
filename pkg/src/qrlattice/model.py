"""Calibrated lattice ensembles with the quantile level as a monotone input.

A :class:`QuantileModel` computes::

    f(x, tau) = bias + sum_k w_k * lattice_k(u_{S_k}(x), c(tau))

where ``u_j`` are per-feature calibrators into ``[0, 1]``, ``c`` is the tau
calibrator with ``c(0) = 0`` and ``c(1) = 1``, ``S_k`` is the feature subset of
ensemble member ``k`` and the tau coordinate is always the last lattice
dimension.  With ``non_crossing`` every lattice is nondecreasing in tau, ``c``
is nondecreasing and the weights are nonnegative, so ``f`` is nondecreasing in
tau for every ``x``.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import lattice as lt
from .errors import ConfigError, InputError

FORMAT_NAME = "qrlattice.model"
FORMAT_VERSION = 1


@dataclass
class FeatureSpec:
    """One model input.

    ``lattice_knots`` defaults to 2 for continuous features and to the number
    of categories for categorical ones.
    """

    name: str
    kind: str = "continuous"
    bounds: Optional[tuple] = None
    categories: Optional[list] = None
    monotone: bool = False
    keypoints: int = 10
    lattice_knots: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ("continuous", "categorical"):
            raise ConfigError(f"feature {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == "continuous":
            if self.bounds is None or len(self.bounds) != 2:
                raise ConfigError(f"feature {self.name!r}: continuous features need bounds")
            lo, hi = (float(b) for b in self.bounds)
            if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
                raise ConfigError(f"feature {self.name!r}: bounds must be finite with low < high")
            self.bounds = (lo, hi)
            if self.keypoints < 2:
                raise ConfigError(f"feature {self.name!r}: need at least 2 calibrator keypoints")
        else:
            if not self.categories:
                raise ConfigError(f"feature {self.name!r}: categorical features need categories")
            if self.monotone:
                raise ConfigError(f"feature {self.name!r}: categorical features cannot be monotone")
            self.categories = [str(c) for c in self.categories]
        if self.lattice_knots is None:
            self.lattice_knots = 2 if self.kind == "continuous" else max(2, len(self.categories))
        if self.lattice_knots < 2:
            raise ConfigError(f"feature {self.name!r}: need at least 2 lattice knots")


@dataclass
class ModelConfig:
    """Architecture of a :class:`QuantileModel`.

    ``ensemble`` lists the feature names of each lattice (tau is appended to
    every lattice); ``None`` means a single lattice over all features.
    ``lattice_knots`` optionally overrides per-lattice knot counts, one list
    per ensemble member in subset order.  ``output_range`` sets the initial
    tau ramp, usually the label range.
    """

    features: List[FeatureSpec] = field(default_factory=list)
    tau_knots: int = 2
    tau_calibrator_keypoints: int = 5
    ensemble: Optional[list] = None
    lattice_knots: Optional[list] = None
    non_crossing: bool = True
    output_range: tuple = (0.0, 1.0)
    init_noise: float = 0.01

    def __post_init__(self):
        self.features = [f if isinstance(f, FeatureSpec) else FeatureSpec(**f) for f in self.features]
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate feature names")
        if self.tau_knots < 2 or self.tau_calibrator_keypoints < 2:
            raise ConfigError("tau_knots and tau_calibrator_keypoints must be at least 2")
        if self.ensemble is None:
            self.ensemble = [list(names)]
        self.ensemble = [list(s) for s in self.ensemble]
        if not self.ensemble:
            raise ConfigError("ensemble must contain at least one lattice")
        for subset in self.ensemble:
            unknown = set(subset) - set(names)
            if unknown:
                raise ConfigError(f"ensemble refers to unknown features {sorted(unknown)}")
            if len(set(subset)) != len(subset):
                raise ConfigError("a lattice lists the same feature twice")
        used = {n for s in self.ensemble for n in s}
        for f in self.features:
            if f.monotone and f.name not in used:
                raise ConfigError(f"monotone feature {f.name!r} appears in no lattice")
        if self.lattice_knots is not None:
            if len(self.lattice_knots) != len(self.ensemble) or any(
                    len(k) != len(s) for k, s in zip(self.lattice_knots, self.ensemble)):
                raise ConfigError("lattice_knots must give one count per feature of each lattice")
            if any(int(k) < 2 for ks in self.lattice_knots for k in ks):
                raise ConfigError("lattice knot counts must be at least 2")
        lo, hi = (float(v) for v in self.output_range)
        if not (np.isfinite(lo) and np.isfinite(hi) and lo <= hi):
            raise ConfigError("output_range must be finite with low <= high")
        self.output_range = (lo, hi)

    @property
    def location_scale(self) -> bool:
        return self.tau_knots == 2

    def feature_index(self, name: str) -> int:
        for i, f in enumerate(self.features):
            if f.name == name:
                return i
        raise ConfigError(f"unknown feature {name!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        for f in d["features"]:
            if f["bounds"] is not None:
                f["bounds"] = list(f["bounds"])
        d["output_range"] = list(self.output_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["features"] = [FeatureSpec(**f) for f in d.get("features", [])]
        if "output_range" in d:
            d["output_range"] = tuple(d["output_range"])
        return cls(**d)


class QuantileModel:
    """Calibrators, tau calibrator, lattice ensemble and a monotone linear combination.

    Trainable parameters are exposed as one flat vector (``get_params`` /
    ``set_params``) in the order: feature calibrator outputs (categorical
    features: one value per category), tau calibrator outputs, lattice look-up
    tables, combination weights, bias.  The tau calibrator endpoints are
    pinned and carry zero gradient.
    """

    def __init__(self, config: ModelConfig, calibrators, tau_calibrator, grids, thetas,
                 weights, bias):
        self.config = config
        self.calibrators = calibrators
        self.tau_calibrator = tau_calibrator
        self.grids = list(grids)
        self.thetas = [np.asarray(t, dtype=float) for t in thetas]
        self.weights = np.asarray(weights, dtype=float)
        self.bias = float(bias)
        self.members = [[config.feature_index(n) for n in s] for s in config.ensemble]
        self._build_layout()

    # ---- parameter vector -------------------------------------------------

    def _blocks(self):
        for c in self.calibrators:
            yield c.output_values if isinstance(c, lt.PiecewiseLinearFn) else c
        yield self.tau_calibrator.output_values
        yield from self.thetas
        yield self.weights

    def _build_layout(self):
        sizes = [b.size for b in self._blocks()] + [1]
        offs = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        self._slices = [slice(a, b) for a, b in zip(offs[:-1], offs[1:])]
        self.n_params = int(offs[-1])
        nf = len(self.calibrators)
        self.slice_calibrators = self._slices[:nf]
        self.slice_tau = self._slices[nf]
        self.slice_thetas = self._slices[nf + 1: nf + 1 + len(self.thetas)]
        self.slice_weights = self._slices[-2]
        self.slice_bias = self._slices[-1]
        mask = np.ones(self.n_params, dtype=bool)
        mask[self.slice_tau.start] = False
        mask[self.slice_tau.stop - 1] = False
        self.trainable_mask = mask

    def get_params(self) -> np.ndarray:
        return np.concatenate([b.ravel() for b in self._blocks()] + [[self.bias]])

    def set_params(self, params) -> None:
        params = np.asarray(params, dtype=float)
        if params.shape != (self.n_params,):
            raise InputError(f"expected {self.n_params} parameters, got shape {params.shape}")
        for i, c in enumerate(self.calibrators):
            vals = params[self.slice_calibrators[i]].copy()
            if isinstance(c, lt.PiecewiseLinearFn):
                c.output_values = vals
            else:
                self.calibrators[i] = vals
        self.tau_calibrator.output_values = params[self.slice_tau].copy()
        self.thetas = [params[s].copy() for s in self.slice_thetas]
        self.weights = params[self.slice_weights].copy()
        self.bias = float(params[self.slice_bias][0])

    def copy(self) -> "QuantileModel":
        return copy.deepcopy(self)

    # ---- monotonicity structure -------------------------------------------

    def monotone_spec(self, k: int) -> lt.MonotoneSpec:
        """Monotone lattice dimensions of ensemble member ``k``."""
        feats = self.config.features
        dims = [d for d, j in enumerate(self.members[k]) if feats[j].monotone]
        if self.config.non_crossing:
            dims.append(len(self.members[k]))
        return lt.MonotoneSpec(dims)

    # ---- forward / backward -----------------------------------------------

    def _calibrate(self, X: np.ndarray):
        cols, caches = [], []
        for j, (spec, cal) in enumerate(zip(self.config.features, self.calibrators)):
            xj = X[:, j]
            if spec.kind == "continuous":
                lo, frac, _, _ = lt.plf_segments(cal, xj)
                y = cal.output_values
                cols.append(y[lo] + frac * (y[lo + 1] - y[lo]))
                caches.append((lo, frac))
            else:
                codes = xj.astype(np.int64)
                if np.any(codes != xj) or np.any((codes < 0) | (codes >= len(spec.categories))):
                    bad = int(np.flatnonzero((codes != xj) | (codes < 0) | (codes >= len(spec.categories)))[0])
                    raise InputError(f"feature {spec.name!r}: unknown category code {xj[bad]!r} at row {bad}")
                cols.append(cal[codes])
                caches.append((codes,))
        return cols, caches

    def _check_inputs(self, X, taus, strict_tau=True):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :] if len(self.config.features) else X.reshape(-1, 0)
        taus = np.asarray(taus, dtype=float).ravel()
        if X.ndim != 2 or X.shape[1] != len(self.config.features):
            raise InputError(f"expected {len(self.config.features)} feature columns, got shape {X.shape}")
        if taus.size == 1 and X.shape[0] != 1:
            taus = np.full(X.shape[0], taus[0])
        if X.shape[0] == 0 and taus.size:
            X = np.zeros((taus.size, 0))
        if taus.size != X.shape[0]:
            raise InputError("need one tau per row")
        if strict_tau and np.any((taus <= 0) | (taus >= 1)):
            raise InputError("tau must lie in the open interval (0, 1)")
        if not strict_tau and np.any((taus < 0) | (taus > 1)):
            raise InputError("tau must lie in [0, 1]")
        return X, taus

    def forward(self, X, taus, strict_tau=True):
        """Batch predictions plus a cache for :meth:`backward`."""
        X, taus = self._check_inputs(X, taus, strict_tau)
        u, ucache = self._calibrate(X)
        tlo, tfrac, _, _ = lt.plf_segments(self.tau_calibrator, taus)
        ty = self.tau_calibrator.output_values
        v = ty[tlo] + tfrac * (ty[tlo + 1] - ty[tlo])
        outs, lcache = [], []
        for k, members in enumerate(self.members):
            Z = np.column_stack([u[j] for j in members] + [v])
            val, idx, w, dZ = lt.value_and_grads_batch(self.grids[k], self.thetas[k], Z)
            outs.append(val)
            lcache.append((idx, w, dZ))
        outs = np.array(outs)  # (K, B)
        pred = self.bias + self.weights @ outs
        return pred, (ucache, (tlo, tfrac), outs, lcache)

    def backward(self, cache, upstream) -> np.ndarray:
        """Gradient of ``sum_i upstream_i * f(x_i, tau_i)`` with respect to the parameters."""
        ucache, (tlo, tfrac), outs, lcache = cache
        g = np.asarray(upstream, dtype=float)
        grad = np.zeros(self.n_params)
        grad[self.slice_bias] = g.sum()
        grad[self.slice_weights] = outs @ g
        du = [np.zeros_like(g) for _ in self.calibrators]
        dv = np.zeros_like(g)
        for k, members in enumerate(self.members):
            idx, w, dZ = lcache[k]
            gk = g * self.weights[k]
            grad[self.slice_thetas[k]] = np.bincount(
                idx.ravel(), weights=(gk[:, None] * w).ravel(), minlength=self.grids[k].size)
            for d, j in enumerate(members):
                du[j] += gk * dZ[:, d]
            dv += gk * dZ[:, -1]
        for j, (spec, cal) in enumerate(zip(self.config.features, self.calibrators)):
            s = self.slice_calibrators[j]
            n = s.stop - s.start
            if spec.kind == "continuous":
                lo, frac = ucache[j]
                grad[s] = (np.bincount(lo, weights=(1 - frac) * du[j], minlength=n)
                           + np.bincount(lo + 1, weights=frac * du[j], minlength=n))
            else:
                grad[s] = np.bincount(ucache[j][0], weights=du[j], minlength=n)
        nt = self.slice_tau.stop - self.slice_tau.start
        grad[self.slice_tau] = (np.bincount(tlo, weights=(1 - tfrac) * dv, minlength=nt)
                                + np.bincount(tlo + 1, weights=tfrac * dv, minlength=nt))
        grad[~self.trainable_mask] = 0.0
        return grad

    def predict_batch(self, X, taus) -> np.ndarray:
        return self.forward(X, taus)[0]

    # ---- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        cals = []
        for spec, cal in zip(self.config.features, self.calibrators):
            if spec.kind == "continuous":
                cals.append({"name": spec.name, "kind": spec.kind, **cal.to_dict()})
            else:
                cals.append({"name": spec.name, "kind": spec.kind,
                             "categories": list(spec.categories), "values": cal.tolist()})
        return {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "config": self.config.to_dict(),
            "feature_calibrators": cals,
            "tau_calibrator": self.tau_calibrator.to_dict(),
            "lattices": [{"features": list(self.config.ensemble[k]), **g.to_dict(),
                          "theta": t.tolist()} for k, (g, t) in enumerate(zip(self.grids, self.thetas))],
            "weights": self.weights.tolist(),
            "bias": self.bias,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantileModel":
        if d.get("format") != FORMAT_NAME:
            raise ConfigError("not a serialized quantile model")
        if d.get("version") != FORMAT_VERSION:
            raise ConfigError(f"unsupported model format version {d.get('version')!r}")
        config = ModelConfig.from_dict(d["config"])
        cals = []
        for spec, c in zip(config.features, d["feature_calibrators"]):
            if c["name"] != spec.name:
                raise ConfigError("calibrator order does not match the feature list")
            if spec.kind == "continuous":
                cals.append(lt.PiecewiseLinearFn.from_dict(c))
            else:
                cals.append(np.asarray(c["values"], dtype=float))
        grids = [lt.Grid.from_dict(l) for l in d["lattices"]]
        thetas = [np.asarray(l["theta"], dtype=float) for l in d["lattices"]]
        return cls(config, cals, lt.PiecewiseLinearFn.from_dict(d["tau_calibrator"]),
                   grids, thetas, d["weights"], d["bias"])

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def fingerprint(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()[:16]


def save_model(model: QuantileModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(model.dumps())
        fh.write("\n")


def load_model(path) -> QuantileModel:
    with open(path, encoding="utf-8") as fh:
        return QuantileModel.from_dict(json.load(fh))


def _lattice_shape(config: ModelConfig, k: int) -> list:
    subset = config.ensemble[k]
    if config.lattice_knots is not None:
        shape = [int(n) for n in config.lattice_knots[k]]
    else:
        shape = [config.features[config.feature_index(n)].lattice_knots for n in subset]
    return shape + [config.tau_knots]


def init_model(config: ModelConfig, rng_seed=0) -> QuantileModel:
    """Fresh model whose quantile curves are non-crossing ramps over ``output_range``.

    Calibrators start as identity ramps onto ``[0, 1]``; each lattice starts as a
    linear ramp in tau plus noise of relative scale ``init_noise`` that varies
    only along non-monotone feature dimensions.
    """
    if not isinstance(config, ModelConfig):
        raise ConfigError("init_model expects a ModelConfig")
    rng = np.random.default_rng(rng_seed)
    cals = []
    for spec in config.features:
        if spec.kind == "continuous":
            cals.append(lt.PiecewiseLinearFn(np.linspace(*spec.bounds, spec.keypoints),
                                             np.linspace(0.0, 1.0, spec.keypoints)))
        else:
            n = len(spec.categories)
            cals.append(np.linspace(0.0, 1.0, n) if n > 1 else np.full(1, 0.5))
    kt = np.linspace(0.0, 1.0, config.tau_calibrator_keypoints)
    tau_cal = lt.PiecewiseLinearFn(kt, kt.copy())

    lo, hi = config.output_range
    span = max(hi - lo, 1e-12)
    grids, thetas = [], []
    for k, subset in enumerate(config.ensemble):
        shape = _lattice_shape(config, k)
        grid = lt.Grid.uniform(shape)
        tau_pos = np.broadcast_to(grid.knots[-1].reshape([1] * (len(shape) - 1) + [-1]), shape)
        noise_shape = [1 if config.features[config.feature_index(n)].monotone else s
                       for n, s in zip(subset, shape[:-1])] + [1]
        noise = config.init_noise * span * rng.standard_normal(noise_shape)
        cube = lo + span * tau_pos + noise
        grids.append(grid)
        thetas.append(np.asarray(cube, dtype=float).reshape(-1, order="F"))
    K = len(config.ensemble)
    return QuantileModel(config, cals, tau_cal, grids, thetas, np.full(K, 1.0 / K), 0.0)


def predict(model: QuantileModel, x, tau: float) -> float:
    """Predicted ``tau``-quantile at feature vector ``x``."""
    x = np.asarray(x, dtype=float).reshape(1, -1)
    return float(model.predict_batch(x, [tau])[0])


def predict_curve(model: QuantileModel, x, taus: Sequence[float]) -> np.ndarray:
    """Predicted quantiles at ``x`` for each of ``taus``."""
    taus = np.asarray(taus, dtype=float).ravel()
    X = np.repeat(np.asarray(x, dtype=float).reshape(1, -1), taus.size, axis=0)
    return model.predict_batch(X, taus)


def predict_endpoints(model: QuantileModel, X) -> tuple:
    """Model outputs at ``tau = 0`` and ``tau = 1`` (outside the predictive range)."""
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    f0 = model.forward(X, np.zeros(n), strict_tau=False)[0]
    f1 = model.forward(X, np.ones(n), strict_tau=False)[0]
    return f0, f1


def forward_with_grad(model: QuantileModel, x, tau: float):
    """Prediction at one point and its gradient with respect to all parameters."""
    x = np.asarray(x, dtype=float).reshape(1, -1)
    pred, cache = model.forward(x, [tau])
    return float(pred[0]), model.backward(cache, np.ones(1))


def _project_tau_calibrator(values: np.ndarray, monotone: bool) -> np.ndarray:
    out = values.copy()
    out[0], out[-1] = 0.0, 1.0
    if monotone and out.size > 2:
        out[1:-1] = lt.pav(out[1:-1])
    return np.clip(out, 0.0, 1.0)


def project_model(model: QuantileModel, tol: float = 1e-9) -> QuantileModel:
    """Return a copy of ``model`` projected onto its constraint set.

    Monotone feature calibrators are made nondecreasing, every calibrator is
    clipped to ``[0, 1]``, the tau calibrator is pinned at its endpoints (and
    made nondecreasing when ``non_crossing``), lattices are projected onto
    their monotone dimensions and combination weights are clipped at zero.
    Isotonic regression followed by clipping is the exact projection onto a
    bounded monotone set.
    """
    if tol <= 0:
        raise InputError("tol must be positive")
    out = model.copy()
    for j, spec in enumerate(out.config.features):
        cal = out.calibrators[j]
        if spec.kind == "continuous":
            vals = lt.pav(cal.output_values) if spec.monotone else cal.output_values
            cal.output_values = np.clip(vals, 0.0, 1.0)
        else:
            out.calibrators[j] = np.clip(cal, 0.0, 1.0)
    out.tau_calibrator.output_values = _project_tau_calibrator(
        out.tau_calibrator.output_values, out.config.non_crossing)
    for k in range(len(out.thetas)):
        spec = out.monotone_spec(k)
        if spec.monotone_dims:
            out.thetas[k] = lt.project_monotone(out.thetas[k], out.grids[k], spec, tol=tol)
    out.weights = np.maximum(out.weights, 0.0)
    return out


def check_model(model: QuantileModel, tol: float = 1e-9):
    """Verify every structural constraint; returns ``(ok, worst_violation)``."""
    worst = 0.0
    for j, spec in enumerate(model.config.features):
        vals = model.calibrators[j]
        vals = vals.output_values if isinstance(vals, lt.PiecewiseLinearFn) else vals
        worst = max(worst, float(np.max(np.maximum(-vals, vals - 1.0))))
        if spec.monotone:
            worst = max(worst, float(np.max(-np.diff(vals), initial=0.0)))
    c = model.tau_calibrator.output_values
    worst = max(worst, abs(c[0]), abs(c[-1] - 1.0))
    if model.config.non_crossing:
        worst = max(worst, float(np.max(-np.diff(c), initial=0.0)))
    for k in range(len(model.thetas)):
        _, viol, _ = lt.check_monotone(model.thetas[k], model.grids[k], model.monotone_spec(k))
        worst = max(worst, viol)
    worst = max(worst, float(np.max(-model.weights, initial=0.0)))
    return worst <= tol, worst


def location_scale_residual(model: QuantileModel, xs, taus, return_skipped: bool = False):
    """Largest deviation of the normalized quantile curves from the tau calibrator.

    For each ``x`` the curve ``(f(x, tau) - f(x, 0)) / (f(x, 1) - f(x, 0))`` is
    compared with ``c(tau)``.  Points whose scale ``f(x, 1) - f(x, 0)`` is not
    positive are skipped (returned as indices when ``return_skipped``).  The
    residual is zero up to rounding whenever ``tau_knots == 2``; with more tau
    knots it measures how far the model departs from a location-scale family.
    """
    xs = np.asarray(xs, dtype=float)
    if xs.ndim == 1:
        xs = xs.reshape(-1, len(model.config.features))
    taus = np.asarray(taus, dtype=float).ravel()
    f0, f1 = predict_endpoints(model, xs)
    scale = f1 - f0
    skipped = np.flatnonzero(~(scale > 0))
    keep = np.flatnonzero(scale > 0)
    residual = 0.0
    if keep.size:
        n, m = keep.size, taus.size
        Xr = np.repeat(xs[keep], m, axis=0)
        tr = np.tile(taus, n)
        f = model.predict_batch(Xr, tr).reshape(n, m)
        norm = (f - f0[keep, None]) / scale[keep, None]
        c = lt.plf_evaluate(model.tau_calibrator, taus)
        residual = float(np.max(np.abs(norm - c[None, :])))
    if return_skipped:
        return residual, skipped.tolist()
    return residual
