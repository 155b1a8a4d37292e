"""Multilinear lattice interpolation, piecewise-linear functions and monotone projection.

Parameter layout
----------------
A lattice over ``D`` dimensions with ``L_d`` knots in dimension ``d`` stores its
look-up table as a flat vector ``theta`` of length ``L = prod(L_d)``.  The flat
index of the knot with multi-index ``(i_0, ..., i_{D-1})`` is::

    i_0 + L_0 * (i_1 + L_1 * (i_2 + ...))

so dimension 0 varies fastest (Fortran order).  Serialized models rely on this.

Dimensions are indexed from 0 throughout the Python API.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import InputError, NumericalError

__all__ = [
    "Grid",
    "PiecewiseLinearFn",
    "MonotoneSpec",
    "interpolation_weights",
    "interpolation_weights_batch",
    "evaluate",
    "evaluate_batch",
    "grad_theta",
    "grad_x",
    "grad_x_batch",
    "value_and_grads_batch",
    "plf_evaluate",
    "plf_segments",
    "pav",
    "project_monotone",
    "check_monotone",
]


@dataclass(frozen=True, eq=False)
class Grid:
    """Knot positions of a regular (possibly non-uniform) lattice grid."""

    knots: tuple

    def __post_init__(self):
        if len(self.knots) < 1:
            raise InputError("a grid needs at least one dimension")
        cleaned = []
        for d, v in enumerate(self.knots):
            v = np.asarray(v, dtype=float).ravel()
            if v.size < 2:
                raise InputError(f"dimension {d} has {v.size} knots; need at least 2")
            if not np.all(np.isfinite(v)) or np.any(np.diff(v) <= 0):
                raise InputError(f"knots of dimension {d} must be finite and strictly increasing")
            v.setflags(write=False)
            cleaned.append(v)
        object.__setattr__(self, "knots", tuple(cleaned))
        corners = np.array(list(itertools.product((0, 1), repeat=len(cleaned))), dtype=np.int64)
        # itertools.product varies the last position fastest; flip so dim 0 is fastest.
        corners = corners[:, ::-1].copy()
        object.__setattr__(self, "_corners", corners)
        object.__setattr__(self, "_strides", np.cumprod([1] + list(self.shape[:-1])).astype(np.int64))

    @classmethod
    def uniform(cls, shape: Sequence[int], low: float = 0.0, high: float = 1.0) -> "Grid":
        return cls(tuple(np.linspace(low, high, int(n)) for n in shape))

    @property
    def dims(self) -> int:
        return len(self.knots)

    @property
    def shape(self) -> tuple:
        return tuple(v.size for v in self.knots)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def lower(self) -> np.ndarray:
        return np.array([v[0] for v in self.knots])

    def upper(self) -> np.ndarray:
        return np.array([v[-1] for v in self.knots])

    def flat_index(self, multi_index: Sequence[int]) -> int:
        return int(np.dot(np.asarray(multi_index, dtype=np.int64), self._strides))

    def knot_position(self, flat: int) -> np.ndarray:
        """Coordinates of the knot stored at ``theta[flat]``."""
        idx = np.unravel_index(flat, self.shape, order="F")
        return np.array([v[i] for v, i in zip(self.knots, idx)])

    def to_dict(self) -> dict:
        return {"knots": [v.tolist() for v in self.knots]}

    @classmethod
    def from_dict(cls, d: dict) -> "Grid":
        return cls(tuple(np.asarray(v, dtype=float) for v in d["knots"]))

    def __eq__(self, other):
        if not isinstance(other, Grid) or other.shape != self.shape:
            return NotImplemented if not isinstance(other, Grid) else False
        return all(np.array_equal(a, b) for a, b in zip(self.knots, other.knots))

    __hash__ = None


def _as_batch(grid: Grid, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != grid.dims:
        raise InputError(f"expected inputs with {grid.dims} columns, got shape {np.shape(x)}")
    return x


def _cells(knots: np.ndarray, z: np.ndarray):
    """Left knot index, right-weight and inverse cell width for each entry of ``z``.

    Inputs are clamped to the knot range.  A point lying exactly on an interior
    knot belongs to the cell on its right.
    """
    zc = np.clip(z, knots[0], knots[-1])
    lo = np.searchsorted(knots, zc, side="right") - 1
    lo = np.clip(lo, 0, knots.size - 2)
    inv_width = 1.0 / (knots[lo + 1] - knots[lo])
    frac = (zc - knots[lo]) * inv_width
    inside = (z >= knots[0]) & (z <= knots[-1])
    return lo, frac, inv_width, inside


def _cell_data(grid: Grid, X: np.ndarray):
    B, D = X.shape
    lo = np.empty((B, D), dtype=np.int64)
    frac = np.empty((B, D))
    inv_w = np.empty((B, D))
    inside = np.empty((B, D), dtype=bool)
    for d, v in enumerate(grid.knots):
        lo[:, d], frac[:, d], inv_w[:, d], inside[:, d] = _cells(v, X[:, d])
    return lo, frac, inv_w, inside


def interpolation_weights_batch(grid: Grid, X):
    """Corner indices and multilinear weights for a batch of points.

    Returns
    -------
    indices : (B, 2**D) int array
        Flat indices into ``theta`` of the corners of each point's cell.
    weights : (B, 2**D) float array
        Nonnegative weights summing to one per row.
    """
    X = _as_batch(grid, X)
    lo, frac, _, _ = _cell_data(grid, X)
    corners = grid._corners  # (C, D)
    indices = (lo[:, None, :] + corners[None, :, :]) @ grid._strides
    per_dim = np.where(corners[None, :, :] == 1, frac[:, None, :], 1.0 - frac[:, None, :])
    weights = np.prod(per_dim, axis=2)
    return indices, weights


def interpolation_weights(grid: Grid, x):
    """Sparse multilinear interpolation weights of a single point.

    Returns ``(indices, weights)``: at most ``2**D`` knots carry weight, the
    weights are nonnegative and sum to one.  Coordinates outside the grid are
    clamped to its bounds.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise InputError("interpolation_weights expects a single point; use the batch variant")
    idx, w = interpolation_weights_batch(grid, x)
    return idx[0], w[0]


def _check_theta(grid: Grid, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (grid.size,):
        raise InputError(f"theta has shape {theta.shape}, grid needs ({grid.size},)")
    return theta


def evaluate_batch(grid: Grid, theta, X) -> np.ndarray:
    theta = _check_theta(grid, theta)
    idx, w = interpolation_weights_batch(grid, X)
    return np.sum(w * theta[idx], axis=1)


def evaluate(grid: Grid, theta, x) -> float:
    """Lattice value ``sum_i phi(x)_i * theta_i`` at a single point."""
    return float(evaluate_batch(grid, theta, np.asarray(x, dtype=float)[None, :])[0])


def grad_theta(grid: Grid, x):
    """Gradient of the lattice value with respect to ``theta`` (sparse).

    The lattice is linear in its parameters, so this is exactly the vector of
    interpolation weights.
    """
    return interpolation_weights(grid, x)


def grad_x_batch(grid: Grid, theta, X) -> np.ndarray:
    """Input gradient of the lattice for a batch of points, shape ``(B, D)``.

    One-sided (right) derivatives are returned on cell boundaries; coordinates
    clamped from outside the grid get a zero derivative.
    """
    return value_and_grads_batch(grid, _check_theta(grid, theta), X)[3]


def value_and_grads_batch(grid: Grid, theta, X):
    """Lattice values plus everything needed for backpropagation, in one pass.

    Returns ``(values, indices, weights, dX)`` with ``indices``/``weights`` as in
    :func:`interpolation_weights_batch` and ``dX`` as in :func:`grad_x_batch`.
    """
    X = _as_batch(grid, X)
    lo, frac, inv_w, inside = _cell_data(grid, X)
    corners = grid._corners
    indices = (lo[:, None, :] + corners[None, :, :]) @ grid._strides
    vals = theta[indices]
    per_dim = np.where(corners[None, :, :] == 1, frac[:, None, :], 1.0 - frac[:, None, :])
    weights = np.prod(per_dim, axis=2)
    values = np.sum(weights * vals, axis=1)
    dX = np.empty(X.shape)
    for d in range(grid.dims):
        others = np.prod(np.delete(per_dim, d, axis=2), axis=2) if grid.dims > 1 else 1.0
        sign = np.where(corners[:, d] == 1, 1.0, -1.0)
        dX[:, d] = np.sum(vals * others * sign[None, :], axis=1) * inv_w[:, d]
    dX[~inside] = 0.0
    return values, indices, weights, dX


def grad_x(grid: Grid, theta, x) -> np.ndarray:
    return grad_x_batch(grid, theta, np.asarray(x, dtype=float)[None, :])[0]


@dataclass(eq=False)
class PiecewiseLinearFn:
    """A 1-D piecewise-linear function; equivalently a one-dimensional lattice."""

    input_keypoints: np.ndarray
    output_values: np.ndarray

    def __post_init__(self):
        self.input_keypoints = np.asarray(self.input_keypoints, dtype=float).ravel()
        self.output_values = np.asarray(self.output_values, dtype=float).ravel().copy()
        if self.input_keypoints.size < 2:
            raise InputError("a piecewise-linear function needs at least two keypoints")
        if self.input_keypoints.shape != self.output_values.shape:
            raise InputError("input keypoints and output values differ in length")
        if np.any(np.diff(self.input_keypoints) <= 0):
            raise InputError("input keypoints must be strictly increasing")

    def __call__(self, t):
        return plf_evaluate(self, t)

    def to_dict(self) -> dict:
        return {"input_keypoints": self.input_keypoints.tolist(),
                "output_values": self.output_values.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "PiecewiseLinearFn":
        return cls(d["input_keypoints"], d["output_values"])


def plf_segments(f: PiecewiseLinearFn, t):
    """Segment index, right-weight, inverse width and in-range mask for inputs ``t``."""
    return _cells(f.input_keypoints, np.asarray(t, dtype=float))


def plf_evaluate(f: PiecewiseLinearFn, t):
    """Evaluate ``f`` at ``t`` (scalar or array), clamping to the keypoint range.

    Evaluation at a keypoint returns the stored output value exactly.
    """
    t_arr = np.asarray(t, dtype=float)
    lo, frac, _, _ = plf_segments(f, t_arr)
    y = f.output_values
    out = y[lo] + frac * (y[lo + 1] - y[lo])
    # exact reproduction at the right end of a segment
    out = np.where(frac == 1.0, y[lo + 1], out)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class MonotoneSpec:
    """Lattice dimensions (0-based) along which the function must be nondecreasing."""

    monotone_dims: frozenset = field(default_factory=frozenset)

    def __init__(self, monotone_dims: Iterable[int] = ()):
        object.__setattr__(self, "monotone_dims", frozenset(int(d) for d in monotone_dims))

    def validate(self, grid: Grid):
        for d in self.monotone_dims:
            if not 0 <= d < grid.dims:
                raise InputError(f"monotone dimension {d} outside [0, {grid.dims - 1}]")


def pav(y, w=None) -> np.ndarray:
    """Weighted least-squares nondecreasing fit by pool-adjacent-violators."""
    y = np.asarray(y, dtype=float)
    n = y.size
    if n <= 1:
        return y.copy()
    w = np.ones(n) if w is None else np.asarray(w, dtype=float)
    means = np.empty(n)
    weights = np.empty(n)
    counts = np.empty(n, dtype=np.int64)
    k = -1
    for i in range(n):
        k += 1
        means[k], weights[k], counts[k] = y[i], w[i], 1
        while k > 0 and means[k - 1] > means[k]:
            wt = weights[k - 1] + weights[k]
            means[k - 1] = (weights[k - 1] * means[k - 1] + weights[k] * means[k]) / wt
            weights[k - 1] = wt
            counts[k - 1] += counts[k]
            k -= 1
    return np.repeat(means[: k + 1], counts[: k + 1])


def _chains(theta: np.ndarray, grid: Grid, dim: int) -> np.ndarray:
    """View ``theta`` as rows of chains running along ``dim``; shape (n_chains, L_dim)."""
    cube = theta.reshape(grid.shape, order="F")
    return np.moveaxis(cube, dim, -1).reshape(-1, grid.shape[dim])


def _unchain(rows: np.ndarray, grid: Grid, dim: int) -> np.ndarray:
    shape = list(grid.shape)
    moved = shape[:dim] + shape[dim + 1:] + [shape[dim]]
    cube = np.moveaxis(rows.reshape(moved), -1, dim)
    return cube.reshape(-1, order="F")


def _project_dim(theta: np.ndarray, grid: Grid, dim: int) -> np.ndarray:
    rows = _chains(theta, grid, dim).copy()
    bad = np.any(np.diff(rows, axis=1) < 0, axis=1)
    if not np.any(bad):
        return theta.copy()
    if rows.shape[1] == 2:
        m = rows[bad].mean(axis=1)
        rows[bad] = m[:, None]
    else:
        for r in np.flatnonzero(bad):
            rows[r] = pav(rows[r])
    return _unchain(rows, grid, dim)


def _max_violation(theta: np.ndarray, grid: Grid, dims) -> float:
    worst = 0.0
    for d in dims:
        drop = -np.diff(_chains(theta, grid, d), axis=1)
        if drop.size:
            worst = max(worst, float(drop.max()))
    return worst


def _polish(x, grid: Grid, dims, max_cycles: int = 100) -> np.ndarray:
    """Remove the sub-tolerance residue Dykstra leaves so the result is exactly feasible.

    Cycling exact per-dimension projections moves ``x`` by at most the residue,
    and a feasible point is then a fixed point of ``project_monotone``.
    """
    for _ in range(max_cycles):
        if _max_violation(x, grid, dims) == 0.0:
            return x
        for d in dims:
            x = _project_dim(x, grid, d)
    return x


def project_monotone(theta, grid: Grid, spec: MonotoneSpec, tol: float = 1e-9,
                     max_sweeps: int = 1000) -> np.ndarray:
    """Euclidean projection of ``theta`` onto the set of lattices monotone in ``spec`` dims.

    Each single-dimension constraint set is a product of chains, projected
    exactly by PAV; the intersection over several dimensions is handled with
    Dykstra's alternating projections.

    Raises
    ------
    NumericalError
        If Dykstra has not converged after ``max_sweeps`` sweeps.
    """
    if tol <= 0:
        raise InputError("tol must be positive")
    theta = _check_theta(grid, theta).copy()
    spec.validate(grid)
    dims = sorted(spec.monotone_dims)
    if not dims:
        return theta
    if len(dims) == 1:
        return _project_dim(theta, grid, dims[0])
    if _max_violation(theta, grid, dims) == 0.0:
        return theta

    x = theta
    incr = {d: np.zeros_like(theta) for d in dims}
    change = np.inf
    for _ in range(max_sweeps):
        x_start = x
        for d in dims:
            y = _project_dim(x + incr[d], grid, d)
            incr[d] = x + incr[d] - y
            x = y
        change = float(np.max(np.abs(x - x_start)))
        if change < tol and _max_violation(x, grid, dims) < tol:
            return _polish(x, grid, dims)
    raise NumericalError(
        f"monotone projection did not converge in {max_sweeps} sweeps (last change {change:.3g})",
        residual=max(change, _max_violation(x, grid, dims)),
    )


def check_monotone(theta, grid: Grid, spec: MonotoneSpec, tol: float = 0.0):
    """Check every neighbouring-pair constraint along the monotone dims.

    Returns ``(ok, worst_violation, worst_pair)`` where ``worst_pair`` is a
    ``(lower_flat_index, upper_flat_index)`` tuple or ``None`` if nothing is
    violated.
    """
    theta = _check_theta(grid, theta)
    spec.validate(grid)
    worst, pair = 0.0, None
    flat = np.arange(grid.size)
    for d in sorted(spec.monotone_dims):
        drop = -np.diff(_chains(theta, grid, d), axis=1)
        if drop.size == 0:
            continue
        r, c = np.unravel_index(int(np.argmax(drop)), drop.shape)
        if drop[r, c] > worst:
            ids = _chains(flat.astype(float), grid, d)
            worst = float(drop[r, c])
            pair = (int(ids[r, c]), int(ids[r, c + 1]))
    return worst <= tol, worst, pair
