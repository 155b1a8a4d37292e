"""Datasets, CSV input/output, splits and simulations with closed-form true quantiles.

Simulated labels are ``y = m(x) + s(x) * e`` where ``m`` is the family's mean
curve, ``s`` a smooth positive modulation and ``e`` two-piece (split) normal
noise with left scale ``a`` and right scale ``b``: with probability
``b / (a + b)`` a half-normal of scale ``b`` above zero, otherwise a half-normal
of scale ``a`` below zero.  The conditional quantile is available exactly:

* ``tau <= a / (a + b)``: ``a * s(x) * Phi^-1(tau * (a + b) / (2 a))``
* otherwise:            ``b * s(x) * Phi^-1((tau * (a + b) - a) / (2 b) + 1/2)``

Families and their canonical domains (``z`` is ``x`` rescaled to ``[-1, 1]``,
``s(x) = noise_scale * (1 + 0.5 * mean(z))``):

=============  ====  ======================  ================================================
family         dim   domain                  mean curve ``m(x)``
=============  ====  ======================  ================================================
sine-skew      1     [-1, 1]                 ``3 sin(pi x)``
griewank       2     [-600, 600]^2           ``1 + sum x_i^2 / 4000 - prod cos(x_i / sqrt(i))``
michalewicz    1     [0, pi]                 ``-sum sin(x_i) sin(i x_i^2 / pi)^20``
ackley         9     [-32.768, 32.768]^9     ``-20 exp(-0.2 rms(x)) - exp(mean cos(2 pi x)) + 20 + e``
=============  ====  ======================  ================================================
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy.special import ndtri

from .errors import ConfigError, InputError


# ---------------------------------------------------------------------------
# Datasets and CSV
# ---------------------------------------------------------------------------


@dataclass
class ColumnSpec:
    name: str
    kind: str = "continuous"
    categories: Optional[list] = None
    other: Optional[str] = None  # category that absorbs unseen values

    def __post_init__(self):
        if self.kind not in ("continuous", "categorical"):
            raise ConfigError(f"column {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == "categorical":
            if not self.categories:
                raise ConfigError(f"column {self.name!r}: categorical columns need categories")
            self.categories = [str(c) for c in self.categories]
            if self.other is not None and self.other not in self.categories:
                raise ConfigError(f"column {self.name!r}: 'other' must be one of the categories")


@dataclass
class Schema:
    """Column layout of a CSV file: feature columns, a label and an optional subset column."""

    features: List[ColumnSpec]
    label: str = "y"
    subset: Optional[str] = None

    def __post_init__(self):
        self.features = [c if isinstance(c, ColumnSpec) else ColumnSpec(**c) for c in self.features]

    @classmethod
    def from_dict(cls, d: dict) -> "Schema":
        return cls(features=[ColumnSpec(**c) for c in d["features"]],
                   label=d.get("label", "y"), subset=d.get("subset"))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Dataset:
    """Feature matrix (categorical columns hold integer codes), labels and optional extras."""

    X: np.ndarray
    y: np.ndarray
    schema: Schema
    subset: Optional[np.ndarray] = None
    oracle: Optional[Callable] = None
    sim_spec: Optional["SimSpec"] = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=float).ravel()
        if self.X.ndim != 2 or self.X.shape[0] != self.y.size:
            raise InputError("feature matrix and labels disagree in row count")
        if self.X.shape[1] != len(self.schema.features):
            raise InputError("feature matrix width does not match the schema")
        if self.subset is not None:
            self.subset = np.asarray(self.subset, dtype=object)
            if self.subset.size != self.y.size:
                raise InputError("subset column and labels disagree in row count")

    def __len__(self):
        return self.y.size

    @property
    def feature_names(self) -> list:
        return [c.name for c in self.schema.features]

    def take(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(self.X[rows], self.y[rows], self.schema,
                       None if self.subset is None else self.subset[rows],
                       self.oracle, self.sim_spec)

    def column_values(self, name: str) -> np.ndarray:
        """Raw values of a column: category names for categorical features."""
        if name == self.schema.subset and self.subset is not None:
            return self.subset
        if name == self.schema.label:
            return self.y
        for j, c in enumerate(self.schema.features):
            if c.name == name:
                if c.kind == "categorical":
                    return np.asarray(c.categories, dtype=object)[self.X[:, j].astype(int)]
                return self.X[:, j]
        raise ConfigError(f"unknown column {name!r}")

    def mask(self, column: Optional[str], value=None) -> np.ndarray:
        """Boolean row selector; ``column=None`` or ``"all"`` selects everything."""
        if column is None or column == "all":
            return np.ones(len(self), dtype=bool)
        vals = self.column_values(column)
        if vals.dtype == object:
            return vals == str(value)
        return vals == float(value)


def _parse_float(text: str, line: int, col: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise InputError(f"line {line}: column {col!r}: cannot parse {text!r} as a number") from None
    if not math.isfinite(v):
        raise InputError(f"line {line}: column {col!r}: non-finite value {text!r}")
    return v


def load_csv(path, schema: Schema) -> Dataset:
    """Read a UTF-8 CSV with a header row into a :class:`Dataset`."""
    if isinstance(schema, dict):
        schema = Schema.from_dict(schema)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InputError(f"{path}: empty file") from None
        pos = {name: i for i, name in enumerate(header)}
        needed = [c.name for c in schema.features] + [schema.label]
        if schema.subset:
            needed.append(schema.subset)
        missing = [n for n in needed if n not in pos]
        if missing:
            raise InputError(f"{path}: missing columns {missing}")
        X, y, sub = [], [], []
        cat_index = {c.name: {v: i for i, v in enumerate(c.categories)}
                     for c in schema.features if c.kind == "categorical"}
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise InputError(f"line {line}: expected {len(header)} fields, found {len(row)}")
            feats = []
            for c in schema.features:
                text = row[pos[c.name]]
                if c.kind == "continuous":
                    feats.append(_parse_float(text, line, c.name))
                else:
                    code = cat_index[c.name].get(text)
                    if code is None:
                        if c.other is None:
                            raise InputError(f"line {line}: column {c.name!r}: unknown category {text!r}")
                        code = cat_index[c.name][c.other]
                    feats.append(float(code))
            X.append(feats)
            y.append(_parse_float(row[pos[schema.label]], line, schema.label))
            if schema.subset:
                sub.append(row[pos[schema.subset]])
    if not y:
        raise InputError(f"{path}: no data rows")
    return Dataset(np.array(X, dtype=float).reshape(len(y), len(schema.features)), np.array(y),
                   schema, np.array(sub, dtype=object) if schema.subset else None)


def write_csv(dataset: Dataset, path) -> None:
    """Write ``dataset`` as CSV; floats use their shortest round-tripping repr."""
    schema = dataset.schema
    header = [c.name for c in schema.features] + [schema.label]
    if schema.subset and dataset.subset is not None:
        header.append(schema.subset)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(dataset)):
            row = []
            for j, c in enumerate(schema.features):
                v = dataset.X[i, j]
                row.append(c.categories[int(v)] if c.kind == "categorical" else repr(float(v)))
            row.append(repr(float(dataset.y[i])))
            if len(header) > len(row):
                row.append(str(dataset.subset[i]))
            w.writerow(row)


def split(dataset: Dataset, fractions: Sequence[float] = (0.6, 0.2, 0.2), mode: str = "iid",
          seed: int = 0):
    """Partition into ``(train, val, test)``.

    ``mode="ordered"`` keeps row order, earliest rows going to train;
    ``mode="iid"`` shuffles with ``seed`` first.
    """
    fractions = [float(f) for f in fractions]
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise ConfigError("split fractions must be three nonnegative numbers summing to 1")
    n = len(dataset)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) <= 0:
        raise ConfigError(f"split of {n} rows with fractions {fractions} leaves an empty part")
    if mode == "ordered":
        order = np.arange(n)
    elif mode == "iid":
        order = np.random.default_rng(seed).permutation(n)
    else:
        raise ConfigError(f"unknown split mode {mode!r}")
    parts = np.split(order, [n_train, n_train + n_val])
    if mode == "iid":
        parts = [np.sort(p) for p in parts]
    return tuple(dataset.take(p) for p in parts)


# ---------------------------------------------------------------------------
# Simulations
# ---------------------------------------------------------------------------

FAMILIES = {
    "sine-skew": (1, (-1.0, 1.0)),
    "griewank": (2, (-600.0, 600.0)),
    "michalewicz": (1, (0.0, math.pi)),
    "ackley": (9, (-32.768, 32.768)),
}


def _mean_curve(family: str, X: np.ndarray) -> np.ndarray:
    if family == "sine-skew":
        return 3.0 * np.sin(np.pi * X[:, 0])
    if family == "griewank":
        i = np.arange(1, X.shape[1] + 1)
        return 1.0 + np.sum(X ** 2, axis=1) / 4000.0 - np.prod(np.cos(X / np.sqrt(i)), axis=1)
    if family == "michalewicz":
        i = np.arange(1, X.shape[1] + 1)
        return -np.sum(np.sin(X) * np.sin(i * X ** 2 / np.pi) ** 20, axis=1)
    if family == "ackley":
        d = X.shape[1]
        return (-20.0 * np.exp(-0.2 * np.sqrt(np.sum(X ** 2, axis=1) / d))
                - np.exp(np.sum(np.cos(2 * np.pi * X), axis=1) / d) + 20.0 + np.e)
    raise ConfigError(f"unknown simulation family {family!r}")


def two_piece_quantile(tau, a: float, b: float, scale=1.0):
    """Quantile function of the split normal with left scale ``a*scale`` and right ``b*scale``."""
    tau = np.asarray(tau, dtype=float)
    p_left = a / (a + b)
    left = a * ndtri(np.minimum(tau, p_left) * (a + b) / (2 * a))
    right = b * ndtri((np.maximum(tau, p_left) * (a + b) - a) / (2 * b) + 0.5)
    return np.asarray(scale) * np.where(tau <= p_left, left, right)


@dataclass
class SimSpec:
    """Simulation family, size, seed and noise parameters ``(a, b)``."""

    family: str = "sine-skew"
    n: int = 250
    seed: int = 0
    a: float = 1.0
    b: float = 1.0
    noise_scale: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown simulation family {self.family!r}; "
                              f"choose from {sorted(FAMILIES)}")
        if self.n < 1:
            raise ConfigError("simulation size must be at least 1")
        if self.a <= 0 or self.b <= 0 or self.noise_scale <= 0:
            raise ConfigError("noise parameters must be positive")

    @property
    def dim(self) -> int:
        return FAMILIES[self.family][0]

    @property
    def domain(self) -> tuple:
        return FAMILIES[self.family][1]

    def feature_names(self) -> list:
        return ["x"] if self.dim == 1 else [f"x{i + 1}" for i in range(self.dim)]

    def schema(self) -> Schema:
        return Schema([ColumnSpec(n) for n in self.feature_names()], label="y")

    def mean(self, X) -> np.ndarray:
        return _mean_curve(self.family, np.asarray(X, dtype=float).reshape(-1, self.dim))

    def scale(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float).reshape(-1, self.dim)
        lo, hi = self.domain
        z = 2.0 * (X - lo) / (hi - lo) - 1.0
        return self.noise_scale * (1.0 + 0.5 * z.mean(axis=1))

    def true_quantile(self, X, taus) -> np.ndarray:
        """Exact conditional quantiles, shape ``(n_points, n_taus)``."""
        taus = np.atleast_1d(np.asarray(taus, dtype=float))
        m = self.mean(X)[:, None]
        s = self.scale(X)[:, None]
        return m + two_piece_quantile(taus[None, :], self.a, self.b, s)

    def to_dict(self) -> dict:
        return asdict(self)


def generate_sim(spec: SimSpec) -> Dataset:
    """Draw ``spec.n`` examples with ``x`` uniform on the family domain."""
    rng = np.random.Generator(np.random.Philox(key=int(spec.seed)))
    lo, hi = spec.domain
    X = rng.uniform(lo, hi, size=(spec.n, spec.dim))
    u = rng.random(spec.n)
    eps = two_piece_quantile(u, spec.a, spec.b, spec.scale(X))
    y = spec.mean(X) + eps
    return Dataset(X, y, spec.schema(), oracle=spec.true_quantile, sim_spec=spec)


def write_sim_sidecar(spec: SimSpec, csv_path) -> Path:
    path = Path(str(csv_path) + ".sim.json")
    path.write_text(json.dumps({"format": "qrlattice.sim", "version": 1, "spec": spec.to_dict()},
                               indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_sim_sidecar(csv_path) -> Optional[SimSpec]:
    path = Path(str(csv_path) + ".sim.json")
    if not path.exists():
        return None
    d = json.loads(path.read_text(encoding="utf-8"))
    return SimSpec(**d["spec"])


def sample_exponential(lam: float, n, seed=0):
    """Exponential(``lam``) draws by inverse-CDF sampling plus the exact quantile function.

    ``n`` may be an int or a shape tuple (e.g. ``(repeats, N)``).
    """
    if lam <= 0:
        raise ConfigError("rate must be positive")
    rng = np.random.default_rng(seed)
    samples = -np.log1p(-rng.random(n)) / lam

    def quantile(tau):
        return -np.log1p(-np.asarray(tau, dtype=float)) / lam

    return samples, quantile
