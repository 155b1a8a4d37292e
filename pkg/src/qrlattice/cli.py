"""Command-line driver: ``qrlattice {simulate,train,eval,uqe} --config RUN.json --out DIR``.

The run configuration is one JSON object::

    {
      "seed": 0,
      "data":  {"sim": {"family": "sine-skew", "n": 250, "n_val": 250, "n_test": 1000,
                        "a": 1, "b": 7}}
               | {"train": "train.csv", "val": "val.csv", "test": "test.csv", "schema": {...}}
               | {"path": "all.csv", "schema": {...}, "split": [0.6, 0.2, 0.2]},
      "model": {... ModelConfig fields; features default to one per data column ...},
      "train": {... TrainConfig fields ...},
      "grid":  {"train.learning_rate": [0.01, 0.003], "model.tau_knots": [2, 3]},
      "eval":  {"model": "model.json", "taus": [...], "subsets": [{"tau": 0.9, "column": "g", "value": "a"}]},
      "uqe":   {"distribution": {"kind": "exponential", "lam": 1.0}, "n": 51, "tau": 0.5,
                "repeats": 1000, "concentrations": [10, 100, 10000], "steps": 3000, "lr": 0.005}
    }

Relative paths are resolved against the config file's directory.  Every
command writes ``manifest-<command>.json`` with the config hash and the SHA-256
of each file it produced, so ``train`` and ``eval`` can share a directory.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import itertools
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import Dataset, Schema, SimSpec, generate_sim, load_csv, read_sim_sidecar, split, \
    write_csv, write_sim_sidecar
from .errors import ConfigError, InputError, NumericalError
from .experiments import constant_experiment, unconditional_experiment
from .metrics import build_report
from .model import ModelConfig, check_model, init_model, load_model, save_model
from .rates import RateConstraintSpec
from .train import DEFAULT_EVAL_TAUS, TrainConfig, evaluate, fit

log = logging.getLogger("qrlattice")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


class RunError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# Config plumbing
# ---------------------------------------------------------------------------


def config_hash(cfg: dict) -> str:
    text = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def load_config(path, seed=None) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    if seed is not None:
        cfg["seed"] = seed
    cfg.setdefault("seed", 0)
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed must be an integer")
    cfg["_base"] = str(Path(path).resolve().parent)
    return cfg


def _path(cfg, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else Path(cfg["_base"]) / p


def _public(cfg: dict) -> dict:
    return {k: v for k, v in cfg.items() if not k.startswith("_")}


def set_dotted(cfg: dict, key: str, value) -> None:
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"grid key {key!r} does not name a config field")
    node[parts[-1]] = value


def expand_grid(cfg: dict) -> list:
    """All ``(assignment, config)`` pairs of the ``grid`` section, in sorted key order."""
    grid = cfg.get("grid") or {}
    if not isinstance(grid, dict) or any(not isinstance(v, list) or not v for v in grid.values()):
        raise ConfigError("grid must map dotted config keys to nonempty lists")
    keys = sorted(grid)
    runs = []
    for values in itertools.product(*(grid[k] for k in keys)):
        run = copy.deepcopy(cfg)
        run.pop("grid", None)
        for k, v in zip(keys, values):
            set_dotted(run, k, v)
        runs.append((dict(zip(keys, values)), run))
    return runs


class Outputs:
    """Output directory that records a checksum for every file written."""

    def __init__(self, out, command, cfg):
        self.dir = Path(out)
        try:
            self.dir.mkdir(parents=True, exist_ok=True)
            probe = self.dir / ".write-test"
            probe.write_text("")
            probe.unlink()
        except OSError as exc:
            raise RunError(f"output directory {out} is not writable: {exc.strerror}", EXIT_CONFIG) from exc
        self.command = command
        self.hash = config_hash(_public(cfg))
        self.seed = cfg["seed"]
        self.files = []

    def path(self, name) -> Path:
        self.files.append(name)
        return self.dir / name

    def write_json(self, name, obj) -> None:
        obj = {**obj, "config_hash": self.hash}
        with open(self.path(name), "w", encoding="utf-8") as fh:
            json.dump(obj, fh, indent=1, sort_keys=True)
            fh.write("\n")

    def write_rows(self, name, header, rows) -> None:
        with open(self.path(name), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)

    def finish(self) -> None:
        sums = {n: hashlib.sha256((self.dir / n).read_bytes()).hexdigest() for n in sorted(set(self.files))}
        with open(self.dir / f"manifest-{self.command}.json", "w", encoding="utf-8") as fh:
            json.dump({"command": self.command, "config_hash": self.hash, "seed": self.seed, "files": sums},
                      fh, indent=1, sort_keys=True)
            fh.write("\n")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


def _sim_spec(cfg) -> tuple:
    d = dict(cfg["data"]["sim"])
    n_val, n_test = int(d.pop("n_val", d.get("n", 250))), int(d.pop("n_test", d.get("n", 250)))
    d.setdefault("seed", cfg["seed"])
    try:
        spec = SimSpec(**d)
    except TypeError as exc:
        raise ConfigError(f"data.sim: {exc}") from exc
    return spec, n_val, n_test


def _with_spec(data: Dataset, spec: SimSpec) -> Dataset:
    data.oracle, data.sim_spec = spec.true_quantile, spec
    return data


def simulated_splits(cfg) -> tuple:
    spec, n_val, n_test = _sim_spec(cfg)
    full = generate_sim(SimSpec(spec.family, spec.n + n_val + n_test, spec.seed, spec.a, spec.b,
                                spec.noise_scale))
    cuts = np.cumsum([spec.n, n_val])
    parts = np.split(np.arange(len(full)), cuts)
    return tuple(_with_spec(full.take(p), spec) if p.size else None for p in parts)


def _load(cfg, path, schema) -> Dataset:
    path = _path(cfg, path)
    spec = read_sim_sidecar(path)
    if schema is None:
        if spec is None:
            raise ConfigError(f"data.schema is required for {path} (no simulation sidecar)")
        schema = spec.schema()
    data = load_csv(path, schema)
    return _with_spec(data, spec) if spec is not None else data


def load_splits(cfg) -> tuple:
    """``(train, val, test)`` datasets; missing parts are ``None``."""
    d = cfg.get("data")
    if not isinstance(d, dict):
        raise ConfigError("config needs a data section")
    if "sim" in d:
        return simulated_splits(cfg)
    schema = d.get("schema")
    schema = Schema.from_dict(schema) if isinstance(schema, dict) else schema
    if "path" in d:
        full = _load(cfg, d["path"], schema)
        return split(full, d.get("split", (0.6, 0.2, 0.2)), d.get("split_mode", "iid"), seed=cfg["seed"])
    if "train" not in d and "test" not in d:
        raise ConfigError("data needs sim, path, or train/val/test files")
    return tuple(_load(cfg, d[k], schema) if d.get(k) else None for k in ("train", "val", "test"))


# ---------------------------------------------------------------------------
# Model and training
# ---------------------------------------------------------------------------


def model_config(cfg, train: Dataset) -> ModelConfig:
    d = dict(cfg.get("model") or {})
    if "features" not in d:
        feats = []
        lo_hi = train.sim_spec.domain if train.sim_spec is not None else None
        for j, c in enumerate(train.schema.features):
            if c.kind == "categorical":
                feats.append({"name": c.name, "kind": "categorical", "categories": list(c.categories)})
            else:
                lo, hi = lo_hi if lo_hi else (float(train.X[:, j].min()), float(train.X[:, j].max()))
                if hi <= lo:
                    hi = lo + 1.0
                feats.append({"name": c.name, "bounds": [lo, hi]})
        defaults = d.pop("feature_defaults", {})
        d["features"] = [{**defaults, **f} for f in feats]
    if "output_range" not in d:
        d["output_range"] = [float(v) for v in np.quantile(train.y, [0.01, 0.99])]
    try:
        return ModelConfig.from_dict(d)
    except TypeError as exc:
        raise ConfigError(f"model: {exc}") from exc


def train_config(cfg) -> TrainConfig:
    d = dict(cfg.get("train") or {})
    d.setdefault("seed", cfg["seed"])
    try:
        return TrainConfig.from_dict(d)
    except TypeError as exc:
        raise ConfigError(f"train: {exc}") from exc


def _check_features(model, data: Dataset) -> None:
    names = [f.name for f in model.config.features]
    if names != data.feature_names:
        raise ConfigError(f"model features {names} do not match data columns {data.feature_names}")
    for f, c in zip(model.config.features, data.schema.features):
        if f.kind != c.kind or (f.kind == "categorical" and list(f.categories) != list(c.categories)):
            raise ConfigError(f"feature {f.name!r} differs between model and data schema")


def train_one(cfg, train, val):
    mcfg = model_config(cfg, train)
    tcfg = train_config(cfg)
    model = init_model(mcfg, cfg["seed"])
    _check_features(model, train)
    best, hist = fit(model, train, val, tcfg)
    score = evaluate(best, val if val is not None else train, tcfg.eval_taus)[1]
    viol = hist.rows[hist.best_epoch - 1].get("max_violation") if hist.constrained else None
    return best, hist, score, viol


def _rank(score, viol):
    return (0.0 if viol is None else round(viol, 12), score)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_simulate(cfg, out: Outputs) -> int:
    if "sim" not in (cfg.get("data") or {}):
        raise ConfigError("simulate needs a data.sim section")
    spec, _, _ = _sim_spec(cfg)
    for name, part in zip(("train", "val", "test"), simulated_splits(cfg)):
        if part is None:
            continue
        path = out.path(f"{name}.csv")
        write_csv(part, path)
        side = write_sim_sidecar(spec, path)
        out.files.append(side.name)
        log.info("wrote %s (%d rows)", path, len(part))
    return EXIT_OK


def cmd_train(cfg, out: Outputs) -> int:
    train, val, _ = load_splits(cfg)
    if train is None:
        raise ConfigError("train needs training data")
    runs = expand_grid(cfg)
    results = []
    for i, (assign, run) in enumerate(runs):
        log.info("run %d/%d %s", i + 1, len(runs), assign or "")
        results.append((assign,) + train_one(run, train, val))
    best_i = min(range(len(results)), key=lambda i: _rank(results[i][3], results[i][4]))
    assign, model, hist, score, viol = results[best_i]

    save_model(model, out.path("model.json"))
    hist.to_csv(out.path("history.csv"))
    keys = sorted(cfg.get("grid") or {})
    rows = [[_fmt(a[k]) for k in keys] + [_fmt(s), _fmt(v), h.best_epoch, int(i == best_i)]
            for i, (a, _, h, s, v) in enumerate(results)]
    out.write_rows("grid.csv", keys + ["val_metric", "max_violation", "best_epoch", "selected"], rows)
    out.write_json("train_summary.json", {"selected": assign, "val_metric": score, "max_violation": viol,
                                          "best_epoch": hist.best_epoch, "model_fingerprint": model.fingerprint(),
                                          "error": hist.error})
    ok, worst = check_model(model)
    if not ok:
        raise RunError(f"trained model violates its constraints by {worst:g}", EXIT_NUMERICAL)
    if hist.error:
        out.finish()
        raise RunError(f"training stopped early: {hist.error}", EXIT_NUMERICAL)
    return EXIT_OK


def _subsets(cfg) -> list:
    ev = cfg.get("eval") or {}
    raw = ev.get("subsets", (cfg.get("train") or {}).get("constraints", []))
    return [RateConstraintSpec.from_dict(s) for s in raw]


def cmd_eval(cfg, out: Outputs) -> int:
    ev = cfg.get("eval") or {}
    mpath = _path(cfg, ev["model"]) if "model" in ev else out.dir / "model.json"
    try:
        model = load_model(mpath)
    except OSError as exc:
        raise ConfigError(f"cannot read model {mpath}: {exc.strerror}") from exc
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise InputError(f"model file {mpath} is malformed: {exc}") from exc
    _, _, test = load_splits(cfg)
    if test is None:
        raise ConfigError("eval needs test data")
    _check_features(model, test)

    taus = ev.get("taus", list(DEFAULT_EVAL_TAUS))
    crossing_taus = ev.get("crossing_taus", list(DEFAULT_EVAL_TAUS))
    report = build_report(model, test, taus, _subsets(cfg), crossing_taus=crossing_taus)
    out.write_json("report.json", report.to_dict())
    report.write_csv(out.path("report.csv"))

    curve_taus = np.asarray(ev.get("curve_taus", taus), dtype=float)
    spec = test.sim_spec
    if spec is not None and spec.dim == 1:
        X = np.linspace(*spec.domain, int(ev.get("curve_points", 101)))[:, None]
    else:
        X = test.X[: int(ev.get("curve_points", 101))]
    truth = test.oracle(X, curve_taus) if test.oracle is not None else None
    names = test.feature_names
    rows = []
    for i, x in enumerate(X):
        pred = model.predict_batch(np.repeat(x[None, :], curve_taus.size, axis=0), curve_taus)
        for j, t in enumerate(curve_taus):
            rows.append([_fmt(float(v)) for v in x] + [_fmt(float(t)), _fmt(pred[j]),
                                                      _fmt(None if truth is None else truth[i, j])])
    out.write_rows("curves.csv", names + ["tau", "prediction", "truth"], rows)
    return EXIT_OK


def cmd_uqe(cfg, out: Outputs) -> int:
    u = dict(cfg.get("uqe") or {})
    dist = u.pop("distribution", {"kind": "exponential", "lam": u.pop("lam", 1.0)})
    kw = {"n": int(u.get("n", 51)), "tau": float(u.get("tau", 0.5)), "repeats": int(u.get("repeats", 1000)),
          "concentrations": [float(c) for c in u.get("concentrations", (10, 30, 100, 300, 1000, 10000))],
          "steps": int(u.get("steps", 3000)), "lr": float(u.get("lr", 0.005))}
    kind = dist.get("kind")
    if kind == "exponential":
        res = unconditional_experiment(lam=float(dist.get("lam", 1.0)), seed=cfg["seed"], **kw)
    elif kind == "constant":
        res = constant_experiment(float(dist.get("value", 0.0)), **kw)
    else:
        raise ConfigError(f"unknown uqe distribution {kind!r}; choose exponential or constant")
    rows = res.rows()
    out.write_rows("uqe.csv", ["estimator", "concentration", "mse", "ci_half_width", "repeats"],
                   [[r["estimator"], _fmt(r["concentration"]), _fmt(r["mse"]), _fmt(r["ci_half_width"]),
                     r["repeats"]] for r in rows])
    labels = list(res.estimates)
    out.write_rows("uqe_estimates.csv", ["repeat"] + labels,
                   [[i] + [_fmt(res.estimates[k][i]) for k in labels] for i in range(kw["repeats"])])
    out.write_json("uqe.json", {"truth": res.truth, "rows": rows, **kw, "distribution": dist})
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "eval": cmd_eval, "uqe": cmd_uqe}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qrlattice", description="Lattice quantile regression experiments.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="run configuration (JSON)")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, args.seed)
        out = Outputs(args.out, args.command, cfg)
        code = COMMANDS[args.command](cfg, out)
        out.finish()
        return code
    except RunError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, KeyError, TypeError, ValueError) as exc:
        # malformed config values that slipped past the typed constructors
        print(f"error: {exc!r}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
