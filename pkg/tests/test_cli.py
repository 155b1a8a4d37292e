import csv
import json

import numpy as np
import pytest

from qrlattice import cli
from qrlattice.data import SimSpec, generate_sim, load_csv, read_sim_sidecar
from qrlattice.metrics import build_report, sample_quantile
from qrlattice.model import check_model, load_model


def write_cfg(path, cfg):
    path.write_text(json.dumps(cfg), encoding="utf-8")
    return str(path)


def rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.reader(fh))


SIM = {"sim": {"family": "sine-skew", "n": 120, "n_val": 60, "n_test": 150, "a": 1, "b": 7}}
SMALL = {"tau_knots": 3, "feature_defaults": {"keypoints": 2, "lattice_knots": 6}}
FAST = {"epochs": 3, "batch_size": 32, "learning_rate": 0.02}


class TestSimulate:
    def test_files_and_determinism(self, tmp_path):
        cfg = write_cfg(tmp_path / "c.json", {"seed": 7, "data": {"sim": {"n": 250, "n_val": 0, "n_test": 0,
                                                                            "a": 1, "b": 7}}})
        assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
        assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
        a = (tmp_path / "a" / "train.csv").read_bytes()
        assert a == (tmp_path / "b" / "train.csv").read_bytes()
        assert len(a.decode().splitlines()) == 251
        assert not (tmp_path / "a" / "val.csv").exists()
        assert read_sim_sidecar(tmp_path / "a" / "train.csv") == SimSpec(n=250, seed=7, a=1.0, b=7.0)

    def test_matches_library(self, tmp_path):
        cfg = write_cfg(tmp_path / "c.json", {"seed": 2, "data": SIM})
        cli.main(["simulate", "--config", cfg, "--out", str(tmp_path)])
        spec = read_sim_sidecar(tmp_path / "train.csv")
        full = generate_sim(SimSpec("sine-skew", 330, 2, 1.0, 7.0))
        test = load_csv(tmp_path / "test.csv", spec.schema())
        np.testing.assert_array_equal(test.y, full.y[180:])

    def test_ackley_has_nine_columns(self, tmp_path):
        cfg = write_cfg(tmp_path / "c.json", {"data": {"sim": {"family": "ackley", "n": 5}}})
        cli.main(["simulate", "--config", cfg, "--out", str(tmp_path)])
        assert rows(tmp_path / "train.csv")[0] == [f"x{i}" for i in range(1, 10)] + ["y"]

    def test_seed_flag_overrides(self, tmp_path):
        cfg = write_cfg(tmp_path / "c.json", {"seed": 1, "data": {"sim": {"n": 20, "n_val": 0, "n_test": 0}}})
        cli.main(["simulate", "--config", cfg, "--seed", "9", "--out", str(tmp_path / "o")])
        assert read_sim_sidecar(tmp_path / "o" / "train.csv").seed == 9

    def test_invalid_family(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path / "c.json", {"data": {"sim": {"family": "rosenbrock"}}})
        assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path)]) == 2
        assert "rosenbrock" in capsys.readouterr().err

    def test_unwritable_output(self, tmp_path):
        cfg = write_cfg(tmp_path / "c.json", {"data": SIM})
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert cli.main(["simulate", "--config", cfg, "--out", str(blocker / "sub")]) == 2


class TestTrainEval:
    @pytest.fixture
    def run(self, tmp_path):
        cfg = {"seed": 4, "data": SIM, "model": SMALL, "train": FAST,
               "grid": {"train.learning_rate": [0.01, 0.05]}}
        return tmp_path, write_cfg(tmp_path / "c.json", cfg)

    def test_train_outputs(self, run):
        tmp, cfg = run
        assert cli.main(["train", "--config", cfg, "--out", str(tmp / "o")]) == 0
        grid = rows(tmp / "o" / "grid.csv")
        assert grid[0][0] == "train.learning_rate" and len(grid) == 3
        assert sum(int(r[-1]) for r in grid[1:]) == 1
        model = load_model(tmp / "o" / "model.json")
        assert check_model(model)[0]
        hist = rows(tmp / "o" / "history.csv")
        assert hist[0] == ["epoch", "loss", "val_metric"] and len(hist) == 4
        manifest = json.loads((tmp / "o" / "manifest-train.json").read_text())
        assert set(manifest["files"]) == {"model.json", "history.csv", "grid.csv", "train_summary.json"}

    def test_rerun_is_identical(self, run):
        tmp, cfg = run
        cli.main(["train", "--config", cfg, "--out", str(tmp / "a")])
        cli.main(["train", "--config", cfg, "--out", str(tmp / "b")])
        assert (tmp / "a" / "model.json").read_bytes() == (tmp / "b" / "model.json").read_bytes()
        assert json.loads((tmp / "a" / "manifest-train.json").read_text()) == \
            json.loads((tmp / "b" / "manifest-train.json").read_text())

    def test_config_hash_changes_with_seed(self, run):
        tmp, cfg = run
        cli.main(["train", "--config", cfg, "--out", str(tmp / "a")])
        cli.main(["train", "--config", cfg, "--seed", "5", "--out", str(tmp / "b")])
        ha = json.loads((tmp / "a" / "train_summary.json").read_text())["config_hash"]
        hb = json.loads((tmp / "b" / "train_summary.json").read_text())["config_hash"]
        assert ha != hb

    def test_eval_matches_library(self, run):
        tmp, cfg = run
        out = tmp / "o"
        cli.main(["train", "--config", cfg, "--out", str(out)])
        assert cli.main(["eval", "--config", cfg, "--out", str(out)]) == 0
        rep = json.loads((out / "report.json").read_text())
        assert rep["crossing_rate"] == 0.0
        model = load_model(out / "model.json")
        _, _, test = cli.load_splits(cli.load_config(cfg))
        lib = build_report(model, test)
        assert rep["pinball_per_tau"] == lib.pinball_per_tau
        assert rep["quantile_mse"] == lib.quantile_mse
        curves = rows(out / "curves.csv")
        assert curves[0] == ["x", "tau", "prediction", "truth"]
        assert len(curves) == 1 + 101 * 99

    def test_constraints_add_violation_column(self, tmp_path):
        cons = [{"tau": 0.5, "eps": 0.05}]
        cfg = write_cfg(tmp_path / "c.json", {"data": SIM, "model": SMALL, "train": {**FAST, "constraints": cons}})
        assert cli.main(["train", "--config", cfg, "--out", str(tmp_path)]) == 0
        assert rows(tmp_path / "history.csv")[0][-1] == "max_violation"
        assert cli.main(["eval", "--config", cfg, "--out", str(tmp_path)]) == 0
        rep = json.loads((tmp_path / "report.json").read_text())
        assert set(rep["subset_rates"]) == {"all@0.5"}

    def test_csv_source_with_schema(self, tmp_path):
        lines = ["x,g,y"] + [f"{i / 40},{'ab'[i % 2]},{i / 40 + (i % 2)}" for i in range(40)]
        (tmp_path / "d.csv").write_text("\n".join(lines) + "\n")
        schema = {"features": [{"name": "x"}, {"name": "g", "kind": "categorical", "categories": ["a", "b"]}]}
        cfg = write_cfg(tmp_path / "c.json", {"data": {"path": "d.csv", "schema": schema, "split": [0.5, 0.25, 0.25]},
                                              "train": FAST})
        assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
        assert cli.main(["eval", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
        rep = json.loads((tmp_path / "o" / "report.json").read_text())
        assert rep["quantile_mse"] is None

    def test_model_schema_mismatch(self, run, tmp_path):
        tmp, cfg = run
        cli.main(["train", "--config", cfg, "--out", str(tmp / "o")])
        other = write_cfg(tmp_path / "g.json", {"data": {"sim": {"family": "griewank", "n": 30}},
                                                 "eval": {"model": str(tmp / "o" / "model.json")}})
        assert cli.main(["eval", "--config", other, "--out", str(tmp / "e")]) == 2

    def test_numerical_failure_exit_code(self, run, monkeypatch):
        from qrlattice import train as train_mod
        tmp, cfg = run
        monkeypatch.setattr(train_mod, "expected_pinball_batch", lambda *a, **k: (np.nan, None))
        assert cli.main(["train", "--config", cfg, "--out", str(tmp / "o")]) == 3

    def test_bad_config_values(self, tmp_path):
        for bad in ({"data": SIM, "train": {"epochs": 0}},
                    {"data": SIM, "train": {"nonsense": 1}},
                    {"data": SIM, "grid": {"train.epochs": []}},
                    {"seed": "x", "data": SIM},
                    {"model": {}}):
            cfg = write_cfg(tmp_path / "c.json", bad)
            assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == 2

    def test_malformed_json(self, tmp_path):
        (tmp_path / "c.json").write_text("{not json")
        assert cli.main(["train", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path)]) == 2

    def test_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            cli.main(["fly", "--config", "x", "--out", str(tmp_path)])
        assert exc.value.code == 2


class TestUqe:
    def test_rows_and_sample_column(self, tmp_path):
        cfg = write_cfg(tmp_path / "c.json", {"seed": 3, "uqe": {"n": 21, "repeats": 8, "concentrations": [10, 10000],
                                                                  "steps": 30}})
        assert cli.main(["uqe", "--config", cfg, "--out", str(tmp_path)]) == 0
        table = rows(tmp_path / "uqe.csv")
        assert [r[:2] for r in table[1:]] == [["sample", ""], ["harrell_davis", ""], ["linear", "10.0"],
                                              ["linear", "10000.0"]]
        from qrlattice.data import sample_exponential
        Y, _ = sample_exponential(1.0, (8, 21), seed=3)
        est = rows(tmp_path / "uqe_estimates.csv")
        assert est[0][:3] == ["repeat", "sample", "harrell_davis"]
        assert [float(r[1]) for r in est[1:]] == [sample_quantile(y, 0.5) for y in Y]

    def test_constant_distribution(self, tmp_path):
        cfg = write_cfg(tmp_path / "c.json", {"uqe": {"distribution": {"kind": "constant", "value": 1.5},
                                                     "n": 11, "repeats": 4, "concentrations": [30], "steps": 20}})
        assert cli.main(["uqe", "--config", cfg, "--out", str(tmp_path)]) == 0
        assert all(float(r[2]) < 1e-24 for r in rows(tmp_path / "uqe.csv")[1:])

    def test_unknown_distribution(self, tmp_path):
        cfg = write_cfg(tmp_path / "c.json", {"uqe": {"distribution": {"kind": "cauchy"}}})
        assert cli.main(["uqe", "--config", cfg, "--out", str(tmp_path)]) == 2
