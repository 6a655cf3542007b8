import csv
import json

import pytest

from setbayes.harness.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, build_parser, main

TINY_STEP = {"n_tasks": 64, "epochs": 1, "covariance_epochs": 1, "gp_starts": 1, "gp_iterations": 10, "n_test": 20}
TINY_L63 = {"gen_runs": 1, "gen_time": 2.0, "epochs": 2, "train_windows": 4, "extra_windows": 2, "eval_seeds": 2, "eval_sizes": [2]}


def write_config(tmp_path, name, settings, seed=0):
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps({"name": name, "seed": seed, "settings": settings}))
    return str(path)


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


class TestParser:
    def test_subcommands(self):
        sub = next(a for a in build_parser()._actions if a.dest == "command")
        assert set(sub.choices) == {"ggp-train", "ggp-eval", "gp-baseline", "enkf-run", "ennf-train", "ennf-run", "experiment"}

    def test_help_exits_cleanly(self, capsys):
        assert main(["--help"]) == EXIT_OK
        assert "ennf-train" in capsys.readouterr().out

    @pytest.mark.parametrize(
        "argv",
        [
            [],
            ["ggp-train", "--preset", "huge"],
            ["experiment", "nope"],
            ["enkf-run", "--ensemble-size", "two"],
            ["ggp-eval"],
        ],
    )
    def test_usage_errors(self, argv):
        assert main(argv) == EXIT_CONFIG


class TestErrors:
    def test_bad_config_value(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"name": "ggp-step", "settings": {"epochs": "many"}}))
        assert main(["ggp-train", "--config", str(path), "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_regression_command_on_filter_config(self, tmp_path):
        cfg = write_config(tmp_path, "ennf-l63", {})
        assert main(["gp-baseline", "--config", cfg, "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_missing_model(self, tmp_path):
        assert main(["ggp-eval", "--model", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == EXIT_IO

    def test_missing_config(self, tmp_path):
        assert main(["enkf-run", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == EXIT_IO


class TestRegressionCommands:
    def test_train_then_eval(self, tmp_path, capsys):
        cfg = write_config(tmp_path, "ggp-step", TINY_STEP)
        out = tmp_path / "run"
        assert main(["ggp-train", "--config", cfg, "--out", str(out)]) == EXIT_OK
        assert (out / "ggp_model.json").exists() and (out / "ggp_loss.csv").exists()
        assert json.loads((out / "config.json").read_text())["settings"]["n_tasks"] == 64
        model = str(out / "ggp_model.json")
        assert main(["ggp-eval", "--config", cfg, "--model", model, "--out", str(out)]) == EXIT_OK
        rows = read_rows(out / "ggp_predictions.csv")
        assert len(rows) == 20 and set(rows[0]) == {"x0", "mean", "variance", "truth"}
        assert "gGP RMSE" in capsys.readouterr().out

    def test_gp_baseline(self, tmp_path):
        cfg = write_config(tmp_path, "ggp-step", TINY_STEP)
        assert main(["gp-baseline", "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK
        assert len(read_rows(tmp_path / "gp_predictions.csv")) == 20
        assert (tmp_path / "gp_kernel.json").exists()

    def test_seed_flag_overrides_file(self, tmp_path):
        cfg = write_config(tmp_path, "ggp-step", TINY_STEP, seed=1)
        assert main(["ggp-train", "--config", cfg, "--seed", "7", "--out", str(tmp_path)]) == EXIT_OK
        assert json.loads((tmp_path / "config.json").read_text())["seed"] == 7


class TestFilterCommands:
    def test_enkf_run(self, tmp_path):
        cfg = write_config(tmp_path, "ennf-l63", TINY_L63)
        assert main(["enkf-run", "--config", cfg, "--ensemble-size", "4", "--out", str(tmp_path)]) == EXIT_OK
        rows = read_rows(tmp_path / "enkf_rmse.csv")
        assert [r["ensemble_size"] for r in rows] == ["4", "4"]
        assert all(r["windows"] == "6" for r in rows)

    def test_train_then_run(self, tmp_path):
        cfg = write_config(tmp_path, "ennf-l63", TINY_L63)
        out = tmp_path / "run"
        assert main(["ennf-train", "--config", cfg, "--out", str(out)]) == EXIT_OK
        model = str(out / "ennf_model.json")
        assert main(["ennf-run", "--config", cfg, "--model", model, "--out", str(out)]) == EXIT_OK
        assert len(read_rows(out / "ennf_rmse.csv")) == 2

    def test_matches_experiment_rows(self, tmp_path):
        # the standalone baseline uses the same random streams as the full experiment
        cfg = write_config(tmp_path, "ennf-l63", TINY_L63)
        assert main(["enkf-run", "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK
        assert main(["experiment", "ennf-l63", "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK
        full = [r for r in read_rows(tmp_path / "ennf-l63" / "rmse.csv") if r["method"] == "enkf"]
        assert full == read_rows(tmp_path / "enkf_rmse.csv")


def test_experiment_command(tmp_path, capsys):
    cfg = write_config(tmp_path, "ennf-l63", TINY_L63)
    assert main(["experiment", "ennf-l63", "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["windows"] == 6
    assert (tmp_path / "ennf-l63" / "rmse_vs_n.svg").exists()
