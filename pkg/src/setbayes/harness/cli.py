"""Command-line entry point.

Every subcommand resolves an :class:`ExperimentConfig` from ``--config``,
``--preset`` and ``--seed`` (flags override the file) and writes into
``--out``.  Exit codes: 0 success, 2 configuration error, 3 numerical
failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..enkf import enkf_analysis, run_filter, simulate_truth
from ..ennf import build_dataset, ennf_analysis, fine_tune, train_ennf
from ..errors import ConfigError, IoError, SetBayesError
from ..ggp import ggp_predict, train_ggp
from ..gp import gp_posterior, optimize_hyperparams
from ..numerics import Rng
from .benchmarks import (
    generate_regression_dataset,
    grid_rmse,
    multiscale_function,
    step_function,
)
from .config import EXPERIMENTS, ExperimentConfig, load_config
from .experiments import (
    _lorenz_setup,
    ennf_config_from,
    filter_error,
    ggp_config_from,
    gp_config_from,
    run_experiment,
)
from .persist import config_fingerprint, load_model, persist_model
from .report import csv_text

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("setbayes")


def _resolve(args, default_name: str) -> ExperimentConfig:
    if args.config:
        cfg = load_config(args.config)
        name = getattr(args, "experiment", None) or cfg.name
        doc = cfg.to_dict()
        doc["name"] = name
        if name != cfg.name:
            doc["settings"] = {}
    else:
        doc = {"name": getattr(args, "experiment", None) or default_name, "settings": {}}
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.preset is not None:
        doc["preset"] = args.preset
        if args.config and load_config(args.config).preset != args.preset:
            doc["settings"] = {}
    doc["out_dir"] = str(args.out)
    return ExperimentConfig.from_dict(doc)


def _write(path: Path, text: str):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _regression_data(cfg: ExperimentConfig):
    s = cfg.settings
    rng = Rng(cfg.seed, 0)
    if cfg.name == "ggp-step":
        data = generate_regression_dataset(step_function, 1, s["noise_sd"], rng.spawn(0), count=s["n_obs"])
        test_x = np.linspace(0.0, 1.0, s["n_test"])[:, None]
        truth = step_function(test_x[:, 0])
    elif cfg.name == "ggp-trig":
        data = generate_regression_dataset(multiscale_function, 2, s["noise_sd"], rng.spawn(0), per_axis=s["per_axis"])
        t = np.linspace(0.0, 1.0, s["n_slice"])
        test_x = np.column_stack([t, t])
        truth = multiscale_function(t, t)
    else:
        raise ConfigError(f"{cfg.name} is not a regression experiment")
    return rng, data, test_x, truth


def _prediction_table(test_x, mean, var, truth) -> str:
    cols = [f"x{k}" for k in range(test_x.shape[1])] + ["mean", "variance", "truth"]
    rows = [tuple(float(v) for v in (*x, m, s, t)) for x, m, s, t in zip(test_x, mean, var, truth)]
    return csv_text(cols, rows)


def cmd_ggp_train(args) -> int:
    cfg = _resolve(args, "ggp-step")
    rng, data, _, _ = _regression_data(cfg)
    params, history = train_ggp(data.X, data.Y, ggp_config_from(cfg.settings), rng.spawn(2))
    out = Path(args.out)
    persist_model(params, out / "ggp_model.json", config_fingerprint(cfg.to_dict()))
    _write(out / "config.json", cfg.to_json())
    _write(out / "ggp_loss.csv", csv_text(("epoch", "nll"), list(enumerate(history["epoch"]))))
    print(f"trained gGP on {len(data.Y)} observations; final epoch NLL {history['epoch'][-1]:.4f}")
    return EXIT_OK


def cmd_ggp_eval(args) -> int:
    cfg = _resolve(args, "ggp-step")
    _, data, test_x, truth = _regression_data(cfg)
    params = load_model(args.model)
    post = ggp_predict(params, data.X, data.Y, test_x, full_cov=False)
    out = Path(args.out)
    _write(out / "ggp_predictions.csv", _prediction_table(test_x, post.mean, post.variance, truth))
    print(f"gGP RMSE {grid_rmse(post.mean, truth):.6f} on {len(truth)} points")
    return EXIT_OK


def cmd_gp_baseline(args) -> int:
    cfg = _resolve(args, "ggp-step")
    rng, data, test_x, truth = _regression_data(cfg)
    kernel = optimize_hyperparams(data.X, data.Y, gp_config_from(cfg.settings), rng.spawn(1))
    post = gp_posterior(kernel, data.X, data.Y, test_x, full_cov=False)
    out = Path(args.out)
    persist_model(kernel, out / "gp_kernel.json", config_fingerprint(cfg.to_dict()))
    _write(out / "gp_predictions.csv", _prediction_table(test_x, post.mean, post.variance, truth))
    print(f"GP RMSE {grid_rmse(post.mean, truth):.6f} on {len(truth)} points")
    return EXIT_OK


def _filter_run(cfg: ExperimentConfig, analysis, N: int, out: Path, label: str) -> int:
    s = cfg.settings
    rhs, obs, z0, prior = _lorenz_setup(cfg)
    n_eval = s["train_windows"] + s["extra_windows"]
    truth = simulate_truth(rhs, z0, obs, n_eval, Rng(cfg.seed, 0))
    rows = []
    for seed in range(s["eval_seeds"]):
        Z0 = prior(N, Rng(cfg.seed, 5, N, seed))
        err, _ = filter_error(rhs, obs, Z0, truth, analysis, Rng(cfg.seed, 6, N, seed))
        rows.append((label, N, seed, err, n_eval))
    _write(out / f"{label}_rmse.csv", csv_text(("method", "ensemble_size", "seed", "rel_rmse", "windows"), rows))
    print(f"{label} N={N}: mean relative RMSE {np.mean([r[3] for r in rows]):.6f} over {len(rows)} priors")
    return EXIT_OK


def cmd_enkf_run(args) -> int:
    cfg = _resolve(args, "ennf-l63")
    return _filter_run(cfg, enkf_analysis, args.ensemble_size, Path(args.out), "enkf")


def cmd_ennf_train(args) -> int:
    cfg = _resolve(args, "ennf-l63")
    s = cfg.settings
    rhs, obs, z0, prior = _lorenz_setup(cfg)
    n_gen = int(round(s["gen_time"] / obs.obs_interval))
    truth = simulate_truth(rhs, z0, obs, n_gen, Rng(cfg.seed, 0))
    records = []
    for run in range(s["gen_runs"]):
        Z0 = prior(s["gen_ensemble"], Rng(cfg.seed, 1, run))
        recs, _ = run_filter(rhs, obs, Z0, truth, enkf_analysis, Rng(cfg.seed, 2, run))
        records.extend(recs)
    data = build_dataset(records)
    ecfg = ennf_config_from(s)
    params, history = train_ennf(data, ecfg, Rng(cfg.seed, 3))
    model = params
    if s["fine_tune_epochs"] > 0:
        model = [fine_tune(params, data, j, ecfg, Rng(cfg.seed, 4, j))[0] for j in range(z0.shape[0])]
    out = Path(args.out)
    persist_model(model, out / "ennf_model.json", config_fingerprint(cfg.to_dict()))
    _write(out / "config.json", cfg.to_json())
    _write(out / "ennf_loss.csv", csv_text(("epoch", "mse"), list(enumerate(history))))
    print(f"trained EnNF on {len(data)} pairs; final MSE {history[-1] if history else float('nan'):.6g}")
    return EXIT_OK


def cmd_ennf_run(args) -> int:
    cfg = _resolve(args, "ennf-l63")
    model = load_model(args.model)
    return _filter_run(cfg, lambda Z, D, Y, C: ennf_analysis(model, Z, D, Y), args.ensemble_size, Path(args.out), "ennf")


def cmd_experiment(args) -> int:
    args.experiment = args.name
    cfg = _resolve(args, args.name)
    report = run_experiment(cfg, args.out)
    print(json.dumps(report.summary, indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="setbayes", description="Set-based learned inference: gGP regression and ensemble neural filtering.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, experiments=None):
        p.add_argument("--config", type=Path, help="JSON experiment config")
        p.add_argument("--seed", type=int, help="unsigned 64-bit seed")
        p.add_argument("--preset", choices=("paper", "desk"), help="preset to start from (default desk)")
        p.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
        if experiments:
            p.add_argument("--experiment", choices=experiments, help="which benchmark supplies the data")

    regression = ("ggp-step", "ggp-trig")
    filtering = ("ennf-l63", "ennf-l96")

    p = sub.add_parser("ggp-train", help="train a generalized GP on a regression benchmark")
    common(p, regression)
    p.set_defaults(func=cmd_ggp_train)

    p = sub.add_parser("ggp-eval", help="evaluate a stored generalized GP")
    common(p, regression)
    p.add_argument("--model", type=Path, required=True)
    p.set_defaults(func=cmd_ggp_eval)

    p = sub.add_parser("gp-baseline", help="fit and evaluate the exact GP baseline")
    common(p, regression)
    p.set_defaults(func=cmd_gp_baseline)

    p = sub.add_parser("enkf-run", help="run the ensemble Kalman filter twin experiment")
    common(p, filtering)
    p.add_argument("--ensemble-size", type=int, default=2)
    p.set_defaults(func=cmd_enkf_run)

    p = sub.add_parser("ennf-train", help="generate EnKF records and train the neural filter")
    common(p, filtering)
    p.set_defaults(func=cmd_ennf_train)

    p = sub.add_parser("ennf-run", help="run a stored neural filter in the twin experiment")
    common(p, filtering)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--ensemble-size", type=int, default=2)
    p.set_defaults(func=cmd_ennf_run)

    p = sub.add_parser("experiment", help="run a full experiment and write its report")
    p.add_argument("name", choices=EXPERIMENTS)
    common(p)
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IoError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (SetBayesError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
