"""End-to-end experiment pipelines: data generation, training, evaluation, report.

Each experiment writes into ``<out_dir>/<name>/``:

- ``config.json``: the fully resolved configuration
- a CSV table (``regression.csv`` or ``rmse.csv``), ``summary.json`` and SVG plots
- trained models under ``models/``

A failure leaves a ``FAILED`` marker holding the error next to whatever
was already written.
"""

from __future__ import annotations

import logging
import math
import time
from functools import partial
from pathlib import Path

import numpy as np

from ..enkf import enkf_analysis, init_ensemble, run_filter, simulate_truth
from ..errors import NonFiniteState
from ..ennf import EnnfConfig, build_dataset, ennf_analysis, fine_tune, train_ennf
from ..ggp import GgpConfig, ggp_predict, train_ggp
from ..gp import GpOptConfig, gp_posterior, optimize_hyperparams
from ..lorenz import (
    L63_BASELINE_INIT,
    L63_OBSERVATION,
    L63_PRIOR_VAR,
    L63_TRUE_INIT,
    L96_OBSERVATION,
    Lorenz63Params,
    Lorenz96Params,
    l63_rhs,
    l96_rhs,
    l96_spinup,
)
from ..numerics import Rng
from .benchmarks import (
    generate_regression_dataset,
    grid_rmse,
    mean_nlpd,
    multiscale_function,
    relative_rmse,
    step_function,
)
from .config import ExperimentConfig
from .persist import config_fingerprint, persist_model, save_training_set
from .report import REGRESSION_HEADER, RMSE_HEADER, Curve, MetricsReport, emit_report

__all__ = ["run_experiment", "filter_error", "ggp_config_from", "gp_config_from", "ennf_config_from"]

log = logging.getLogger(__name__)


def ggp_config_from(s) -> GgpConfig:
    return GgpConfig(
        rank=s["rank"],
        hidden=tuple(s["hidden"]),
        self_width=s["self_width"],
        int_width=s["int_width"],
        data_width=s["data_width"],
        m_prime=s["m_prime"],
        n_tasks=s["n_tasks"],
        batch_size=s["batch_size"],
        epochs=s["epochs"],
        lr=s["lr"],
        covariance_epochs=s["covariance_epochs"],
        low_rank_init_scale=s["low_rank_init_scale"],
    )


def gp_config_from(s) -> GpOptConfig:
    return GpOptConfig(n_starts=s["gp_starts"], iterations=s["gp_iterations"], lr=s["gp_lr"])


def ennf_config_from(s) -> EnnfConfig:
    return EnnfConfig(
        hidden=tuple(s["hidden"]),
        self_width=s["self_width"],
        int_width=s["int_width"],
        epochs=s["epochs"],
        batch_size=s["batch_size"],
        lr=s["lr"],
        residual=s["residual"],
        fine_tune_epochs=s["fine_tune_epochs"],
        cosine_decay=s["cosine_decay"],
        anomaly_features=s["anomaly_features"],
    )


# --------------------------------------------------------------------------
# regression benchmarks


def _regression(config: ExperimentConfig, out: Path) -> MetricsReport:
    s = config.settings
    step = config.name == "ggp-step"
    report = MetricsReport(config.name, REGRESSION_HEADER)
    fingerprint = config_fingerprint(config.to_dict())
    if step:
        test_x = np.linspace(0.0, 1.0, s["n_test"])[:, None]
        truth = step_function(test_x[:, 0])
    else:
        t = np.linspace(0.0, 1.0, s["n_slice"])
        test_x = np.column_stack([t, t])
        truth = multiscale_function(t, t)

    for rep in range(s["replicates"]):
        rng = Rng(config.seed, rep)
        if step:
            data = generate_regression_dataset(step_function, 1, s["noise_sd"], rng.spawn(0), count=s["n_obs"])
        else:
            data = generate_regression_dataset(multiscale_function, 2, s["noise_sd"], rng.spawn(0), per_axis=s["per_axis"])

        kernel = optimize_hyperparams(data.X, data.Y, gp_config_from(s), rng.spawn(1))
        gp = gp_posterior(kernel, data.X, data.Y, test_x, full_cov=False)
        params, history = train_ggp(data.X, data.Y, ggp_config_from(s), rng.spawn(2))
        ggp = ggp_predict(params, data.X, data.Y, test_x, full_cov=False)

        n = len(truth)
        report.rows.append(("gp", rep, grid_rmse(gp.mean, truth), mean_nlpd(gp.mean, gp.variance, truth), n))
        report.rows.append(("ggp", rep, grid_rmse(ggp.mean, truth), mean_nlpd(ggp.mean, ggp.variance, truth), n))
        persist_model(params, out / "models" / f"ggp_rep{rep}.json", fingerprint)
        persist_model(kernel, out / "models" / f"gp_rep{rep}.json", fingerprint)
        if rep == 0:
            x = test_x[:, 0]
            report.plots["prediction"] = {
                "curves": [Curve("truth", x, truth), Curve("GP", x, gp.mean), Curve("gGP", x, ggp.mean)],
                "title": "posterior mean" if step else "posterior mean on the diagonal x1 = x2",
                "xlabel": "x" if step else "x1 = x2",
                "ylabel": "f",
            }
            report.plots["ggp_loss"] = {
                "curves": [Curve("NLL per task", np.arange(len(history["epoch"])), np.array(history["epoch"]))],
                "title": "gGP training loss",
                "xlabel": "epoch",
                "ylabel": "mean NLL",
            }
        log.info("%s replicate %d: gp %.4f ggp %.4f", config.name, rep, report.rows[-2][2], report.rows[-1][2])

    seeds = list(range(s["replicates"]))
    report.summary = {
        "seed": config.seed,
        "replicates": seeds,
        "points": len(truth),
        "gp_rmse": report.mean("rmse", method="gp"),
        "ggp_rmse": report.mean("rmse", method="ggp"),
        "gp_nlpd": report.mean("nlpd", method="gp"),
        "ggp_nlpd": report.mean("nlpd", method="ggp"),
    }
    return report


# --------------------------------------------------------------------------
# filtering benchmarks


def _lorenz_setup(config: ExperimentConfig):
    if config.name == "ennf-l63":
        rhs = partial(l63_rhs, Lorenz63Params())
        obs = L63_OBSERVATION
        z0 = L63_TRUE_INIT.copy()

        def prior(N, rng):
            return init_ensemble(L63_BASELINE_INIT, L63_PRIOR_VAR, N, rng)

    else:
        rhs = partial(l96_rhs, Lorenz96Params())
        obs = L96_OBSERVATION
        z0 = l96_spinup()

        def prior(N, rng):
            baseline = z0 + rng.spawn(0).normal(z0.shape)
            return init_ensemble(baseline, np.ones_like(z0), N, rng.spawn(1))

    return rhs, obs, z0, prior


def filter_error(rhs, obs, Z0, truth, analysis, rng: Rng):
    """Relative RMSE of the posterior mean, and the mean trajectory.

    A filter whose ensemble blows up to a non-finite state has unbounded
    error: this returns ``(inf, None)`` instead of raising.
    """
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            _, means = run_filter(rhs, obs, Z0, truth, analysis, rng, keep_records=False)
    except NonFiniteState:
        return math.inf, None
    if not np.all(np.isfinite(means)):
        return math.inf, None
    return relative_rmse(means, truth.states), means


def _gaps(values) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    return np.where(np.isfinite(v), v, np.nan)


def _table_value(v: float):
    # JSON has no infinity; a diverged cell is reported as null
    return v if math.isfinite(v) else None


def _filtering(config: ExperimentConfig, out: Path) -> MetricsReport:
    s = config.settings
    rhs, obs, z0, prior = _lorenz_setup(config)
    fingerprint = config_fingerprint(config.to_dict())
    n_eval = s["train_windows"] + s["extra_windows"]
    n_gen = int(round(s["gen_time"] / obs.obs_interval))
    if n_gen > n_eval:
        raise ValueError("generation period exceeds the evaluation horizon")
    truth = simulate_truth(rhs, z0, obs, n_eval, Rng(config.seed, 0))

    records = []
    for run in range(s["gen_runs"]):
        Z0 = prior(s["gen_ensemble"], Rng(config.seed, 1, run))
        recs, _ = run_filter(rhs, obs, Z0, truth, enkf_analysis, Rng(config.seed, 2, run), n_windows=n_gen)
        records.extend(recs)
    data = build_dataset(records)
    save_training_set(data, out / "training_pairs.npz")

    ecfg = ennf_config_from(s)
    params, history = train_ennf(data, ecfg, Rng(config.seed, 3))
    persist_model(params, out / "models" / "ennf_shared.json", fingerprint)
    filt = params
    if s["fine_tune_epochs"] > 0:
        filt = []
        for j in range(z0.shape[0]):
            tuned, _ = fine_tune(params, data, j, ecfg, Rng(config.seed, 4, j))
            filt.append(tuned)
        persist_model(filt, out / "models" / "ennf_per_variable.json", fingerprint)

    methods = {
        "enkf": enkf_analysis,
        "ennf": lambda Z, D, Y, C: ennf_analysis(filt, Z, D, Y),
    }
    report = MetricsReport(config.name, RMSE_HEADER)
    show_var = 0
    trajectories = {}
    for N in s["eval_sizes"]:
        for seed in range(s["eval_seeds"]):
            Z0 = prior(N, Rng(config.seed, 5, N, seed))
            for name, fn in methods.items():
                err, means = filter_error(rhs, obs, Z0, truth, fn, Rng(config.seed, 6, N, seed))
                report.rows.append((name, N, seed, err, n_eval))
                if seed == 0 and N == s["eval_sizes"][0] and means is not None:
                    trajectories[name] = means[:, show_var]

    seeds = list(range(s["eval_seeds"]))
    sizes = list(s["eval_sizes"])
    table = {
        name: {str(N): report.mean("rel_rmse", method=name, ensemble_size=N) for N in sizes} for name in methods
    }
    diverged = {
        name: {str(N): sum(not math.isfinite(v) for v in report.column("rel_rmse", method=name, ensemble_size=N)) for N in sizes}
        for name in methods
    }
    report.summary = {
        "seed": config.seed,
        "eval_seeds": seeds,
        "windows": n_eval,
        "training_pairs": len(data),
        "mean_rel_rmse": {name: {N: _table_value(v) for N, v in row.items()} for name, row in table.items()},
        "spread": {name: _table_value(max(v.values()) - min(v.values())) for name, v in table.items()},
        "diverged_runs": diverged,
    }
    report.plots["rmse_vs_n"] = {
        # a diverged cell is left as a gap
        "curves": [
            Curve(name.upper(), np.array(sizes), _gaps([table[name][str(N)] for N in sizes]))
            for name in methods
        ],
        "title": f"relative RMSE over {n_eval} windows, mean of {len(seeds)} priors",
        "xlabel": "ensemble size N",
        "ylabel": "relative RMSE",
    }
    report.plots["trajectory"] = {
        "curves": [Curve("truth", truth.times, truth.states[:, show_var])]
        + [Curve(name.upper(), truth.times, traj) for name, traj in trajectories.items()],
        "title": f"posterior mean of state {show_var} at N = {sizes[0]}",
        "xlabel": "t",
        "ylabel": "z",
    }
    report.plots["ennf_loss"] = {
        "curves": [Curve("MSE", np.arange(len(history)), np.array(history))],
        "title": "neural filter training loss",
        "xlabel": "epoch",
        "ylabel": "standardised MSE",
        "logy": True,
    }
    return report


# --------------------------------------------------------------------------


def run_experiment(config: ExperimentConfig, out_dir=None) -> MetricsReport:
    """Run one named experiment and write its artifacts."""
    out = Path(out_dir if out_dir is not None else config.out_dir) / config.name
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(config.to_json())
    marker = out / "FAILED"
    if marker.exists():
        marker.unlink()
    start = time.perf_counter()
    try:
        if config.name.startswith("ggp"):
            report = _regression(config, out)
            table = "regression.csv"
        else:
            report = _filtering(config, out)
            table = "rmse.csv"
        report.runtime_s = time.perf_counter() - start
        emit_report(report, out, table)
    except BaseException as exc:
        marker.write_text(f"{type(exc).__name__}: {exc}\n")
        raise
    return report
