"""Stochastic ensemble Kalman filter with perturbed observations.

An ensemble is an ``(n, N)`` array whose columns are state realizations.
Observation-space blocks (perturbed observations ``D`` and predicted
observations ``H(Z)``) are ``(m, N)`` with matching columns.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DegenerateSpan, EnsembleTooSmall, ShapeMismatch
from .lorenz import ObservationModel, observe_truth, propagate
from .numerics import Rng, solve_psd

__all__ = [
    "AssimilationRecord",
    "TruthRun",
    "ensemble_statistics",
    "perturb_observations",
    "enkf_analysis",
    "init_ensemble",
    "simulate_truth",
    "run_filter",
    "subspace_residual",
]


def _ensemble(Z, name="ensemble") -> np.ndarray:
    Z = np.asarray(Z, dtype=float)
    if Z.ndim != 2:
        raise ShapeMismatch(f"{name} must be (n, N), got shape {Z.shape}")
    return Z


@dataclass
class AssimilationRecord:
    """One analysis step: the tuple consumed by neural-filter training."""

    time: float
    prior: np.ndarray
    perturbed_obs: np.ndarray
    predicted_obs: np.ndarray
    posterior: np.ndarray

    def __post_init__(self):
        N = self.prior.shape[1]
        if not (self.posterior.shape == self.prior.shape and self.perturbed_obs.shape[1] == N):
            raise ShapeMismatch("record blocks disagree on ensemble size")
        if self.perturbed_obs.shape != self.predicted_obs.shape:
            raise ShapeMismatch("observation blocks disagree in shape")


def ensemble_statistics(Z, predicted_obs):
    """Sample mean and the cross/observation covariances ``(z_bar, C_zy, C_yy)``."""
    Z = _ensemble(Z)
    Y = _ensemble(predicted_obs, "predicted observations")
    N = Z.shape[1]
    if N < 2:
        raise EnsembleTooSmall("ensemble covariances need at least two members")
    if Y.shape[1] != N:
        raise ShapeMismatch("state and observation ensembles differ in size")
    z_bar = Z.mean(axis=1)
    Az = Z - z_bar[:, None]
    Ay = Y - Y.mean(axis=1, keepdims=True)
    return z_bar, Az @ Ay.T / (N - 1), Ay @ Ay.T / (N - 1)


def perturb_observations(d, cov_dd, N: int, rng: Rng) -> np.ndarray:
    """``N`` columns ``d + eps_i`` with ``eps_i ~ N(0, C_dd)``."""
    d = np.asarray(d, dtype=float)
    cov_dd = np.asarray(cov_dd, dtype=float)
    var = np.diag(cov_dd) if cov_dd.ndim == 2 else cov_dd
    if var.shape != d.shape:
        raise ShapeMismatch("observation and covariance sizes differ")
    return d[:, None] + np.sqrt(var)[:, None] * rng.normal((d.shape[0], N))


def enkf_analysis(prior, D, predicted_obs, cov_dd, sample_obs_cov: bool = False) -> np.ndarray:
    """Update every member with ``K (d_i - H z_i)``, ``K = C_zy (C_yy + C_dd)^-1``.

    ``sample_obs_cov`` replaces the model ``C_dd`` by the sample covariance of
    the perturbations in ``D``.
    """
    Z = _ensemble(prior, "prior")
    D = _ensemble(D, "perturbed observations")
    Y = _ensemble(predicted_obs, "predicted observations")
    if D.shape != Y.shape or D.shape[1] != Z.shape[1]:
        raise ShapeMismatch("prior, D and H(Z) must share the ensemble size")
    _, C_zy, C_yy = ensemble_statistics(Z, Y)
    if sample_obs_cov:
        E = D - D.mean(axis=1, keepdims=True)
        C_dd = E @ E.T / (D.shape[1] - 1)
    else:
        C_dd = np.asarray(cov_dd, dtype=float)
        if C_dd.ndim == 1:
            C_dd = np.diag(C_dd)
    S = C_yy + C_dd
    # K (D - Y) = C_zy S^-1 (D - Y); solve against the innovations directly
    return Z + C_zy @ solve_psd(S, D - Y)


def init_ensemble(mean, cov_diag, N: int, rng: Rng) -> np.ndarray:
    """``N`` independent draws from ``N(mean, diag(cov_diag))`` as columns."""
    mean = np.asarray(mean, dtype=float)
    var = np.broadcast_to(np.asarray(cov_diag, dtype=float), mean.shape)
    if N < 2:
        raise EnsembleTooSmall("an ensemble needs at least two members")
    if np.any(var < 0):
        raise ValueError("variances must be non-negative")
    return mean[:, None] + np.sqrt(var)[:, None] * rng.normal((mean.shape[0], N))


@dataclass
class TruthRun:
    """Hidden truth and synthetic observations at every observation time."""

    times: np.ndarray
    states: np.ndarray
    observations: np.ndarray
    noiseless: np.ndarray
    obs_variance: np.ndarray

    def __len__(self):
        return len(self.times)

    def window(self, k: int):
        return self.observations[k], np.diag(self.obs_variance[k])


def simulate_truth(rhs: Callable, z0, obs_model: ObservationModel, n_windows: int, rng: Rng) -> TruthRun:
    """Integrate the truth and observe it at ``k * obs_interval``, ``k = 1..n_windows``."""
    z = np.asarray(z0, dtype=float)
    states, obs, clean, var = [], [], [], []
    for _ in range(n_windows):
        z = propagate(rhs, z, obs_model.steps_per_obs, obs_model.dt)
        d, d_star, C = observe_truth(obs_model, z, rng)
        states.append(z)
        obs.append(d)
        clean.append(d_star)
        var.append(np.diag(C))
    times = obs_model.obs_interval * np.arange(1, n_windows + 1)
    return TruthRun(times, np.array(states), np.array(obs), np.array(clean), np.array(var))


AnalysisFn = Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def run_filter(
    rhs: Callable,
    obs_model: ObservationModel,
    initial,
    truth: TruthRun,
    analysis_fn: AnalysisFn,
    rng: Rng,
    n_windows: int | None = None,
    keep_records: bool = True,
):
    """Forecast every member over each window, then apply ``analysis_fn``.

    ``analysis_fn(prior, D, H(prior), C_dd)`` returns the posterior ensemble.
    Returns ``(records, mean_trajectory)``; the trajectory holds the
    posterior mean at every observation time.
    """
    Z = _ensemble(initial, "initial ensemble")
    K = len(truth) if n_windows is None else n_windows
    if K > len(truth):
        raise ValueError("more windows requested than observations available")
    records: list[AssimilationRecord] = []
    means = np.empty((K, Z.shape[0]))
    for k in range(K):
        Z = propagate(rhs, Z, obs_model.steps_per_obs, obs_model.dt)
        d, C_dd = truth.window(k)
        Y = obs_model.apply(Z)
        D = perturb_observations(d, C_dd, Z.shape[1], rng)
        Za = np.asarray(analysis_fn(Z, D, Y, C_dd), dtype=float)
        if Za.shape != Z.shape:
            raise ShapeMismatch("analysis changed the ensemble shape")
        if keep_records:
            records.append(AssimilationRecord(float(truth.times[k]), Z, D, Y, Za))
        means[k] = Za.mean(axis=1)
        Z = Za
    return records, means


def subspace_residual(prior, posterior) -> float:
    """Relative least-squares residual of ``posterior - prior`` outside ``span(prior)``."""
    Zf = _ensemble(prior, "prior")
    Za = _ensemble(posterior, "posterior")
    if Zf.shape != Za.shape:
        raise ShapeMismatch("prior and posterior differ in shape")
    if np.linalg.matrix_rank(Zf) == 0:
        raise DegenerateSpan("prior ensemble spans no directions")
    delta = Za - Zf
    norm = np.linalg.norm(delta)
    if norm == 0.0:
        return 0.0
    W, *_ = np.linalg.lstsq(Zf, delta, rcond=None)
    return float(np.linalg.norm(delta - Zf @ W) / norm)
