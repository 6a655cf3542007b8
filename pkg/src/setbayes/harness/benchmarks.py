"""Benchmark target functions, dataset generation and error metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DomainError, ShapeMismatch, ZeroTruthNorm
from ..numerics import Rng

__all__ = [
    "step_function",
    "multiscale_function",
    "RegressionData",
    "grid_points",
    "generate_regression_dataset",
    "relative_rmse",
    "grid_rmse",
    "mean_nlpd",
]


def _unit_interval(*xs):
    for x in xs:
        if np.any((np.asarray(x) < 0) | (np.asarray(x) > 1)) or not np.all(np.isfinite(x)):
            raise DomainError("inputs must lie in [0, 1]")


def step_function(x):
    """1 on ``[0.3, 0.7)``, 0 elsewhere on ``[0, 1]``."""
    _unit_interval(x)
    x = np.asarray(x, dtype=float)
    return ((x >= 0.3) & (x < 0.7)).astype(float)


def _box(x1, x2, lo, hi):
    return ((x1 >= lo) & (x1 <= hi) & (x2 >= lo) & (x2 <= hi)).astype(float)


def multiscale_function(x1, x2):
    """Four products of cosines/sines at periods 1, 1/2, 1/4, 1/8, the finer ones gated to squares."""
    _unit_interval(x1, x2)
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    tau = 2.0 * np.pi
    return (
        np.cos(tau * x1) * np.cos(tau * x2)
        + np.sin(2 * tau * x1) * np.sin(2 * tau * x2) * _box(x1, x2, 0.25, 0.75)
        + np.sin(4 * tau * x1) * np.sin(4 * tau * x2) * _box(x1, x2, 0.5, 0.75)
        + np.sin(8 * tau * x1) * np.sin(8 * tau * x2) * _box(x1, x2, 0.25, 0.5)
    )


@dataclass
class RegressionData:
    X: np.ndarray
    Y: np.ndarray
    clean: np.ndarray


def grid_points(per_axis: int, dim: int) -> np.ndarray:
    """Tensor grid of ``per_axis**dim`` points spanning ``[0, 1]^dim`` inclusive."""
    axis = np.linspace(0.0, 1.0, per_axis)
    mesh = np.meshgrid(*([axis] * dim), indexing="ij")
    return np.column_stack([m.ravel() for m in mesh])


def _evaluate(fn, X):
    return fn(X[:, 0]) if X.shape[1] == 1 else fn(*X.T)


def generate_regression_dataset(fn, dim: int, noise_sd: float, rng: Rng, count=None, per_axis=None):
    """Noisy samples ``f(x) + N(0, noise_sd^2)``.

    Inputs are ``count`` uniform random points, or a ``per_axis`` grid.
    """
    if (count is None) == (per_axis is None):
        raise ValueError("give exactly one of count or per_axis")
    if count is not None:
        if count < 1:
            raise ValueError("count must be at least 1")
        X = rng.uniform((count, dim))
    else:
        X = grid_points(per_axis, dim)
    clean = _evaluate(fn, X)
    Y = clean + noise_sd * rng.normal(len(clean)) if noise_sd else clean.copy()
    return RegressionData(X, Y, clean)


def relative_rmse(estimates, truths) -> float:
    """``sqrt(sum_k |est_k - true_k|^2 / sum_k |true_k|^2)``."""
    est = np.asarray(estimates, dtype=float)
    tru = np.asarray(truths, dtype=float)
    if est.shape != tru.shape:
        raise ShapeMismatch("estimate and truth sequences differ in shape")
    if est.size == 0:
        raise ShapeMismatch("need at least one window")
    denom = np.sum(tru**2)
    if denom == 0:
        raise ZeroTruthNorm("truth sequence is identically zero")
    return float(np.sqrt(np.sum((est - tru) ** 2) / denom))


def grid_rmse(mean, truth) -> float:
    return float(np.sqrt(np.mean((np.asarray(mean) - np.asarray(truth)) ** 2)))


def mean_nlpd(mean, variance, truth) -> float:
    """Mean negative log predictive density of marginal Gaussians."""
    var = np.maximum(np.asarray(variance, dtype=float), 1e-12)
    r = np.asarray(truth) - np.asarray(mean)
    return float(np.mean(0.5 * np.log(2 * np.pi * var) + 0.5 * r**2 / var))
