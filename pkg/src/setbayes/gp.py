"""Exact Gaussian process regression with a squared-exponential kernel.

The baseline against which the generalized GP is measured: zero prior mean,
ARD length scales, and hyperparameters fitted by multi-start Adam ascent on
the log marginal likelihood in log-parameter space.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.spatial.distance import cdist

from .errors import DimensionMismatch, NotPositiveDefinite, OptimizationDiverged
from .numerics import AdamState, Rng, adam_step, jittered_cholesky

__all__ = [
    "SeKernelParams",
    "GaussianPosterior",
    "GpOptConfig",
    "se_kernel",
    "gp_posterior",
    "log_marginal_likelihood",
    "lml_and_gradient",
    "maximize_lml",
    "optimize_hyperparams",
]

log = logging.getLogger(__name__)

NOISE_FLOOR = 1e-6
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class SeKernelParams:
    signal_sd: float
    length_scales: np.ndarray
    noise_sd: float = 0.0

    def __post_init__(self):
        self.length_scales = np.atleast_1d(np.asarray(self.length_scales, dtype=float))
        if not self.signal_sd > 0 or not np.all(self.length_scales > 0) or not self.noise_sd >= 0:
            raise ValueError(f"invalid kernel parameters {self}")

    @property
    def dim(self) -> int:
        return self.length_scales.shape[0]

    def to_log(self) -> np.ndarray:
        """Unconstrained vector ``[log sf, log l_1..l_d, log(noise - floor)]``."""
        return np.concatenate(
            [[math.log(self.signal_sd)], np.log(self.length_scales), [math.log(max(self.noise_sd - NOISE_FLOOR, 1e-300))]]
        )

    @classmethod
    def from_log(cls, theta) -> "SeKernelParams":
        theta = np.asarray(theta, dtype=float)
        return cls(math.exp(theta[0]), np.exp(theta[1:-1]), NOISE_FLOOR + math.exp(theta[-1]))


@dataclass
class GaussianPosterior:
    """Mean and covariance of a Gaussian over function values.

    ``covariance`` may be omitted for large test sets, in which case only
    the marginal ``variance`` is kept.
    """

    mean: np.ndarray
    covariance: np.ndarray | None = None
    variance: np.ndarray | None = field(default=None)

    def __post_init__(self):
        if self.variance is None and self.covariance is not None:
            self.variance = np.diag(self.covariance).copy()


def _as_points(x, dim=None) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if dim is not None and x.shape[1] != dim:
        raise DimensionMismatch(f"points have dimension {x.shape[1]}, kernel expects {dim}")
    return x


def se_kernel(params: SeKernelParams, xa, xb) -> np.ndarray:
    """Gram matrix ``sf^2 exp(-0.5 sum_k (xa_k - xb_k)^2 / l_k^2)`` (no noise)."""
    xa = _as_points(xa, params.dim) / params.length_scales
    xb = _as_points(xb, params.dim) / params.length_scales
    return params.signal_sd**2 * np.exp(-0.5 * cdist(xa, xb, "sqeuclidean"))


def _noisy_gram_factor(params, X):
    K = se_kernel(params, X, X)
    K[np.diag_indices_from(K)] += params.noise_sd**2
    L, _ = jittered_cholesky(K)
    return L


def gp_posterior(params: SeKernelParams, X, Y, Xstar, prior_mean=None, full_cov=True) -> GaussianPosterior:
    """Condition the GP on ``(X, Y)`` and return the posterior at ``Xstar``.

    ``prior_mean`` is an optional callable on point arrays; zero otherwise.
    With ``full_cov=False`` only marginal variances are computed.
    """
    X = _as_points(X, params.dim)
    Xs = _as_points(Xstar, params.dim)
    Y = np.asarray(Y, dtype=float).ravel()
    if X.shape[0] != Y.shape[0] or X.shape[0] == 0:
        raise DimensionMismatch("need as many targets as inputs, and at least one")
    m_x = np.zeros(len(Y)) if prior_mean is None else np.asarray(prior_mean(X), dtype=float)
    m_s = np.zeros(len(Xs)) if prior_mean is None else np.asarray(prior_mean(Xs), dtype=float)

    L = _noisy_gram_factor(params, X)
    alpha = scipy.linalg.cho_solve((L, True), Y - m_x)
    Ks = se_kernel(params, Xs, X)
    mean = m_s + Ks @ alpha
    V = scipy.linalg.solve_triangular(L, Ks.T, lower=True)
    if not full_cov:
        var = params.signal_sd**2 - np.einsum("ij,ij->j", V, V)
        return GaussianPosterior(mean, None, var)
    cov = se_kernel(params, Xs, Xs) - V.T @ V
    cov = 0.5 * (cov + cov.T)
    return GaussianPosterior(mean, cov)


def log_marginal_likelihood(params: SeKernelParams, X, Y) -> float:
    X = _as_points(X, params.dim)
    Y = np.asarray(Y, dtype=float).ravel()
    L = _noisy_gram_factor(params, X)
    alpha = scipy.linalg.cho_solve((L, True), Y)
    return float(-0.5 * Y @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * len(Y) * LOG_2PI)


def lml_and_gradient(theta, X, Y) -> tuple[float, np.ndarray]:
    """Log marginal likelihood and its gradient w.r.t. the log-parameters.

    Gradient entries are ``0.5 * tr((alpha alpha^T - K^-1) dK/dtheta)``.
    """
    params = SeKernelParams.from_log(theta)
    X = _as_points(X, params.dim)
    Y = np.asarray(Y, dtype=float).ravel()
    Kf = se_kernel(params, X, X)
    K = Kf.copy()
    K[np.diag_indices_from(K)] += params.noise_sd**2
    L, _ = jittered_cholesky(K)
    alpha = scipy.linalg.cho_solve((L, True), Y)
    lml = -0.5 * Y @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * len(Y) * LOG_2PI
    Kinv = scipy.linalg.cho_solve((L, True), np.eye(len(Y)))
    Q = np.outer(alpha, alpha) - Kinv

    grad = np.empty_like(np.asarray(theta, dtype=float))
    grad[0] = 0.5 * np.sum(Q * (2.0 * Kf))
    for k in range(params.dim):
        d2 = cdist(X[:, k : k + 1], X[:, k : k + 1], "sqeuclidean") / params.length_scales[k] ** 2
        grad[1 + k] = 0.5 * np.sum(Q * (Kf * d2))
    # d(noise^2)/d theta_noise = 2 * noise * exp(theta_noise)
    grad[-1] = 0.5 * np.trace(Q) * 2.0 * params.noise_sd * math.exp(theta[-1])
    return float(lml), grad


@dataclass
class GpOptConfig:
    n_starts: int = 5
    iterations: int = 500
    lr: float = 0.05
    length_scale_range: tuple = (0.01, 3.0)
    signal_sd_range: tuple = (0.1, 3.0)
    noise_sd_range: tuple = (1e-3, 0.1)


_THETA_BOUNDS = (math.log(1e-4), math.log(1e4))


def maximize_lml(theta0, X, Y, iterations=500, lr=0.05) -> tuple[np.ndarray, float, float]:
    """Adam ascent from ``theta0``; returns ``(best_theta, best_lml, initial_lml)``.

    The best iterate (not the last) is returned, so the result never scores
    below the starting point.  A start whose very first evaluation fails
    yields ``-inf`` for both scores.
    """
    theta = np.array(theta0, dtype=float)
    try:
        lml, grad = lml_and_gradient(theta, X, Y)
    except NotPositiveDefinite:
        return theta, -math.inf, -math.inf
    if not math.isfinite(lml):
        return theta, -math.inf, -math.inf
    init_lml = best_lml = lml
    best = theta.copy()
    state = AdamState.for_params([theta], lr=lr)
    for _ in range(iterations):
        adam_step([theta], [-grad], state)
        np.clip(theta, *_THETA_BOUNDS, out=theta)
        try:
            lml, grad = lml_and_gradient(theta, X, Y)
        except NotPositiveDefinite:
            break
        if not (math.isfinite(lml) and np.all(np.isfinite(grad))):
            break
        if lml > best_lml:
            best_lml, best = lml, theta.copy()
    return best, best_lml, init_lml


def optimize_hyperparams(X, Y, config: GpOptConfig | None = None, rng: Rng | None = None) -> SeKernelParams:
    """Multi-start maximisation of the log marginal likelihood."""
    config = config or GpOptConfig()
    rng = rng or Rng(0)
    X = _as_points(X)
    Y = np.asarray(Y, dtype=float).ravel()
    if len(Y) < 2:
        raise DimensionMismatch("hyperparameter fitting needs at least two observations")
    dim = X.shape[1]

    def log_uniform(lo, hi, size=None):
        return rng.uniform(size, math.log(lo), math.log(hi))

    best_theta, best_lml = None, -math.inf
    for start in range(config.n_starts):
        theta0 = np.concatenate(
            [
                [log_uniform(*config.signal_sd_range)],
                log_uniform(*config.length_scale_range, size=dim),
                [log_uniform(*config.noise_sd_range)],
            ]
        )
        theta, lml, lml0 = maximize_lml(theta0, X, Y, config.iterations, config.lr)
        log.debug("GP start %d: lml %.4f -> %.4f", start, lml0, lml)
        if lml > best_lml:
            best_theta, best_lml = theta, lml
    if best_theta is None:
        raise OptimizationDiverged("log marginal likelihood was non-finite at every start")
    return SeKernelParams.from_log(best_theta)
