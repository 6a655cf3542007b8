"""Lorenz-63 / Lorenz-96 dynamics, RK4 integration and the observation model.

States are stored 0-based.  Translation from the usual 1-based notation:

    ==========================  =====================
    1-based (literature)        stored index
    ==========================  =====================
    L63 observed z1, z3         0, 2
    L96 observed z3, z6 .. z24  2, 5, 8, ..., 23
    L96 spin-up kick on z20     19
    ==========================  =====================

Every right-hand side accepts a single state ``(n,)`` or an ensemble
``(n, N)`` whose columns are members.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import partial
from typing import Callable

import numpy as np

from .errors import NonFiniteState, ShapeMismatch
from .numerics import Rng

__all__ = [
    "Lorenz63Params",
    "Lorenz96Params",
    "ObservationModel",
    "l63_rhs",
    "l96_rhs",
    "rk4_step",
    "integrate",
    "propagate",
    "l96_spinup",
    "observe_truth",
    "L63_TRUE_INIT",
    "L63_BASELINE_INIT",
    "L63_PRIOR_VAR",
    "L63_OBSERVATION",
    "L96_OBSERVATION",
    "DT",
]

DT = 0.01

L63_TRUE_INIT = np.array([-8.5, -7.0, 27.0])
L63_BASELINE_INIT = np.array([-8.0, -9.0, 28.0])
L63_PRIOR_VAR = np.array([0.4, 2.0, 1.4])


@dataclass(frozen=True)
class Lorenz63Params:
    sigma: float = 10.0
    rho: float = 28.0
    beta: float = 8.0 / 3.0


@dataclass(frozen=True)
class Lorenz96Params:
    dim: int = 24
    forcing: float = 8.0

    def __post_init__(self):
        if self.dim < 4:
            raise ValueError("Lorenz-96 needs at least 4 variables")


def l63_rhs(params: Lorenz63Params, z) -> np.ndarray:
    z1, z2, z3 = z[0], z[1], z[2]
    return np.stack(
        [
            params.sigma * (z2 - z1),
            z1 * (params.rho - z3) - z2,
            z1 * z2 - params.beta * z3,
        ]
    )


def l96_rhs(params: Lorenz96Params, z) -> np.ndarray:
    """``dz_i = (z_{i+1} - z_{i-2}) z_{i-1} - z_i + F`` on a periodic ring."""
    z = np.asarray(z, dtype=float)
    if z.shape[0] != params.dim:
        raise ShapeMismatch(f"state has {z.shape[0]} variables, model has {params.dim}")
    return (np.roll(z, -1, axis=0) - np.roll(z, 2, axis=0)) * np.roll(z, 1, axis=0) - z + params.forcing


def rk4_step(rhs: Callable, z, dt: float) -> np.ndarray:
    """Classical fourth-order Runge-Kutta step."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    k1 = rhs(z)
    k2 = rhs(z + 0.5 * dt * k1)
    k3 = rhs(z + 0.5 * dt * k2)
    k4 = rhs(z + dt * k3)
    out = z + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise NonFiniteState("integration produced a non-finite state")
    return out


def integrate(rhs: Callable, z0, steps: int, dt: float = DT) -> np.ndarray:
    """Trajectory of ``steps + 1`` states starting with ``z0``."""
    if steps < 0:
        raise ValueError("steps must be non-negative")
    z = np.asarray(z0, dtype=float)
    traj = np.empty((steps + 1, *z.shape))
    traj[0] = z
    for k in range(steps):
        z = rk4_step(rhs, z, dt)
        traj[k + 1] = z
    return traj


def propagate(rhs: Callable, z0, steps: int, dt: float = DT) -> np.ndarray:
    """Final state of :func:`integrate`, without storing the path."""
    z = np.asarray(z0, dtype=float)
    for _ in range(steps):
        z = rk4_step(rhs, z, dt)
    return z


def l96_spinup(params: Lorenz96Params | None = None, dt: float = DT) -> np.ndarray:
    """State at t=0 after integrating the kicked equilibrium from t=-5."""
    params = params or Lorenz96Params()
    z = np.full(params.dim, params.forcing)
    z[19] += 0.01
    return propagate(partial(l96_rhs, params), z, int(round(5.0 / dt)), dt)


@dataclass(frozen=True)
class ObservationModel:
    """Row-selection operator with state-dependent Gaussian noise.

    The noise standard deviation of component ``i`` is ``a * d*_i + b``
    (its absolute value when sampling); the variance is its square.
    """

    selected_indices: tuple
    noise_scale: float
    noise_offset: float
    obs_interval: float
    dt: float = DT

    def __post_init__(self):
        idx = tuple(int(i) for i in self.selected_indices)
        object.__setattr__(self, "selected_indices", idx)
        if not idx or any(i < 0 for i in idx) or any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("observation indices must be non-negative and strictly increasing")
        ratio = self.obs_interval / self.dt
        if self.obs_interval <= 0 or abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("observation interval must be a positive multiple of the step size")

    @classmethod
    def from_one_based(cls, indices, noise_scale, noise_offset, obs_interval, dt=DT) -> "ObservationModel":
        return cls(tuple(i - 1 for i in indices), noise_scale, noise_offset, obs_interval, dt)

    @property
    def m(self) -> int:
        return len(self.selected_indices)

    @property
    def steps_per_obs(self) -> int:
        return int(round(self.obs_interval / self.dt))

    def operator_matrix(self, n: int) -> np.ndarray:
        H = np.zeros((self.m, n))
        H[np.arange(self.m), self.selected_indices] = 1.0
        return H

    def apply(self, z) -> np.ndarray:
        """``H z`` for a state or an ensemble."""
        z = np.asarray(z)
        if max(self.selected_indices) >= z.shape[0]:
            raise ShapeMismatch("state does not cover the observed indices")
        return z[list(self.selected_indices)]

    def noise_variance(self, d_star) -> np.ndarray:
        return (self.noise_scale * np.asarray(d_star, dtype=float) + self.noise_offset) ** 2


L63_OBSERVATION = ObservationModel.from_one_based((1, 3), 0.1, 0.05, 0.5)
L96_OBSERVATION = ObservationModel.from_one_based(tuple(range(3, 25, 3)), 0.05, 0.1, 0.2)


def observe_truth(model: ObservationModel, z_true, rng: Rng):
    """Noisy observation ``d``, noiseless ``d*`` and diagonal covariance ``C_dd``."""
    d_star = model.apply(np.asarray(z_true, dtype=float))
    var = model.noise_variance(d_star)
    d = d_star + np.sqrt(var) * rng.normal(d_star.shape)
    return d, d_star, np.diag(var)
