"""Ensemble neural filter: a learned, permutation-equivariant analysis step.

Each state variable ``j`` is updated independently by one shared operator.
The operator reads, for every member ``i``, the element
``(z_ij, H(z_i), d_i)`` of width ``1 + 2m`` and returns the posterior value
of ``z_ij``.  It never sees the other state variables directly, only the
observation-space quantities.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .enkf import AssimilationRecord
from .errors import EmptyInput, OptimizationDiverged, ShapeMismatch
from .numerics import AdamState, Rng, adam_step
from .perm_ops import (
    EquivariantOperatorParams,
    equivariant_backward,
    equivariant_forward,
    init_equivariant,
)

__all__ = [
    "EnnfConfig",
    "EnnfParams",
    "TrainingPair",
    "TrainingSet",
    "init_ennf",
    "build_dataset",
    "ennf_analysis",
    "ennf_loss",
    "train_ennf",
    "fine_tune",
]

log = logging.getLogger(__name__)


@dataclass
class EnnfConfig:
    hidden: tuple = (64, 64)
    self_width: int = 32
    int_width: int = 32
    epochs: int = 2000
    batch_size: int = 32
    lr: float = 1e-3
    residual: bool = True
    fine_tune_epochs: int = 300
    cosine_decay: bool = False
    anomaly_features: bool = False


@dataclass
class EnnfParams:
    """Operator weights plus the frozen input standardisation.

    ``shift``/``scale`` have one entry per input channel.  Outputs are
    produced in the units of channel 0 (the prior state value).  With
    ``residual`` the operator predicts the increment to the prior value.
    """

    operator: EquivariantOperatorParams
    shift: np.ndarray
    scale: np.ndarray
    residual: bool = True
    anomaly_scale: np.ndarray | None = None

    def __post_init__(self):
        self.shift = np.asarray(self.shift, dtype=float)
        self.scale = np.asarray(self.scale, dtype=float)
        w = self.shift.shape[0]
        if self.anomaly_scale is not None:
            self.anomaly_scale = np.asarray(self.anomaly_scale, dtype=float)
            if self.anomaly_scale.shape != (w,):
                raise ShapeMismatch("one anomaly scale per channel")
        want = w if self.anomaly_scale is None else 2 * w
        if (w - 1) % 2 or self.scale.shape != (w,) or self.operator.element_width != want:
            raise ShapeMismatch("element width must be 1 + 2m with one normalisation entry per channel")
        if self.operator.fit_net.out_width != 1:
            raise ShapeMismatch("the filter emits one value per member")

    @property
    def obs_dim(self) -> int:
        return (self.shift.shape[0] - 1) // 2

    def arrays(self) -> list:
        return self.operator.arrays()

    def copy(self) -> "EnnfParams":
        anomaly = None if self.anomaly_scale is None else self.anomaly_scale.copy()
        return EnnfParams(self.operator.copy(), self.shift.copy(), self.scale.copy(), self.residual, anomaly)


@dataclass
class TrainingPair:
    inputs: np.ndarray
    targets: np.ndarray
    variable_index: int


@dataclass
class TrainingSet:
    """All pairs stacked: ``inputs (P, N, 1+2m)``, ``targets (P, N)``, ``variable (P,)``."""

    inputs: np.ndarray
    targets: np.ndarray
    variable: np.ndarray

    def __len__(self):
        return self.inputs.shape[0]

    def __getitem__(self, k) -> TrainingPair:
        return TrainingPair(self.inputs[k], self.targets[k], int(self.variable[k]))

    def subset(self, mask) -> "TrainingSet":
        return TrainingSet(self.inputs[mask], self.targets[mask], self.variable[mask])


def _elements(prior, D, predicted_obs) -> np.ndarray:
    """``(n, N, 1 + 2m)`` element array: one set per state variable."""
    Z = np.asarray(prior, dtype=float)
    D = np.asarray(D, dtype=float)
    Y = np.asarray(predicted_obs, dtype=float)
    if Z.ndim != 2 or D.ndim != 2 or D.shape != Y.shape or D.shape[1] != Z.shape[1]:
        raise ShapeMismatch("expected prior (n, N) with D and H(Z) of shape (m, N)")
    n, N = Z.shape
    obs = np.concatenate([Y, D], axis=0).T
    return np.concatenate([Z[:, :, None], np.broadcast_to(obs, (n, N, obs.shape[1]))], axis=-1)


def build_dataset(records: Sequence[AssimilationRecord], state_dim: int | None = None) -> TrainingSet:
    """One training pair per record and state variable."""
    if not records:
        raise EmptyInput("no assimilation records")
    n = records[0].prior.shape[0] if state_dim is None else state_dim
    inputs, targets, variable = [], [], []
    for rec in records:
        if rec.prior.shape[0] != n:
            raise ShapeMismatch("records disagree on the state dimension")
        inputs.append(_elements(rec.prior, rec.perturbed_obs, rec.predicted_obs))
        targets.append(rec.posterior)
        variable.append(np.arange(n))
    return TrainingSet(np.concatenate(inputs), np.concatenate(targets), np.concatenate(variable))


def _fit_normalisation(inputs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Channel statistics; an observed component and its predicted value share stats."""
    flat = inputs.reshape(-1, inputs.shape[-1])
    m = (flat.shape[1] - 1) // 2
    shift = np.empty(flat.shape[1])
    scale = np.empty(flat.shape[1])
    shift[0], scale[0] = flat[:, 0].mean(), flat[:, 0].std()
    for k in range(m):
        both = np.concatenate([flat[:, 1 + k], flat[:, 1 + m + k]])
        shift[[1 + k, 1 + m + k]] = both.mean()
        scale[[1 + k, 1 + m + k]] = both.std()
    scale[scale == 0] = 1.0
    anomalies = (inputs - inputs.mean(axis=-2, keepdims=True)).reshape(-1, inputs.shape[-1])
    anomaly_scale = anomalies.std(axis=0)
    anomaly_scale[anomaly_scale == 0] = 1.0
    return shift, scale, anomaly_scale


def init_ennf(
    obs_dim: int, rng: Rng, config: EnnfConfig | None = None, shift=None, scale=None, anomaly_scale=None
) -> EnnfParams:
    c = config or EnnfConfig()
    w = 1 + 2 * obs_dim
    op = init_equivariant(2 * w if c.anomaly_features else w, 1, rng, c.hidden, c.self_width, c.int_width)
    shift = np.zeros(w) if shift is None else shift
    scale = np.ones(w) if scale is None else scale
    if c.anomaly_features:
        anomaly_scale = np.ones(w) if anomaly_scale is None else anomaly_scale
    else:
        anomaly_scale = None
    return EnnfParams(op, shift, scale, c.residual, anomaly_scale)


def _forward(params: EnnfParams, elements):
    x = (elements - params.shift) / params.scale
    if params.anomaly_scale is not None:
        # deviation of each member from the ensemble mean: symmetric in the members
        a = (elements - elements.mean(axis=-2, keepdims=True)) / params.anomaly_scale
        x_in = np.concatenate([x, a], axis=-1)
    else:
        x_in = x
    out, cache = equivariant_forward(params.operator, x_in)
    out = out[..., 0]
    if params.anomaly_scale is not None:
        # emit the output in ensemble-spread units
        out = out * (params.anomaly_scale[0] / params.scale[0])
    if params.residual:
        out = out + x[..., 0]
    return out, cache


def ennf_analysis(params, prior, D, predicted_obs) -> np.ndarray:
    """Posterior ensemble ``(n, N)``.

    ``params`` is either one :class:`EnnfParams` shared by every state
    variable or a sequence with one entry per variable.
    """
    elements = _elements(prior, D, predicted_obs)
    if isinstance(params, EnnfParams):
        shared = [params]
        which = np.zeros(elements.shape[0], dtype=int)
    else:
        shared = list(params)
        if len(shared) != elements.shape[0]:
            raise ShapeMismatch("need one parameter set per state variable")
        which = np.arange(elements.shape[0])
    if shared[0].obs_dim != (elements.shape[-1] - 1) // 2:
        raise ShapeMismatch(f"filter expects {shared[0].obs_dim} observed components")
    post = np.empty(elements.shape[:2])
    for k, p in enumerate(shared):
        rows = which == k
        out, _ = _forward(p, elements[rows])
        post[rows] = p.shift[0] + p.scale[0] * out
    return post


def ennf_loss(params: EnnfParams, data: TrainingSet) -> float:
    """Mean squared error in standardised units of the state channel."""
    out, _ = _forward(params, data.inputs)
    t = (data.targets - params.shift[0]) / params.scale[0]
    return float(np.mean((out - t) ** 2))


def _loss_and_grads(params: EnnfParams, inputs, targets):
    out, cache = _forward(params, inputs)
    t = (targets - params.shift[0]) / params.scale[0]
    r = out - t
    g = (2.0 / r.size) * r[..., None]
    if params.anomaly_scale is not None:
        g = g * (params.anomaly_scale[0] / params.scale[0])
    grads, _, _ = equivariant_backward(params.operator, cache, g)
    return float(np.mean(r**2)), grads


def _fit(params: EnnfParams, data: TrainingSet, epochs: int, config: EnnfConfig, rng: Rng):
    history = []
    arrays = params.arrays()
    state = AdamState.for_params(arrays, lr=config.lr)
    for epoch in range(epochs):
        if config.cosine_decay:
            state.lr = 0.5 * config.lr * (1.0 + math.cos(math.pi * epoch / epochs))
        order = rng.permutation(len(data))
        losses, weights = [], []
        for start in range(0, len(order), config.batch_size):
            b = order[start : start + config.batch_size]
            loss, grads = _loss_and_grads(params, data.inputs[b], data.targets[b])
            if not math.isfinite(loss):
                raise OptimizationDiverged(f"non-finite loss at epoch {epoch}")
            adam_step(arrays, grads, state)
            losses.append(loss)
            weights.append(len(b))
        history.append(float(np.average(losses, weights=weights)))
        log.debug("EnNF epoch %d: mse %.5f", epoch, history[-1])
    return history


def train_ennf(data: TrainingSet, config: EnnfConfig, rng: Rng, params: EnnfParams | None = None):
    """Mini-batch Adam on the member-wise MSE; returns ``(params, per-epoch loss)``."""
    if len(data) == 0:
        raise EmptyInput("empty training set")
    if params is None:
        shift, scale, anomaly_scale = _fit_normalisation(data.inputs)
        params = init_ennf((data.inputs.shape[-1] - 1) // 2, rng.spawn(0), config, shift, scale, anomaly_scale)
    history = _fit(params, data, config.epochs, config, rng.spawn(1))
    return params, history


def fine_tune(params: EnnfParams, data: TrainingSet, variable_index: int, config: EnnfConfig, rng: Rng):
    """Continue training a copy of ``params`` on one variable's pairs.

    Returns ``(params, per-epoch loss)``; the input ``params`` is untouched.
    """
    sub = data.subset(data.variable == variable_index)
    if len(sub) == 0:
        raise EmptyInput(f"no pairs for variable {variable_index}")
    tuned = params.copy()
    history = _fit(tuned, sub, config.fine_tune_epochs, config, rng)
    return tuned, history
