"""Generalized Gaussian process: set operators that emit a mean and a
low-rank-plus-diagonal covariance for a batch of test points.

Test points go through a permutation-equivariant operator (self and
interaction embeddings), observation pairs through a mean-pooled data
embedding, and a shared fitting network maps the concatenation to
``(mean, l_i, d_i)`` per test point.  The covariance ``L L^T + exp(D)`` is
positive definite by construction.  Training minimises the Gaussian negative
log likelihood of randomly held-out subsets of the observations.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptySet, InvalidSplit, OptimizationDiverged, ShapeMismatch
from .gp import GaussianPosterior
from .numerics import (
    AdamState,
    MlpParams,
    Rng,
    adam_step,
    init_mlp,
    mlp_backward,
    mlp_forward,
)
from .perm_ops import (
    EquivariantOperatorParams,
    equivariant_backward,
    equivariant_forward,
    mean_pool_backward,
    mean_pool_forward,
)

__all__ = [
    "GgpConfig",
    "GgpParams",
    "GgpOutput",
    "RegressionTask",
    "init_ggp",
    "ggp_forward",
    "ggp_backward",
    "assemble_covariance",
    "ggp_nll",
    "nll_output_grads",
    "ggp_nll_gradient",
    "make_tasks",
    "train_ggp",
    "ggp_predict",
]

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class GgpConfig:
    rank: int = 8
    hidden: tuple = (64, 64)
    self_width: int = 32
    int_width: int = 32
    data_width: int = 32
    m_prime: int = 20
    n_tasks: int = 20000
    batch_size: int = 64
    epochs: int = 1
    lr: float = 1e-3
    covariance_epochs: int = 0
    low_rank_init_scale: float = 1.0


@dataclass
class GgpParams:
    """All trainable weights plus the target standardisation constants."""

    operator: EquivariantOperatorParams
    data_net: MlpParams
    rank: int
    y_shift: float = 0.0
    y_scale: float = 1.0

    def __post_init__(self):
        if self.operator.fit_net.out_width != self.rank + 2:
            raise ShapeMismatch("fitting network must emit rank + 2 channels")
        if self.operator.cond_width != self.data_net.out_width:
            raise ShapeMismatch("data embedding width must match the operator's conditioning width")
        if self.data_net.in_width != self.operator.element_width + 1:
            raise ShapeMismatch("data network reads (x, y) pairs")

    self_net = property(lambda self: self.operator.self_net)
    int_net = property(lambda self: self.operator.int_net)
    fit_net = property(lambda self: self.operator.fit_net)

    @property
    def x_dim(self) -> int:
        return self.operator.element_width

    def arrays(self) -> list:
        return self.operator.arrays() + self.data_net.arrays()

    def copy(self) -> "GgpParams":
        return GgpParams(self.operator.copy(), self.data_net.copy(), self.rank, self.y_shift, self.y_scale)


def init_ggp(x_dim: int, rng: Rng, config: GgpConfig | None = None, y_shift=0.0, y_scale=1.0) -> GgpParams:
    c = config or GgpConfig()
    h = list(c.hidden)
    operator = EquivariantOperatorParams(
        init_mlp([x_dim, *h, c.self_width], rng),
        init_mlp([x_dim, *h, c.int_width], rng),
        init_mlp([c.self_width + c.int_width + c.data_width, *h, c.rank + 2], rng),
        cond_width=c.data_width,
    )
    data_net = init_mlp([x_dim + 1, *h, c.data_width], rng)
    operator.fit_net.weights[-1][:, 1 : 1 + c.rank] *= c.low_rank_init_scale
    return GgpParams(operator, data_net, c.rank, float(y_shift), float(y_scale))


@dataclass
class GgpOutput:
    """Per-test-point mean ``m``, low-rank rows ``L`` (N x r) and log-diagonal ``d``.

    Arrays may carry a leading batch axis.
    """

    mean: np.ndarray
    low_rank: np.ndarray
    log_diag: np.ndarray

    def covariance(self) -> np.ndarray:
        return assemble_covariance(self)

    def marginal_variance(self) -> np.ndarray:
        return np.sum(self.low_rank**2, axis=-1) + np.exp(self.log_diag)


def assemble_covariance(out: GgpOutput) -> np.ndarray:
    """``L L^T + diag(exp(d))``."""
    L = out.low_rank
    K = L @ np.swapaxes(L, -1, -2)
    n = K.shape[-1]
    idx = np.arange(n)
    K[..., idx, idx] += np.exp(out.log_diag)
    return K


def _points(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x[:, None] if x.ndim == 1 else x


def _split_heads(raw, rank, shift, scale) -> GgpOutput:
    return GgpOutput(
        shift + scale * raw[..., 0],
        scale * raw[..., 1 : 1 + rank],
        raw[..., rank + 1] + 2.0 * math.log(scale),
    )


def _merge_head_grads(g_mean, g_low, g_logd, scale) -> np.ndarray:
    return np.concatenate([scale * g_mean[..., None], scale * g_low, g_logd[..., None]], axis=-1)


def ggp_forward(params: GgpParams, Xstar, context_x, context_y):
    """Mean, low-rank factor and log-diagonal at ``Xstar`` given the context.

    Returns ``(GgpOutput, cache)``; the cache feeds :func:`ggp_backward`.
    """
    xs = _points(Xstar)
    cx = _points(context_x)
    cy = np.asarray(context_y, dtype=float).ravel()
    if xs.shape[0] == 0 or cx.shape[0] == 0:
        raise EmptySet("need at least one test point and one observation")
    if cx.shape[0] != cy.shape[0]:
        raise ShapeMismatch("context inputs and targets differ in length")
    if xs.shape[1] != params.x_dim or cx.shape[1] != params.x_dim:
        raise ShapeMismatch(f"points must have dimension {params.x_dim}")
    pairs = np.column_stack([cx, (cy - params.y_shift) / params.y_scale])
    cond, pool_cache = mean_pool_forward(params.data_net, pairs)
    raw, op_cache = equivariant_forward(params.operator, xs, cond)
    out = _split_heads(raw, params.rank, params.y_shift, params.y_scale)
    return out, (pool_cache, op_cache)


def ggp_backward(params: GgpParams, cache, g_mean, g_low, g_logd) -> list:
    """Parameter gradients (order of ``params.arrays()``) from output gradients."""
    pool_cache, op_cache = cache
    g_raw = _merge_head_grads(g_mean, g_low, g_logd, params.y_scale)
    op_grads, _, g_cond = equivariant_backward(params.operator, op_cache, g_raw)
    data_grads, _ = mean_pool_backward(params.data_net, pool_cache, g_cond)
    return op_grads + data_grads


def _nll_terms(out: GgpOutput, y):
    """Batched Gaussian NLL and its gradient w.r.t. (mean, low_rank, log_diag)."""
    r = np.asarray(y, dtype=float) - out.mean
    if r.shape != out.mean.shape:
        raise ShapeMismatch("targets and predicted mean differ in shape")
    K = assemble_covariance(out)
    C = np.linalg.cholesky(K)
    Cinv = np.linalg.inv(C)
    Kinv = np.swapaxes(Cinv, -1, -2) @ Cinv
    alpha = (Kinv @ r[..., None])[..., 0]
    n = r.shape[-1]
    logdet = 2.0 * np.sum(np.log(np.diagonal(C, axis1=-2, axis2=-1)), axis=-1)
    nll = 0.5 * np.sum(r * alpha, axis=-1) + 0.5 * logdet + 0.5 * n * LOG_2PI
    G = 0.5 * (Kinv - alpha[..., :, None] * alpha[..., None, :])
    g_mean = -alpha
    g_low = 2.0 * G @ out.low_rank
    g_logd = np.diagonal(G, axis1=-2, axis2=-1) * np.exp(out.log_diag)
    return nll, g_mean, g_low, g_logd


def ggp_nll(out: GgpOutput, Yprime) -> float:
    """``0.5 r^T K^-1 r + 0.5 log|K| + (M'/2) log 2 pi`` with ``r = Y' - m``."""
    return _nll_terms(out, Yprime)[0]


def nll_output_grads(out: GgpOutput, Yprime):
    """``(nll, dnll/dmean, dnll/dlow_rank, dnll/dlog_diag)``."""
    return _nll_terms(out, Yprime)


@dataclass
class RegressionTask:
    """Held-out prediction problem on a fixed dataset, stored as index sets."""

    X: np.ndarray
    Y: np.ndarray
    target_idx: np.ndarray
    context_idx: np.ndarray

    context_x = property(lambda self: self.X[self.context_idx])
    context_y = property(lambda self: self.Y[self.context_idx])
    targets_x = property(lambda self: self.X[self.target_idx])
    targets_y = property(lambda self: self.Y[self.target_idx])


def ggp_nll_gradient(params: GgpParams, task: RegressionTask) -> tuple[float, list]:
    """NLL of one task and its exact gradient w.r.t. every network weight."""
    out, cache = ggp_forward(params, task.targets_x, task.context_x, task.context_y)
    nll, g_mean, g_low, g_logd = nll_output_grads(out, task.targets_y)
    return float(nll), ggp_backward(params, cache, g_mean, g_low, g_logd)


def make_tasks(X, Y, m_prime: int, n_tasks: int, rng: Rng) -> list[RegressionTask]:
    """Independent random splits: ``m_prime`` targets, the rest as context."""
    X = _points(X)
    Y = np.asarray(Y, dtype=float).ravel()
    M = X.shape[0]
    if not 0 < m_prime < M:
        raise InvalidSplit(f"need 0 < m_prime < M, got m_prime={m_prime}, M={M}")
    tasks = []
    for _ in range(n_tasks):
        perm = rng.permutation(M)
        tasks.append(RegressionTask(X, Y, np.sort(perm[:m_prime]), np.sort(perm[m_prime:])))
    return tasks


# --------------------------------------------------------------------------
# training


def _pool_matrix(index_rows: np.ndarray, M: int) -> np.ndarray:
    B, k = index_rows.shape
    W = np.zeros((B, M))
    np.put_along_axis(W, index_rows, 1.0 / k, axis=1)
    return W


def _batch_loss_and_grads(params: GgpParams, X, Ystd, target_idx, context_idx, low_rank=True):
    """Mean standardised NLL over a batch of tasks sharing one dataset.

    Every network runs once over the full dataset; task-level pooling and
    gathering are expressed as index weights, which is exact and avoids
    re-embedding the shared observations for every task.  With
    ``low_rank=False`` the covariance is held diagonal.
    """
    op = params.operator
    M = X.shape[0]
    B, k = target_idx.shape
    h1, h2 = op.self_net.out_width, op.int_net.out_width

    pairs = np.column_stack([X, Ystd])
    E, data_cache = mlp_forward(params.data_net, pairs)
    S_all, self_cache = mlp_forward(op.self_net, X)
    T_all, int_cache = mlp_forward(op.int_net, X)
    Wc = _pool_matrix(context_idx, M)
    Wt = _pool_matrix(target_idx, M)
    cond = Wc @ E
    pooled_t = Wt @ T_all
    fit_in = np.concatenate(
        [
            S_all[target_idx],
            np.broadcast_to(pooled_t[:, None, :], (B, k, h2)),
            np.broadcast_to(cond[:, None, :], (B, k, cond.shape[1])),
        ],
        axis=-1,
    )
    raw, fit_cache = mlp_forward(op.fit_net, fit_in)
    out = _split_heads(raw, params.rank, 0.0, 1.0)
    if not low_rank:
        out.low_rank = np.zeros_like(out.low_rank)
    nll, g_mean, g_low, g_logd = _nll_terms(out, Ystd[target_idx])
    if not low_rank:
        g_low = np.zeros_like(g_low)
    g_raw = _merge_head_grads(g_mean, g_low, g_logd, 1.0) / B

    fit_grads, g_in = mlp_backward(op.fit_net, fit_cache, g_raw)
    g_S_all = np.zeros_like(S_all)
    np.add.at(g_S_all, target_idx, g_in[..., :h1])
    g_T_all = Wt.T @ g_in[..., h1 : h1 + h2].sum(axis=1)
    g_E = Wc.T @ g_in[..., h1 + h2 :].sum(axis=1)
    self_grads, _ = mlp_backward(op.self_net, self_cache, g_S_all)
    int_grads, _ = mlp_backward(op.int_net, int_cache, g_T_all)
    data_grads, _ = mlp_backward(params.data_net, data_cache, g_E)
    return float(np.mean(nll)), self_grads + int_grads + fit_grads + data_grads


def train_ggp(X, Y, config: GgpConfig, rng: Rng, params: GgpParams | None = None):
    """Mini-batch Adam on the held-out-subset NLL.

    With ``covariance_epochs == 0`` every weight is trained jointly for
    ``epochs``.  Otherwise the first ``epochs`` train the whole model with a
    diagonal covariance, and the following ``covariance_epochs`` fit only
    the output-layer weights that produce ``L`` and ``d``, so the learned
    mean cannot drift.

    Returns ``(params, history)`` where ``history`` has per-step and
    per-epoch mean NLL in the original target units.
    """
    X = _points(X)
    Y = np.asarray(Y, dtype=float).ravel()
    if X.shape[0] == 0:
        raise EmptySet("empty dataset")
    if params is None:
        scale = float(np.std(Y))
        params = init_ggp(X.shape[1], rng.spawn(0), config, float(np.mean(Y)), scale if scale > 0 else 1.0)
    history = {"step": [], "epoch": []}
    total = config.epochs + config.covariance_epochs
    if total <= 0 or config.n_tasks <= 0:
        return params, history

    tasks = make_tasks(X, Y, config.m_prime, config.n_tasks, rng.spawn(1))
    target_idx = np.stack([t.target_idx for t in tasks])
    context_idx = np.stack([t.context_idx for t in tasks])
    Ystd = (Y - params.y_shift) / params.y_scale
    # NLL in original units differs by the constant M' log(scale)
    offset = config.m_prime * math.log(params.y_scale)

    arrays = params.arrays()
    two_stage = config.covariance_epochs > 0
    # output-layer weight and bias of the fitting network
    head = len(params.self_net.arrays()) + len(params.int_net.arrays()) + len(params.fit_net.arrays()) - 2
    state = AdamState.for_params(arrays, lr=config.lr)
    order_rng = rng.spawn(2)
    for epoch in range(total):
        joint = epoch < config.epochs
        if not joint and epoch == config.epochs:
            state = AdamState.for_params(arrays[head : head + 2], lr=config.lr)
        order = order_rng.permutation(len(tasks))
        losses = []
        for start in range(0, len(order), config.batch_size):
            b = order[start : start + config.batch_size]
            loss, grads = _batch_loss_and_grads(
                params, X, Ystd, target_idx[b], context_idx[b], low_rank=not (two_stage and joint)
            )
            if not math.isfinite(loss):
                raise OptimizationDiverged(f"non-finite NLL at epoch {epoch}")
            if joint:
                adam_step(arrays, grads, state)
            else:
                g_w, g_b = grads[head].copy(), grads[head + 1].copy()
                g_w[:, 0] = 0.0
                g_b[0] = 0.0
                adam_step(arrays[head : head + 2], [g_w, g_b], state)
            losses.append(loss + offset)
        history["step"].extend(losses)
        history["epoch"].append(float(np.mean(losses)))
        log.debug("gGP epoch %d: nll %.4f", epoch, history["epoch"][-1])
    return params, history


def ggp_predict(params: GgpParams, X, Y, Xstar, full_cov=True) -> GaussianPosterior:
    """Posterior at ``Xstar`` using the whole dataset ``(X, Y)`` as context."""
    out, _ = ggp_forward(params, Xstar, X, Y)
    if full_cov:
        return GaussianPosterior(out.mean, assemble_covariance(out))
    return GaussianPosterior(out.mean, None, out.marginal_variance())
