"""Dense linear algebra, seeded randomness, small MLPs with exact backprop and Adam.

Matrices are plain ``float64`` numpy arrays throughout the package.  Every
random draw goes through :class:`Rng`, which fixes the bit generator (PCG64)
and the Gaussian transform (Box-Muller) so that a seed pins the whole run.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg

from .errors import NotPositiveDefinite, ShapeMismatch

__all__ = [
    "Rng",
    "cholesky",
    "jittered_cholesky",
    "solve_psd",
    "log_det_psd",
    "MlpParams",
    "init_mlp",
    "mlp_forward",
    "mlp_backward",
    "AdamState",
    "adam_step",
    "sample_gaussian",
]

log = logging.getLogger(__name__)

JITTER_LADDER = tuple(10.0**k for k in range(-10, -1))  # 1e-10 ... 1e-2


class Rng:
    """Seeded random stream: PCG64 uniforms, Box-Muller Gaussians.

    ``Rng(seed, *stream)`` derives an independent stream from the seed and an
    optional tuple of integer stream keys; equal arguments give equal streams.
    """

    algorithm = "PCG64"
    gaussian_transform = "box-muller"

    def __init__(self, seed: int, *stream: int):
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        entropy = [self.seed & 0xFFFFFFFFFFFFFFFF, *self.stream]
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def spawn(self, *keys: int) -> "Rng":
        return Rng(self.seed, *self.stream, *keys)

    def uniform(self, size=None, low=0.0, high=1.0):
        u = self._gen.random(size)
        return low + (high - low) * u

    def normal(self, size=None):
        shape = () if size is None else (size,) if np.isscalar(size) else tuple(size)
        n = int(np.prod(shape, dtype=np.int64))
        k = (n + 1) // 2
        u1 = 1.0 - self._gen.random(k)  # (0, 1], keeps log finite
        u2 = self._gen.random(k)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.empty(2 * k)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        z = z[:n]
        if size is None:
            return float(z[0])
        return z.reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(n)``, uniformly."""
        return self._gen.permutation(n)[:k]

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)


def _check_symmetric(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeMismatch(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NotPositiveDefinite("matrix has non-finite entries")
    scale = np.max(np.abs(a)) if a.size else 0.0
    if a.size and np.max(np.abs(a - a.T)) > 1e-10 * max(scale, 1e-300):
        raise ShapeMismatch("matrix is not symmetric")
    return a


def jittered_cholesky(a) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor and the jitter that was added to the diagonal.

    On failure the diagonal is loaded with ``lam * mean(diag(a))`` for
    ``lam`` in 1e-10, 1e-9, ..., 1e-2; beyond that :class:`NotPositiveDefinite`.
    """
    a = _check_symmetric(a)
    try:
        return np.linalg.cholesky(a), 0.0
    except np.linalg.LinAlgError:
        pass
    scale = float(np.mean(np.diag(a))) if a.size else 0.0
    if not scale > 0.0:
        raise NotPositiveDefinite("matrix has non-positive mean diagonal")
    eye = np.eye(a.shape[0])
    for lam in JITTER_LADDER:
        jitter = lam * scale
        try:
            L = np.linalg.cholesky(a + jitter * eye)
        except np.linalg.LinAlgError:
            continue
        log.debug("cholesky needed jitter %.3g", jitter)
        return L, jitter
    raise NotPositiveDefinite("cholesky failed after jitter escalation to 1e-2")


def cholesky(a) -> np.ndarray:
    """Lower-triangular ``L`` with ``L @ L.T == a`` (plus any jitter)."""
    return jittered_cholesky(a)[0]


def solve_psd(a, b) -> np.ndarray:
    L = cholesky(a)
    b = np.asarray(b, dtype=float)
    if b.shape[0] != L.shape[0]:
        raise ShapeMismatch(f"rhs has {b.shape[0]} rows, matrix is {L.shape[0]}x{L.shape[0]}")
    return scipy.linalg.cho_solve((L, True), b)


def log_det_psd(a) -> float:
    L = cholesky(a)
    return 2.0 * float(np.sum(np.log(np.diag(L))))


# --------------------------------------------------------------------------
# feedforward networks

_ACTIVATIONS = {
    "tanh": (np.tanh, lambda y: 1.0 - y * y),
    "identity": (lambda x: x, lambda y: np.ones_like(y)),
}


@dataclass
class MlpParams:
    """Weights ``(in, out)`` and biases ``(out,)`` of a fully connected net.

    Hidden layers use ``activation``; the output layer is linear.
    """

    weights: list
    biases: list
    activation: str = "tanh"

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeMismatch("need one bias per weight matrix and at least one layer")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeMismatch(f"layer {k}: weight {w.shape} and bias {b.shape} disagree")
            if k and self.weights[k - 1].shape[1] != w.shape[0]:
                raise ShapeMismatch(f"layer {k} input width does not match previous output")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def in_width(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_width(self) -> int:
        return self.weights[-1].shape[1]

    def arrays(self) -> list:
        """Trainable arrays in a fixed order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.activation)


def init_mlp(layer_sizes: Sequence[int], rng: Rng, activation: str = "tanh") -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    if len(layer_sizes) < 2:
        raise ShapeMismatch("an MLP needs at least input and output sizes")
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform((fan_in, fan_out), -limit, limit))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases, activation)


@dataclass
class _MlpCache:
    lead_shape: tuple
    inputs: list  # 2-D input to every layer
    hidden: list  # activated hidden outputs (for the activation derivative)


def mlp_forward(params: MlpParams, inputs) -> tuple[np.ndarray, _MlpCache]:
    """Evaluate the network row-wise over the last axis of ``inputs``."""
    x = np.asarray(inputs, dtype=float)
    if x.shape[-1] != params.in_width:
        raise ShapeMismatch(f"input width {x.shape[-1]} != network input {params.in_width}")
    lead = x.shape[:-1]
    h = x.reshape(-1, x.shape[-1])
    act = _ACTIVATIONS[params.activation][0]
    layer_inputs, hidden = [], []
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        layer_inputs.append(h)
        h = h @ w + b
        if k < last:
            h = act(h)
            hidden.append(h)
    return h.reshape(*lead, h.shape[-1]), _MlpCache(lead, layer_inputs, hidden)


def mlp_backward(params: MlpParams, cache: _MlpCache, output_grad) -> tuple[list, np.ndarray]:
    """Gradients w.r.t. ``params.arrays()`` (same order) and w.r.t. the inputs."""
    g = np.asarray(output_grad, dtype=float)
    if g.shape != (*cache.lead_shape, params.out_width):
        raise ShapeMismatch(f"output grad shape {g.shape} does not match forward pass")
    g = g.reshape(-1, params.out_width)
    dact = _ACTIVATIONS[params.activation][1]
    n_layers = len(params.weights)
    grads = [None] * (2 * n_layers)
    for k in range(n_layers - 1, -1, -1):
        if k < n_layers - 1:
            g = g * dact(cache.hidden[k])
        grads[2 * k] = cache.inputs[k].T @ g
        grads[2 * k + 1] = g.sum(axis=0)
        g = g @ params.weights[k].T
    return grads, g.reshape(*cache.lead_shape, params.in_width)


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    first_moment: list
    second_moment: list
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **hyper) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **hyper)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if not (len(params) == len(grads) == len(state.first_moment)):
        raise ShapeMismatch("params, grads and optimizer state differ in length")
    for p, g, m in zip(params, grads, state.first_moment):
        if p.shape != np.shape(g) or p.shape != m.shape:
            raise ShapeMismatch(f"shape mismatch {p.shape} / {np.shape(g)} / {m.shape}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params


# --------------------------------------------------------------------------
# Gaussian sampling


def sample_gaussian(rng: Rng, mean, cov, n_draws: int | None = None) -> np.ndarray:
    """Draw from N(mean, cov).

    A 1-D ``cov`` holds diagonal variances (``mean + sqrt(var) * z``); a 2-D
    ``cov`` is a full covariance (``mean + L @ z`` with ``L`` its Cholesky
    factor).  With ``n_draws`` the result has shape ``(n_draws, n)``.
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.asarray(cov, dtype=float)
    n = mean.shape[0]
    size = (n,) if n_draws is None else (n_draws, n)
    if cov.ndim == 1:
        if cov.shape != (n,):
            raise ShapeMismatch("diagonal covariance length differs from the mean")
        if np.any(cov < 0):
            raise NotPositiveDefinite("negative variance")
        return mean + np.sqrt(cov) * rng.normal(size)
    if cov.shape != (n, n):
        raise ShapeMismatch("covariance shape differs from the mean")
    if not np.any(cov):
        return np.broadcast_to(mean, size).copy()
    L = cholesky(cov)
    return mean + rng.normal(size) @ L.T
