"""Permutation-invariant and permutation-equivariant set operators.

Both follow the embedding-averaging-fitting pattern: a shared network embeds
every element, the embeddings are mean-pooled, and a fitting network maps
the result.  The equivariant operator additionally concatenates each
element's own embedding so that outputs stay attached to their inputs.

Sets are arrays of shape ``(N, p)``; a leading batch axis ``(B, N, p)``
evaluates ``B`` independent sets of equal size in one pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptySet, ShapeMismatch
from .numerics import MlpParams, Rng, init_mlp, mlp_backward, mlp_forward

__all__ = [
    "InvariantOperatorParams",
    "EquivariantOperatorParams",
    "init_invariant",
    "init_equivariant",
    "mean_pool_forward",
    "mean_pool_backward",
    "invariant_forward",
    "invariant_backward",
    "equivariant_forward",
    "equivariant_backward",
]


def _as_batch(elements) -> tuple[np.ndarray, bool]:
    x = np.asarray(elements, dtype=float)
    if x.ndim == 2:
        x, squeeze = x[None], True
    elif x.ndim == 3:
        squeeze = False
    else:
        raise ShapeMismatch(f"elements must be (N, p) or (B, N, p), got {x.shape}")
    if x.shape[1] == 0:
        raise EmptySet("set operators need at least one element")
    return x, squeeze


@dataclass
class InvariantOperatorParams:
    embed_net: MlpParams
    fit_net: MlpParams

    def __post_init__(self):
        if self.embed_net.out_width != self.fit_net.in_width:
            raise ShapeMismatch("embedding width must equal fitting-network input width")

    def arrays(self) -> list:
        return self.embed_net.arrays() + self.fit_net.arrays()

    def copy(self):
        return InvariantOperatorParams(self.embed_net.copy(), self.fit_net.copy())


@dataclass
class EquivariantOperatorParams:
    self_net: MlpParams
    int_net: MlpParams
    fit_net: MlpParams
    cond_width: int = 0

    def __post_init__(self):
        if self.self_net.in_width != self.int_net.in_width:
            raise ShapeMismatch("self and interaction networks must read the same element width")
        want = self.self_net.out_width + self.int_net.out_width + self.cond_width
        if self.fit_net.in_width != want:
            raise ShapeMismatch(f"fitting network expects {self.fit_net.in_width} inputs, embeddings give {want}")

    @property
    def element_width(self) -> int:
        return self.self_net.in_width

    def arrays(self) -> list:
        return self.self_net.arrays() + self.int_net.arrays() + self.fit_net.arrays()

    def copy(self):
        return EquivariantOperatorParams(
            self.self_net.copy(), self.int_net.copy(), self.fit_net.copy(), self.cond_width
        )


def init_invariant(p, q, rng: Rng, hidden=(64, 64), embed_width=32) -> InvariantOperatorParams:
    return InvariantOperatorParams(
        init_mlp([p, *hidden, embed_width], rng),
        init_mlp([embed_width, *hidden, q], rng),
    )


def init_equivariant(
    p, q, rng: Rng, hidden=(64, 64), self_width=32, int_width=32, cond_width=0
) -> EquivariantOperatorParams:
    return EquivariantOperatorParams(
        init_mlp([p, *hidden, self_width], rng),
        init_mlp([p, *hidden, int_width], rng),
        init_mlp([self_width + int_width + cond_width, *hidden, q], rng),
        cond_width,
    )


# --------------------------------------------------------------------------
# mean pooling of a shared embedding


def mean_pool_forward(net: MlpParams, elements):
    """Mean over the set axis of ``net`` applied to every element."""
    x, squeeze = _as_batch(elements)
    emb, cache = mlp_forward(net, x)
    pooled = emb.mean(axis=1)
    return (pooled[0] if squeeze else pooled), (cache, x.shape[1], squeeze)


def mean_pool_backward(net: MlpParams, cache, pooled_grad):
    mlp_cache, n, squeeze = cache
    g = np.asarray(pooled_grad, dtype=float)
    if squeeze:
        g = g[None]
    g_emb = np.broadcast_to(g[:, None, :] / n, (*g.shape[:1], n, g.shape[-1]))
    grads, x_grad = mlp_backward(net, mlp_cache, g_emb)
    return grads, (x_grad[0] if squeeze else x_grad)


# --------------------------------------------------------------------------
# invariant operator


def invariant_forward(params: InvariantOperatorParams, elements):
    """``fit(mean_i embed(x_i))``: one ``q``-vector per set."""
    pooled, pool_cache = mean_pool_forward(params.embed_net, elements)
    out, fit_cache = mlp_forward(params.fit_net, pooled)
    return out, (pool_cache, fit_cache)


def invariant_backward(params: InvariantOperatorParams, cache, output_grad):
    pool_cache, fit_cache = cache
    fit_grads, pooled_grad = mlp_backward(params.fit_net, fit_cache, output_grad)
    embed_grads, x_grad = mean_pool_backward(params.embed_net, pool_cache, pooled_grad)
    return embed_grads + fit_grads, x_grad


# --------------------------------------------------------------------------
# equivariant operator


@dataclass
class _EquivariantCache:
    self_cache: object
    int_cache: object
    fit_cache: object
    n: int
    squeeze: bool
    has_cond: bool


def equivariant_forward(params: EquivariantOperatorParams, elements, conditioning=None):
    """``out_i = fit(self(x_i) ++ mean_j int(x_j) ++ conditioning)``.

    Returns ``(outputs, cache)``; outputs have shape ``(N, q)`` (or
    ``(B, N, q)`` for batched input).
    """
    x, squeeze = _as_batch(elements)
    if x.shape[-1] != params.element_width:
        raise ShapeMismatch(f"element width {x.shape[-1]} != operator width {params.element_width}")
    b, n, _ = x.shape
    s, self_cache = mlp_forward(params.self_net, x)
    t, int_cache = mlp_forward(params.int_net, x)
    pooled = t.mean(axis=1)
    parts = [s, np.broadcast_to(pooled[:, None, :], (b, n, pooled.shape[-1]))]
    if params.cond_width:
        if conditioning is None:
            raise ShapeMismatch("operator expects a conditioning vector")
        c = np.asarray(conditioning, dtype=float).reshape(-1, params.cond_width)
        if c.shape[0] != b:
            raise ShapeMismatch("one conditioning vector per set is required")
        parts.append(np.broadcast_to(c[:, None, :], (b, n, params.cond_width)))
    elif conditioning is not None and np.size(conditioning):
        raise ShapeMismatch("operator was built without a conditioning input")
    out, fit_cache = mlp_forward(params.fit_net, np.concatenate(parts, axis=-1))
    cache = _EquivariantCache(self_cache, int_cache, fit_cache, n, squeeze, bool(params.cond_width))
    return (out[0] if squeeze else out), cache


def equivariant_backward(params: EquivariantOperatorParams, cache: _EquivariantCache, output_grads):
    """Gradients ``(param_grads, element_grads, conditioning_grad)``.

    ``param_grads`` follows ``params.arrays()``; ``conditioning_grad`` is
    ``None`` for operators without a conditioning input.
    """
    g = np.asarray(output_grads, dtype=float)
    if cache.squeeze:
        g = g[None]
    fit_grads, g_in = mlp_backward(params.fit_net, cache.fit_cache, g)
    h1 = params.self_net.out_width
    h2 = params.int_net.out_width
    g_self = g_in[..., :h1]
    g_pooled = g_in[..., h1 : h1 + h2].sum(axis=1)
    g_int = np.broadcast_to(g_pooled[:, None, :] / cache.n, g_self.shape[:2] + (h2,))
    self_grads, x_grad_s = mlp_backward(params.self_net, cache.self_cache, g_self)
    int_grads, x_grad_t = mlp_backward(params.int_net, cache.int_cache, g_int)
    x_grad = x_grad_s + x_grad_t
    cond_grad = g_in[..., h1 + h2 :].sum(axis=1) if cache.has_cond else None
    if cache.squeeze:
        x_grad = x_grad[0]
        cond_grad = None if cond_grad is None else cond_grad[0]
    return self_grads + int_grads + fit_grads, x_grad, cond_grad
