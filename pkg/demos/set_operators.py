# %% [markdown]
# Set operators
#
# A mean-pooled network gives the same answer however its inputs are ordered.
# The equivariant version returns one output per element, and reordering the
# inputs just reorders the outputs.

# %%
import numpy as np

from setbayes.numerics import Rng
from setbayes.perm_ops import equivariant_forward, init_equivariant, init_invariant, invariant_forward

rng = Rng(0)
x = rng.normal((6, 2))
perm = rng.permutation(6)

# %%
inv = init_invariant(2, 3, rng, hidden=(16,), embed_width=8)
print("invariant output       ", invariant_forward(inv, x)[0])
print("after shuffling inputs ", invariant_forward(inv, x[perm])[0])

# %%
eq = init_equivariant(2, 1, rng, hidden=(16,), self_width=8, int_width=8)
out = equivariant_forward(eq, x)[0][:, 0]
shuffled = equivariant_forward(eq, x[perm])[0][:, 0]
print("per-element outputs    ", np.round(out, 4))
print("shuffled, then undone  ", np.round(shuffled[np.argsort(perm)], 4))

# %%
# The set size is free: the same weights handle 1 or 1000 elements.
for n in (1, 10, 1000):
    print(n, "elements ->", equivariant_forward(eq, rng.normal((n, 2)))[0].shape)
