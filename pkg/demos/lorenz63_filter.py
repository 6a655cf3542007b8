# %% [markdown]
# A learned analysis step for Lorenz-63
#
# A large-ensemble EnKF run produces (prior, observation, posterior) records.
# A set network trained on them maps any ensemble to its update, then runs
# with only two members, where the EnKF's sample covariance is poor.

# %%
from functools import partial

import numpy as np

from setbayes.enkf import enkf_analysis, init_ensemble, run_filter, simulate_truth
from setbayes.ennf import EnnfConfig, build_dataset, ennf_analysis, train_ennf
from setbayes.harness.benchmarks import relative_rmse
from setbayes.lorenz import L63_BASELINE_INIT, L63_OBSERVATION, L63_PRIOR_VAR, L63_TRUE_INIT, Lorenz63Params, l63_rhs
from setbayes.numerics import Rng

rhs = partial(l63_rhs, Lorenz63Params())
truth = simulate_truth(rhs, L63_TRUE_INIT, L63_OBSERVATION, 200, Rng(0, 0))

# %%
# Training records from one 50-member EnKF run over the first 100 windows.
Z0 = init_ensemble(L63_BASELINE_INIT, L63_PRIOR_VAR, 50, Rng(0, 1))
records, _ = run_filter(rhs, L63_OBSERVATION, Z0, truth, enkf_analysis, Rng(0, 2), n_windows=100)
data = build_dataset(records)
print(len(data), "training pairs")

# %%
cfg = EnnfConfig(hidden=(32, 32), self_width=16, int_width=16, epochs=60, cosine_decay=True, anomaly_features=True)
params, history = train_ennf(data, cfg, Rng(0, 3))
print(f"training MSE {history[0]:.4f} -> {history[-1]:.4f}")

# %%
# Both filters with two members over all 200 windows.
for name, fn in (("EnKF", enkf_analysis), ("EnNF", lambda Z, D, Y, C: ennf_analysis(params, Z, D, Y))):
    scores = []
    for seed in range(3):
        Z0 = init_ensemble(L63_BASELINE_INIT, L63_PRIOR_VAR, 2, Rng(0, 5, seed))
        _, means = run_filter(rhs, L63_OBSERVATION, Z0, truth, fn, Rng(0, 6, seed), keep_records=False)
        scores.append(relative_rmse(means, truth.states))
    print(f"{name} N=2 relative RMSE {np.mean(scores):.4f}")
