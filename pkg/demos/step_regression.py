# %% [markdown]
# Learning a regression prior for a step function
#
# The exact GP with a squared-exponential kernel smooths across the jumps of
# the indicator on [0.3, 0.6]. The learned model is trained on many random
# context/target splits of the same 30 noisy points and learns a sharper mean.
# It uses the desk preset's settings for one dataset, under a minute.

# %%
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from setbayes.ggp import ggp_predict, train_ggp
from setbayes.gp import GpOptConfig, gp_posterior, optimize_hyperparams
from setbayes.harness.config import ExperimentConfig
from setbayes.harness.experiments import ggp_config_from
from setbayes.harness.benchmarks import generate_regression_dataset, grid_rmse, step_function
from setbayes.numerics import Rng

rng = Rng(0)
data = generate_regression_dataset(step_function, 1, 0.01, rng.spawn(0), count=30)
xs = np.linspace(0, 1, 400)[:, None]
truth = step_function(xs[:, 0])

# %%
kernel = optimize_hyperparams(data.X, data.Y, GpOptConfig(n_starts=3, iterations=300), rng.spawn(1))
gp = gp_posterior(kernel, data.X, data.Y, xs, full_cov=False)
print("fitted kernel:", kernel)

# %%
cfg = ggp_config_from(ExperimentConfig("ggp-step").settings)
params, history = train_ggp(data.X, data.Y, cfg, rng.spawn(2))
ggp = ggp_predict(params, data.X, data.Y, xs, full_cov=False)
print(f"RMSE  GP {grid_rmse(gp.mean, truth):.4f}   gGP {grid_rmse(ggp.mean, truth):.4f}")

# %%
out = Path(__file__).with_name("out")
out.mkdir(exist_ok=True)
fig, ax = plt.subplots(figsize=(7, 4))
ax.plot(xs, truth, "k", lw=1, label="truth")
for name, post in (("GP", gp), ("gGP", ggp)):
    sd = np.sqrt(post.variance)
    ax.plot(xs, post.mean, label=name)
    ax.fill_between(xs[:, 0], post.mean - 2 * sd, post.mean + 2 * sd, alpha=0.2)
ax.plot(data.X, data.Y, "k.", label="observations")
ax.legend()
fig.savefig(out / "step_regression.png", dpi=120)
print("figure written to", out / "step_regression.png")
