# When is the nearest structure enough?
#
# The score of a Gaussian mixture is a responsibility-weighted blend of
# per-component scores.  If the components are far apart relative to their
# width, the closest one dominates and a single Gaussian gives the score.
# This script measures how quickly that takes over.

# %%
import numpy as np

from anids import score_oracle as so

sigma = 0.05
rng = np.random.default_rng(0)
x = rng.normal(size=(1, 3)) * sigma

print(" separation/sigma   |exact - nearest|")
for sep in (0.5, 1, 2, 3, 5, 8, 12, 20):
    centers = np.array([[[0.0, 0.0, 0.0]], [[sep * sigma, 0.0, 0.0]]])
    model = so.MixtureModel(centers, sigma**2 * np.eye(3))
    err = np.max(np.abs(so.mixture_score(model, x) - so.nearest_component_approx(model, x)))
    print(f"{sep:>17}   {err:.3e}")

# %% [markdown]
# A sanity check of the analytic score against finite differences of the log
# density on a random three-component, two-atom mixture.

# %%
m = rng.normal(size=(3, 2, 3, 3)) * 0.05
model = so.MixtureModel(rng.normal(size=(3, 2, 3)) * 0.3, m @ np.swapaxes(m, -1, -2) + 0.0025 * np.eye(3))
y = model.centers[1] + rng.normal(size=(2, 3)) * 0.05
num = so.finite_difference_gradient(lambda z: so.mixture_log_density(model, z), y, h=1e-6)
print("max |analytic - finite difference|:", np.max(np.abs(so.mixture_score(model, y) - num)))
