"""How the time-gap penalty reshapes attention.

Two keys carry identical content scores; only their distance from the
query differs. With lambda = 0 they split attention evenly, and as lambda
grows the distant key loses weight smoothly.
"""
import numpy as np

from gapstride import autodiff as ad
from gapstride.model import ModelConfig, attention_weights
from gapstride.oracles import alpha_derivative, alpha_of_gap

q = ad.Tensor(np.zeros((1, 1, 1, 4)))
k = ad.Tensor(np.zeros((1, 1, 2, 4)))
gaps = np.array([[[0.0, 12.0]]])  # the second key is a year away
mask = np.ones((1, 2), dtype=bool)

print("lambda/month   weight(near)  weight(far)")
for lam in (0.0, 0.1 / 12, 0.05, 0.1, 0.25):
    w = attention_weights(q, k, gaps, mask, ad.Tensor(np.array([lam]))).data.ravel()
    print(f"{lam:12.4f}   {w[0]:.4f}        {w[1]:.4f}")

# the initial penalty is 0.1 per year, stored through softplus
cfg = ModelConfig()
print("\ninitial eta:", round(cfg.eta_init, 4), "-> lambda", ad.softplus_value(cfg.eta_init) * 12,
      "per year")

# weight on one key as it drifts further back, with three competitors held fixed
rng = np.random.default_rng(0)
qv, keys = rng.normal(size=4), rng.normal(size=(4, 4))
tau = np.array([-3.0, -6.0, -9.0, 0.0])
d_grid = np.arange(0.0, 37.0, 6.0)
lam = 0.08
alphas = [alpha_of_gap(qv, keys, tau, 3, d, lam) for d in d_grid]
print("\nd (months):", d_grid)
print("alpha_b(d):", np.round(alphas, 4))
print("strictly decreasing:", bool(np.all(np.diff(alphas) < 0)))

# closed-form slope vs a numerical one at d = 12
s = keys @ qv / 2.0 - lam * np.abs(tau)
A = float(np.sum(np.exp(np.delete(s, 3))))
z = float(np.exp(s[3] + lam * abs(tau[3]) - lam * 12.0))
h = 1e-5
num = (alpha_of_gap(qv, keys, tau, 3, 12 + h, lam) - alpha_of_gap(qv, keys, tau, 3, 12 - h, lam)) / (2 * h)
print(f"\nslope at 12 months: closed form {alpha_derivative(lam, A, z):.8f}, numerical {num:.8f}")
