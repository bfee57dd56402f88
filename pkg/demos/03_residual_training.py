"""Fit the mixed-model reference, then learn what it misses.

One seed, a few epochs and a shortened token cap keep this under a couple
of minutes on a laptop. The untrained transformer (zero head) reproduces
the mixed model exactly, which is the starting point training improves on.
"""
import numpy as np

from gapstride.cohort import SyntheticConfig, build_anchors, generate_synthetic
from gapstride.evaluation import compute_metrics, split_participants
from gapstride.model import ModelConfig
from gapstride.training import TrainConfig, fit_lmm_baseline, train_baseline, train_proposed

anchors = list(build_anchors(generate_synthetic(SyntheticConfig(n_participants=300, seed=7))))
plan = split_participants({a.participant_id for a in anchors}, 42)
train, val, test = plan.partition(anchors)
print(f"{len(train)} train / {len(val)} val / {len(test)} test anchors")

lmm = fit_lmm_baseline(train)
print("\nBIC path:")
for step in lmm.selection:
    bic = "-" if step.bic is None else f"{step.bic:.1f}"
    print(f"  {step.block:<18s} {bic:>9s} {'kept' if step.accepted else step.note}")
print("selected:", lmm.fit.columns)

y = np.array([a.y for a in test])
rep = compute_metrics(y, lmm.predict(test))
print(f"\nmixed model      mse {rep.mse:.3f}  corr {rep.corr:.3f}")

# zero epochs: the residual head is still zero, so predictions match the LMM
zero = train_proposed(train, val, TrainConfig(epochs=0), ModelConfig(m_max=48), lmm=lmm)
print("zero-epoch model identical to LMM:", np.array_equal(zero.predict(test), lmm.predict(test)))

model = train_proposed(train, val, TrainConfig(epochs=12, seed=42), ModelConfig(m_max=48), lmm=lmm)
rep = compute_metrics(y, model.predict(test))
print(f"gap transformer  mse {rep.mse:.3f}  corr {rep.corr:.3f}  (best epoch {model.result.best_epoch})")
print("learned lambda per year:\n", np.round(12 * model.model.lambdas(), 4))

for r in model.result.log[:: max(1, len(model.result.log) // 6)]:
    print(f"  epoch {r.epoch:3d}  train {r.train_loss:.4f}  val {r.val_mse:.4f}")

grud = train_baseline("grud", train, val, TrainConfig(epochs=12, seed=42))
rep = compute_metrics(y, grud.predict(test))
print(f"\nGRU-D            mse {rep.mse:.3f}  corr {rep.corr if rep.corr is None else round(rep.corr, 3)}")
