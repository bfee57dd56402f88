"""Build a synthetic cohort, cut anchor samples, and look at what they contain."""
import numpy as np

from gapstride.cohort import (SyntheticConfig, build_anchors, compute_train_stats,
                              generate_synthetic, summarize_cohort)

# a small cohort, same generator the tests use
cohort = generate_synthetic(SyntheticConfig(n_participants=120, seed=1))
print(len(cohort.participants), "participants,", len(cohort.visits), "visit rows")

# every MCI visit with a follow-up 18-30 months later becomes an anchor
anchors = build_anchors(cohort)
print(len(anchors), "anchors; exclusions:", dict(anchors.exclusions))

a = anchors[0]
print("\nfirst anchor:", a.participant_id, "at month", a.anchor_month)
print("  target (CDR-SB change):", a.y, "over", a.gap_months, "months")
print("  history tokens:", len(a.history), " oldest tau:", min(t.tau for t in a.history))
for name in ("age", "CDRSB", "mri_missing", "mri_recency_months", "csf_missing"):
    print(f"  {name:>20s} = {a.x[name]}")

# cohort-level summary: how often is a biomarker already on file at the anchor?
s = summarize_cohort(anchors, cohort)
print(f"\nmedian gap {s.median_gap_months} months")
print(f"MRI same visit {s.same_visit_mri_pct:.1f}%, any prior {s.any_prior_mri_pct:.1f}%")
print(f"CSF same visit {s.same_visit_csf_pct:.1f}%, any prior {s.any_prior_csf_pct:.1f}%")

# the standardization used by every sequence model comes from training anchors only
stats = compute_train_stats(anchors)
print("\nper-variable (mean, sd) for the first three ids:")
for k in (1, 2, 3):
    print(" ", k, np.round(stats[k], 3))

ys = np.array([a.y for a in anchors])
print(f"\ntarget mean {ys.mean():.3f}, sd {ys.std():.3f}, share worsening {np.mean(ys > 0):.2f}")
