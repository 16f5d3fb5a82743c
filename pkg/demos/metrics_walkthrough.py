"""
Reading a PAD score set
=======================

Scores are PA probabilities. A sample counts as PA when its score reaches
the threshold. TDR is the share of attacks caught; FDR is the share of live
eyes wrongly flagged.
"""

import numpy as np

from agpad.metrics import ScoreSet, apcer_bpcer, roc, summary, tdr_at_fdr

rng = np.random.default_rng(1)
live = rng.beta(2, 6, 600)   # live eyes mostly score low
pa = rng.beta(6, 2, 300)     # attacks mostly score high
scores = ScoreSet(live, pa)

curve = roc(scores)
print("ROC points:", len(curve.thresholds))
for t, f, d in curve.points()[:5]:
    print(f"  threshold {t:.4f}  FDR {f:.4f}  TDR {d:.4f}")

for target in (0.002, 0.01, 0.05):
    tdr, thr = tdr_at_fdr(scores, target)
    print(f"TDR at {target:.1%} FDR = {tdr:.4f} (threshold {thr:.4f})")

# APCER is 1 - TDR and BPCER is FDR at the same threshold
apcer, bpcer = apcer_bpcer(scores, 0.5)
print(f"APCER {apcer:.4f}  BPCER {bpcer:.4f}")

print()
print(summary(scores))

# with only 200 live samples, 0.2% FDR cannot be resolved
print(summary(ScoreSet(live[:200], pa), fdr_targets=(0.002, 0.01)))
