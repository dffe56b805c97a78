"""
Why smooth the empirical null?
==============================

With three size strata each provider is compared against its stratum's
null, so the critical value jumps at stratum boundaries.  The smoothed null
changes gradually with size.
"""
import numpy as np
from scipy.stats import norm

from provprofile.simulation import gen_survival, preset
from provprofile.smoothing import fit_smoothed_null, stratified_nulls
from provprofile.survival import smr_pipeline

ds, _ = gen_survival(preset("fig5"), seed=11)
res = smr_pipeline(ds)
size = res.patients.astype(float)
z05 = norm.isf(0.05)

mean, sd, groups = stratified_nulls(size, res.z, 3)
stratified = mean + z05 * sd
smooth = fit_smoothed_null(size, res.z, 20)

order = np.argsort(size, kind="stable")
cuts = np.cumsum([g.count for g in groups])[:-1]
print("stratum boundary     size    stratified threshold     smoothed threshold")
for c in cuts:
    lo, hi = order[c - 1], order[c]
    print(f"{'':16s}{size[lo]:6.0f} -> {size[hi]:3.0f}   "
          f"{stratified[lo]:6.3f} -> {stratified[hi]:6.3f}      "
          f"{smooth.threshold(size[lo]):6.3f} -> {smooth.threshold(size[hi]):6.3f}")
