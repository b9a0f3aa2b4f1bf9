"""
Does the interval cover?
========================

Refit the model on 500 blip trajectories with known beta = -5 and count
how often the 95% interval contains it, with normal and fixed-b critical
values.
"""

from mobility_msm.simulate import BlipSpec, coverage_experiment

spec = BlipSpec(beta=-5.0, T=45)
for critical in ("normal", "fixed-b"):
    for weighted in (True, False):
        r = coverage_experiment(spec, reps=500, weighted=weighted, critical=critical)
        print(f"{critical:8s} weighted={weighted!s:5s}: coverage {r.coverage:.3f}, "
              f"mean beta {r.mean_beta:.4f} ({r.bias_in_mc_se:+.2f} MC se)")
