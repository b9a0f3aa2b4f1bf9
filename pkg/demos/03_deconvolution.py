"""
From deaths back to infections
==============================

Deaths lag infections by about three weeks with a wide spread. Simulate
the working model, recover scaled infections by penalized non-negative
deconvolution and refit the model on log infections.
"""

import numpy as np

from mobility_msm import deconv, delay, msm
from mobility_msm.simulate import MobilityPolicy, WorkingModelSpec, hump_profile, simulate_working

T = 45
t = np.arange(1, T + 1)
base = hump_profile(T, plateau=0.0)
beta = -3.0
spec = WorkingModelSpec(T=T, c=tuple(0.15 - 0.004 * t - beta * base[0]), gimel_beta=beta, I1=2000,
                        policy=MobilityPolicy(rho=0.9, noise_sd=0.03, base=tuple(base)),
                        infection_sd=0.03, seed=1)
series, infections = simulate_working(spec)
kernel = delay.build_gamma_kernel()
print(f"delay kernel: mean {kernel.mean_days} days, mean lag {kernel.mean_lag_weeks:.2f} weeks")

for lam in deconv.LAMBDA_GRID:
    r = deconv.deconvolve(series, kernel, lam)
    err = np.linalg.norm(r.infections - infections[:-1]) / np.linalg.norm(infections[:-1])
    refit = deconv.refit_on_infections(r, series, k=2)
    print(f"lambda {lam:5g}: infection error {err:.2f}, refit beta {refit.beta:5.2f} (truth {beta})")

# The point-mass delay model on deaths, for comparison.
print(f"point-mass model on deaths: beta {msm.fit(series, k=2).beta:5.2f}")
