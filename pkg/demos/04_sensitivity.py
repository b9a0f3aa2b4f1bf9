"""
How much hidden confounding would it take?
==========================================

Two views: the extra width, in standard errors, that would make the
interval reach zero, and the range of the estimate when every weight may
be off by a factor of Gamma.
"""

from mobility_msm import msm, sensitivity, weights
from mobility_msm.simulate import BlipSpec, simulate_blip

for noise in (0.05, 0.15, 0.4):
    s = simulate_blip(BlipSpec(beta=-5.0, noise_sd=noise, seed=3))
    fit = msm.fit(s, weights.estimate_weights(s))
    print(f"noise {noise}: beta {fit.beta:.2f} (se {fit.se_beta:.2f}), delta* = {sensitivity.delta_critical(fit):.2f}")
    for gamma in (1.5, 3.0):
        r = sensitivity.sensitivity_report(s, fit, gamma=gamma)
        print(f"    gamma {gamma}: beta in [{r.beta_lower:.2f}, {r.beta_upper:.2f}], "
              f"still significant: {r.significant_at_gamma}")
