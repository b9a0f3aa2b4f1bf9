import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mobility_msm import blip, msm
from mobility_msm.data import RegionSeries
from mobility_msm.simulate import BlipSpec, simulate_blip
from mobility_msm.weights import RankError

from .conftest import random_series


def noiseless_blip(T=40, beta=-3.0, drift=(0.2, -0.004), delta=4, seed=0, L1=4.0):
    rng = np.random.default_rng(seed)
    a = np.clip(0.25 + 0.05 * rng.standard_normal(T), 0, 1)
    A = a - a[0]
    t = np.arange(1, T + 1)
    r = np.polynomial.polynomial.polyval(t, drift)
    L = np.empty(T)
    L[0] = L1
    for i in range(1, T):
        L[i] = L[i - 1] + beta * (A[i - delta] if i >= delta else 0.0) + r[i]
    return RegionSeries.from_raw("toy", np.expm1(L), a), L, r


def test_noiseless_recovery():
    s, _, _ = noiseless_blip()
    f = blip.fit_blip(s, k=2)
    assert f.beta == pytest.approx(-3.0, abs=1e-10)
    np.testing.assert_allclose(f.drift_poly_coeffs, [0.2, -0.004], atol=1e-10)


def test_normal_equations_and_aic(series40):
    f = blip.fit_blip(series40, k=3)
    np.testing.assert_allclose(f.design.T @ f.residuals, 0, atol=1e-8)
    n = f.n_obs
    rss = f.residuals @ f.residuals
    assert f.aic == pytest.approx(n * np.log(rss / n) + 2 * 5, rel=1e-12)
    assert f.k_selected == 3


def test_cumulated_drift_reproduces_msm_drift():
    # summing the blip equation gives the MSM with nu(t) = L_1 + sum_{2<=s<=t} r(s)
    s, L, r = noiseless_blip(drift=(0.3, -0.01))
    m = msm.fit(s, k=2)
    assert m.beta == pytest.approx(-3.0, abs=1e-9)
    nu = L[0] + np.r_[0.0, np.cumsum(r[1:])]
    drift_part = m.fitted - m.beta * m.cumulative_mobility
    np.testing.assert_allclose(drift_part, nu, atol=1e-9)


def test_blip_and_msm_estimates_agree_across_reps():
    b, m = [], []
    for seed in range(50):
        spec = BlipSpec(beta=-5.0 + 2 * np.sin(seed), seed=seed)
        s = simulate_blip(spec)
        b.append(blip.fit_blip(s, k=1).beta)
        m.append(msm.fit(s, k=1).beta)
    assert np.corrcoef(b, m)[0, 1] > 0.9


def test_rank_error_names_columns():
    s = RegionSeries.from_raw("c", np.arange(1, 21), np.full(20, 0.3))
    with pytest.raises(RankError, match=r"A\[t-4\]"):
        blip.fit_blip(s, k=1)


def test_too_short():
    with pytest.raises(ValueError):
        blip.fit_blip(random_series(7), k=1)


# P(AIC keeps the true model) among nested candidates with 0..J extra
# parameters, from the chi-square limit of the likelihood-ratio increments
AIC_KEEP_LIMIT = {1: 0.8426, 3: 0.7602}


def _select_rate(drift, noise_sd, pred, reps=100, T=45, k_max=4):
    hits = 0
    for seed in range(reps):
        s = simulate_blip(BlipSpec(T=T, drift_coeffs=drift, noise_sd=noise_sd, noise="increment", seed=seed))
        hits += pred(blip.select_k(s, k_max=k_max))
    return hits / reps


def test_aic_picks_constant_drift_for_linear_trend():
    assert _select_rate((0.3,), 0.05, lambda k: k == 1, k_max=2) >= 0.8


def test_aic_overfit_rate_matches_chi_square_limit():
    rate = _select_rate((0.3,), 0.05, lambda k: k == 1, k_max=4)
    mc_se = np.sqrt(AIC_KEEP_LIMIT[3] * (1 - AIC_KEEP_LIMIT[3]) / 100)
    assert abs(rate - AIC_KEEP_LIMIT[3]) < 3 * mc_se


def test_aic_detects_strong_curvature():
    # r(t) quadratic, so nu(t) is cubic
    drift = (0.1, 0.06, -0.0016)
    assert _select_rate(drift, 0.05, lambda k: k >= 3) > 0.5


def test_selected_k_has_minimal_aic(series40):
    k = blip.select_k(series40, k_max=4)
    aics = blip.aic_path(series40, 4)
    assert all(aics[k] <= v for v in aics.values())
    assert blip.select_k(series40, k_max=1) == 1
    with pytest.raises(ValueError):
        blip.select_k(series40, k_max=0)


def test_markov_ar1_mobility_only_alpha1_significant():
    big = np.zeros(6)
    for seed in range(40):
        rng = np.random.default_rng(seed)
        T = 45
        a = np.empty(T)
        a[0] = 0.3
        for t in range(1, T):
            a[t] = 0.3 + 0.8 * (a[t - 1] - 0.3) + 0.02 * rng.standard_normal()
        s = RegionSeries.from_raw("x", rng.poisson(50, T), a)
        big += np.abs(blip.markov_diagnostics(s).t_stats_A) > 2
    rate = big / 40
    assert rate[0] > 0.8
    assert np.all(rate[1:] < 0.3)


def test_markov_white_noise_calibration():
    inside = []
    for seed in range(100):
        rng = np.random.default_rng(seed)
        s = RegionSeries.from_raw("w", rng.poisson(40, 60), rng.uniform(0.2, 0.4, 60))
        d = blip.markov_diagnostics(s)
        inside.append(np.abs(np.r_[d.t_stats_A, d.t_stats_L]) < 2)
    assert 0.9 <= np.mean(inside) <= 0.99


def test_markov_deterministic_mobility_flagged():
    s = RegionSeries.from_raw("d", np.arange(1, 31) ** 2, np.linspace(0, 0.9, 30))
    with pytest.warns(RuntimeWarning, match="singular"):
        d = blip.markov_diagnostics(s)
    assert d.ill_conditioned


def test_markov_csv(tmp_path, series40):
    blip.write_markov_csv(tmp_path / "m.csv", {"R": blip.markov_diagnostics(series40)})
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "region,coef,t_stat,equation" and len(lines) == 13


@given(st.integers(0, 500), st.integers(1, 3))
def test_pooled_single_region_equals_blip(seed, k):
    s = random_series(35, seed=seed)
    p = blip.fit_pooled([s], k=k)
    f = blip.fit_blip(s, k=k)
    assert p.beta == pytest.approx(f.beta, rel=1e-9, abs=1e-10)
    assert p.se == pytest.approx(f.se_beta, rel=1e-9)


def test_pooled_identical_regions():
    s = random_series(40, seed=3)
    assert blip.fit_pooled([s, s], k=2).beta == pytest.approx(blip.fit_blip(s, k=2).beta, rel=1e-10)


def test_pooled_recovers_common_beta(tmp_path):
    regions = [simulate_blip(BlipSpec(seed=i, L1=4 + i % 3, drift_coeffs=(0.2 + 0.05 * i,))) for i in range(8)]
    p = blip.fit_pooled(regions, k=1)
    assert abs(p.beta + 5) < 3 * p.se
    assert p.n_regions == 8
    p.write_json(tmp_path / "p.json")
    assert set(json.loads((tmp_path / "p.json").read_text())) == {"k", "beta", "se"}
