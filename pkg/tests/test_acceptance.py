"""Acceptance criteria; each test records one PASS/FAIL/SKIP line.

Run alone with ``pytest tests/test_acceptance.py -v``; the lines appear
under "acceptance criteria" in the terminal summary.
"""

import datetime as dt
import os
import socket
import time
from urllib.parse import urlparse

import numpy as np
import pytest

from mobility_msm import blip, counterfactual, data, deconv, delay, msm, sensitivity, simulate, weights
from mobility_msm.simulate import BlipSpec, FourVariableModel

from .conftest import ACCEPTANCE_LINES


def record(tag, ok, detail, t0):
    line = f"{'PASS' if ok else 'FAIL'}  {tag}: {detail} [{time.perf_counter() - t0:.1f} s]"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def kkt(H, T):
    n, p = H.shape
    K = np.block([[np.eye(n), H], [H.T, np.zeros((p, p))]])
    rhs = np.r_[np.ones(n), T, np.zeros(p - 1)]
    return np.linalg.solve(K, rhs)[:n]


def test_c1_weight_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    T, worst_c, worst_o = 40, 0.0, 0.0
    for _ in range(100):
        H = np.ones((T, 5))
        H[:, 1:] = rng.standard_normal((T, 4)) * rng.uniform(0.1, 20, 4)
        w = weights.solve_weights(H).values
        worst_c = max(worst_c, abs(w.sum() - T), np.max(np.abs(H[:, 1:].T @ w)))
        worst_o = max(worst_o, np.max(np.abs(w - kkt(H, T))))
    secs = time.perf_counter() - t0
    ok = worst_c < 1e-8 and worst_o < 1e-8 and secs < 5
    assert record("C1 weights", ok, f"max constraint err {worst_c:.1e}, max |W - KKT| {worst_o:.1e} (tol 1e-8)", t0)


def test_c2_delay_kernel():
    t0 = time.perf_counter()
    mean, cv = delay.compose_delay(5.1, 0.86, 18.8, 0.45, n_draws=1_000_000, seed=0)
    lag = delay.build_gamma_kernel(mean, cv).mean_lag_weeks
    secs = time.perf_counter() - t0
    ok = abs(mean - 23.9) < 0.2 and abs(cv - 0.40) < 0.02 and abs(lag - 23.9 / 7) < 0.15 and secs < 10
    assert record("C2 delay", ok, f"mean {mean:.3f} d, cv {cv:.4f}, pmf mean lag {lag:.3f} wk vs {23.9 / 7:.3f}", t0)


def test_c3_estimator_recovery():
    t0 = time.perf_counter()
    rep = simulate.coverage_experiment(BlipSpec(beta=-5.0, T=45, seed=0), reps=500)
    secs = time.perf_counter() - t0
    ok = abs(rep.bias_in_mc_se) <= 2 and 0.90 <= rep.coverage <= 0.99 and secs < 120
    detail = (f"estimated weights, mean {rep.mean_beta:.4f} ({rep.bias_in_mc_se:+.2f} MC se, limit 2), "
              f"coverage {rep.coverage:.3f} in [0.90, 0.99]")
    record("C3 recovery", ok, detail, t0)
    ref = simulate.coverage_experiment(BlipSpec(beta=-5.0, T=45, seed=0), reps=500, weighted=False)
    ACCEPTANCE_LINES.append(
        f"INFO  C3 same draws, unit weights: mean {ref.mean_beta:.4f} ({ref.bias_in_mc_se:+.2f} MC se), "
        f"coverage {ref.coverage:.3f}"
    )
    assert ok


def test_c4_null_paradox():
    t0 = time.perf_counter()
    t = np.array([simulate.null_paradox_demo(n=1000, seed=i) for i in range(200)])
    plug = np.mean(np.abs(t[:, 0]) > 4)
    ipw = np.mean(np.abs(t[:, 1]) < 2)
    ok = plug >= 0.9 and ipw >= 0.85 and time.perf_counter() - t0 < 120
    assert record("C4 null paradox", ok, f"plug-in |t|>4 in {plug:.1%} (>=90%), MSM |t|<2 in {ipw:.1%} (>=85%)", t0)


def test_c5_g_formula_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    worst = 0.0
    for i in range(10):
        theta = rng.normal(size=4)
        m = FourVariableModel(beta0=float(rng.normal()), theta=tuple(theta), u_sd=float(rng.uniform(0, 2)))
        a0, a1 = rng.normal(size=2)
        est, se = simulate.g_formula_oracle(m, (a0, a1), n_mc=100_000, seed=100 + i)
        closed = theta[0] + theta[1] * a0 + theta[2] * m.beta0 + theta[3] * a1
        worst = max(worst, abs(est - closed) / se)
    assert record("C5 g-formula", worst < 3, f"max |MC - closed form| = {worst:.2f} MC se (limit 3)", t0)


def _smooth(T, rng):
    t = np.arange(1, T)
    return 5 + rng.uniform(50, 400) * np.exp(-0.5 * ((t - rng.uniform(8, 25)) / rng.uniform(4, 9)) ** 2)


def test_c6_deconvolution():
    t0 = time.perf_counter()
    kern = delay.build_gamma_kernel()
    rng = np.random.default_rng(6)
    T = 45
    I = _smooth(T, rng)
    Y = np.r_[0.0, deconv.trimmed_F(kern, T) @ I]
    err = np.linalg.norm(deconv.deconvolve(Y, kern, 0.01).infections - I) / np.linalg.norm(I)
    r1 = deconv.deconvolve(Y, kern, 1.0)
    fit = np.linalg.norm(r1.implied_deaths - Y[1:]) / np.linalg.norm(Y[1:])
    mono = 0
    for _ in range(20):
        n = int(rng.integers(20, 46))
        Yi = rng.poisson(np.r_[0.0, deconv.trimmed_F(kern, n) @ _smooth(n, rng)]).astype(float)
        pen = [deconv.penalty(deconv.deconvolve(Yi, kern, lam).infections) for lam in (0.01, 0.1, 1, 10, 100)]
        mono += all(b <= a * (1 + 1e-6) + 1e-9 for a, b in zip(pen, pen[1:]))
    ok = err < 0.1 and fit < 0.1 and mono == 20 and time.perf_counter() - t0 < 60
    assert record("C6 deconvolution", ok, f"rel err {err:.4f} at lam 0.01, implied-death err {fit:.4f} "
                  f"at lam 1, monotone path {mono}/20", t0)


def test_c7_sensitivity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    s40 = simulate.simulate_blip(BlipSpec(seed=7))
    w40 = weights.estimate_weights(s40)
    f40 = msm.fit(s40, w40)
    g1 = sensitivity.gamma_bounds(s40, w40, gamma=1.0)
    exact = g1[0] == g1[1] and abs(g1[0] - f40.beta) < 1e-10
    worst, matched = 0.0, 0
    for i in range(100):
        T = int(rng.integers(8, 13))
        s = data.RegionSeries.from_raw("x", rng.poisson(30, T) + 1, np.clip(0.3 + 0.1 * rng.standard_normal(T), 0, 1))
        w = rng.uniform(0.5, 1.5, T)
        gam = float(rng.uniform(1.2, 4.0))
        X = msm.design_matrix(msm.orthogonal_basis(T, 1), msm.cumulative_mobility(s, 4))
        lo, hi = sensitivity.gamma_bounds(s, w, k=1, gamma=gam, method="multistart", seed=i)
        blo, bhi = sensitivity.brute_force_bounds(X, s.log_deaths, w, gam)
        d = max(abs(lo - blo), abs(hi - bhi))
        worst = max(worst, d)
        matched += d < 1e-6
    dstar = sensitivity.delta_critical((-5.0, 1.0), 0.05)
    ok = exact and matched == 100 and round(dstar, 2) == 3.04
    assert record("C7 sensitivity", ok, f"gamma=1 exact: {exact}, multistart = enumeration in {matched}/100 "
                  f"(max diff {worst:.1e}), delta* = {dstar:.4f}", t0)


def test_c8_counterfactual_mechanics():
    t0 = time.perf_counter()
    got = counterfactual.vigilant(np.arange(1, 21)).tolist()
    pattern = got == [1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 10, 11, 11, 12, 12, 13, 13, 14, 14, 15]
    s = simulate.simulate_blip(BlipSpec(beta=0.0, noise_sd=0.0, seed=8))
    f = msm.fit(s, k=1)
    f0 = msm.MsmFit(**{**f.__dict__, "beta": 0.0})
    curves = [counterfactual.counterfactual_curve(f0, counterfactual.make_intervention(s, lab)).theta
              for lab in ("observed", "early1", "early2", "vigilant")]
    spread = max(np.max(np.abs(c / curves[0] - 1)) for c in curves)
    ok = pattern and spread < 1e-12 and abs(f.beta) < 1e-9
    assert record("C8 counterfactual", ok, f"vigilant pattern exact: {pattern}, max relative curve spread "
                  f"at beta=0: {spread:.1e}", t0)


STATES = [
    "AL", "AZ", "AR", "CA", "CO", "CT", "DE", "FL", "GA", "ID", "IL", "IN", "IA", "KS", "KY", "LA", "ME", "MD",
    "MA", "MI", "MN", "MS", "MO", "MT", "NE", "NV", "NH", "NJ", "NM", "NY", "NC", "ND", "OH", "OK", "OR", "PA",
    "RI", "SC", "SD", "TN", "TX", "UT", "VT", "VA", "WA", "WV", "WI", "WY",
]


def _reachable(url):
    host = urlparse(url).hostname
    try:
        socket.getaddrinfo(host, 443)
        with socket.create_connection((host, 443), timeout=5):
            return True
    except OSError:
        return False


def test_c9_real_data_pooled_fit():
    t0 = time.perf_counter()
    endpoint = os.environ.get(data.ENDPOINT_ENV) or data.DEFAULT_ENDPOINT
    if not _reachable(endpoint):
        ACCEPTANCE_LINES.append(f"SKIP  C9 real data: covidcast endpoint {endpoint} unreachable (optional criterion)")
        pytest.skip("covidcast endpoint unreachable")
    start, end = dt.date(2020, 2, 15), dt.date(2020, 12, 25)
    series = [data.fetch_covidcast(s, start, end) for s in STATES]
    p = blip.fit_pooled(series, k=1)
    neg = np.mean([blip.fit_blip(s, k=1).beta < 0 for s in series])
    ok = abs(p.beta + 5.20) <= 0.15 * 5.20 and abs(p.se - 0.27) <= 0.15 * 0.27 and neg > 0.5
    assert record("C9 real data", ok, f"pooled beta {p.beta:.3f} (se {p.se:.3f}) vs -5.20 (0.27); "
                  f"{neg:.0%} of states negative", t0)
