"""Synthetic data: the working infection model, the blip model, g-formula
oracles and the null-paradox experiment.

Working model (weekly)::

    A_t  ~ policy(A_{t-1}, Y_{t-1})
    I_t  = I_{t-1} exp(c_t + beta_g A_t) * eta_t,     E[eta_t] = 1
    Y_t  = sum_s f(s, t) I_s + xi_t

``I_0 = I1``. The infection noise is multiplicative with mean one so
infections stay positive while still having mean-zero deviations from
the deterministic recursion. Under any fixed mobility path this gives

    E[Y_t^a] = sum_s f(s, t) exp(log I1 + sum_{r<=s} (c_r + beta_g a_r)).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Protocol, Sequence

import numpy as np

from .data import RegionSeries
from .delay import DEFAULT_DELTA, DelayKernel, build_F, build_gamma_kernel
from .msm import fit as fit_msm_series
from .weights import estimate_weights

MAX_LOG = 700.0


def hump_profile(T: int, base: float = 0.2, height: float = 0.12, center: float = 9.0,
                 width: float = 3.0, plateau: float = 0.04) -> np.ndarray:
    """Stay-at-home fraction shaped like 2020: a spring peak settling to a raised plateau."""
    t = np.arange(1, T + 1, dtype=float)
    after = np.where(t > center, 1 - np.exp(-(t - center) / width), 0.0)
    return base + height * np.exp(-0.5 * ((t - center) / width) ** 2) + plateau * after


@dataclass(frozen=True)
class MobilityPolicy:
    """Linear-Gaussian mobility response.

    ``A_t = base_t + e_t`` with ``e_t = rho e_{t-1} + kappa log(Y_{t-1} + 1) + N(0, noise_sd^2)``,
    clipped to ``[0, 1]``. ``base`` defaults to :func:`hump_profile`.
    ``kappa > 0`` makes people stay home more after high death counts,
    which confounds the mobility effect through past deaths.
    """

    rho: float = 0.5
    kappa: float = 0.0
    noise_sd: float = 0.01
    base: tuple[float, ...] | None = None

    def base_path(self, T: int) -> np.ndarray:
        if self.base is None:
            return hump_profile(T)
        b = np.asarray(self.base, float)
        if b.size < T:
            raise ValueError(f"policy base has {b.size} weeks, need {T}")
        return b[:T]

    def step(self, base_t, e_prev, y_prev, z):
        e = self.rho * e_prev + self.kappa * np.log1p(y_prev) + self.noise_sd * z
        return np.clip(base_t + e, 0.0, 1.0), e

    @classmethod
    def from_dict(cls, d: dict) -> "MobilityPolicy":
        d = dict(d)
        if d.get("base") is not None:
            d["base"] = tuple(float(v) for v in d["base"])
        return cls(**d)


@dataclass(frozen=True)
class WorkingModelSpec:
    T: int
    c: tuple[float, ...]
    gimel_beta: float = -2.0
    I1: float = 100.0
    policy: MobilityPolicy = field(default_factory=MobilityPolicy)
    infection_sd: float = 0.0
    death_sd: float = 0.0
    kernel: DelayKernel = field(default_factory=build_gamma_kernel)
    seed: int = 0
    round_deaths: bool = True

    def __post_init__(self):
        if self.T < 2:
            raise ValueError("T must be >= 2")
        if len(self.c) != self.T:
            raise ValueError(f"c has {len(self.c)} entries, expected T={self.T}")
        if not self.I1 > 0:
            raise ValueError("I1 must be positive")
        if self.infection_sd < 0 or self.death_sd < 0 or self.policy.noise_sd < 0:
            raise ValueError("noise sds must be >= 0")

    def closed_form_mean(self, path) -> np.ndarray:
        """``E[Y_t^a]`` for a fixed mobility path (raw fractions)."""
        a = np.asarray(path, float)
        logI = np.log(self.I1) + np.cumsum(np.asarray(self.c) + self.gimel_beta * a)
        return build_F(self.kernel, self.T) @ np.exp(logI)


def _simulate_working_batch(spec: WorkingModelSpec, n: int, rng, forced=None, integer=None):
    """Vectorized trajectories; returns ``(A, I, Y)`` each ``n x T``."""
    T = spec.T
    integer = spec.round_deaths if integer is None else integer
    pmf = spec.kernel.weekly_pmf
    base = spec.policy.base_path(T)
    c = np.asarray(spec.c, float)
    A = np.empty((n, T))
    I = np.empty((n, T))
    Y = np.empty((n, T))
    logI = np.full(n, np.log(spec.I1))
    e = np.zeros(n)
    y_prev = np.zeros(n)
    s = spec.infection_sd
    for t in range(T):
        z = rng.standard_normal(n)
        if forced is None:
            A[:, t], e = spec.policy.step(base[t], e, y_prev, z)
        else:
            A[:, t] = forced[t]
        logI = logI + c[t] + spec.gimel_beta * A[:, t]
        if s > 0:
            logI = logI + s * rng.standard_normal(n) - 0.5 * s * s
        if np.any(logI > MAX_LOG):
            raise OverflowError(f"infections overflow at week {t + 1}; use smaller growth rates c_t")
        I[:, t] = np.exp(logI)
        lags = np.arange(min(t + 1, pmf.size))
        mean_y = I[:, t - lags] @ pmf[lags]
        y = mean_y + spec.death_sd * rng.standard_normal(n) if spec.death_sd > 0 else mean_y
        if integer:
            y = np.maximum(np.round(y), 0.0)
        Y[:, t] = y
        y_prev = np.maximum(y, 0.0)
    return A, I, Y


def simulate_working(spec: WorkingModelSpec, region: str = "sim") -> tuple[RegionSeries, np.ndarray]:
    """One trajectory of the working model and its latent infections."""
    rng = np.random.default_rng(spec.seed)
    A, I, Y = _simulate_working_batch(spec, 1, rng)
    return RegionSeries.from_raw(region, np.maximum(Y[0], 0.0), A[0]), I[0]


@dataclass(frozen=True)
class BlipSpec:
    """Blip model ``L_t = L_{t-1} + beta A_{t-delta} + r(t) + eps_t``.

    ``r(t) = sum_j drift_coeffs[j] t^j``. With ``noise="level"`` the
    recursion is deterministic and ``L_t`` is observed with iid noise, so
    the MSM residuals are stationary. With ``noise="increment"`` the
    noise enters each step and accumulates as a random walk.
    """

    T: int = 45
    beta: float = -5.0
    drift_coeffs: tuple[float, ...] = (0.3,)
    noise_sd: float = 0.15
    policy: MobilityPolicy = field(default_factory=MobilityPolicy)
    delta: int = DEFAULT_DELTA
    L1: float = 5.0
    noise: str = "level"
    seed: int = 0

    def __post_init__(self):
        if self.T < 10:
            raise ValueError("T must be >= 10")
        if self.noise not in ("level", "increment"):
            raise ValueError("noise must be 'level' or 'increment'")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be >= 0")


def simulate_blip(spec: BlipSpec, region: str = "sim") -> RegionSeries:
    """Simulate the blip model; mobility feeds back on past deaths through the policy."""
    T, d = spec.T, spec.delta
    rng = np.random.default_rng(spec.seed)
    base = spec.policy.base_path(T)
    z_a = rng.standard_normal(T)
    eps = spec.noise_sd * rng.standard_normal(T)
    r = np.polynomial.polynomial.polyval(np.arange(1, T + 1, dtype=float), spec.drift_coeffs)
    a_raw = np.empty(T)
    L = np.empty(T)
    e, y_prev = 0.0, 0.0
    mean = spec.L1
    for t in range(T):
        a_raw[t], e = spec.policy.step(base[t], e, y_prev, z_a[t])
        if t > 0:
            a_lag = a_raw[t - d] - a_raw[0] if t - d >= 0 else 0.0
            mean = mean + spec.beta * a_lag + r[t]
            if spec.noise == "increment":
                mean += eps[t]
        L[t] = mean + eps[t] if spec.noise == "level" else mean
        if L[t] < 0:
            raise ValueError(f"log deaths fell below 0 at week {t + 1}; raise L1 or the drift")
        y_prev = np.expm1(L[t])
    return RegionSeries.from_raw(region, np.expm1(L), a_raw)


# ---------------------------------------------------------------------------
# g-formula


class SequentialModel(Protocol):
    def sample_outcome(self, n: int, rng: np.random.Generator, path: Sequence[float] | None) -> np.ndarray:
        """Outcome draws; with ``path`` the treatments are forced to it."""


@dataclass(frozen=True)
class FourVariableModel:
    """``(A0, I1, A1, I2)`` snippet with an optional latent ``U``.

    Data-generating process::

        A0      ~ N(0, 1)
        log I1  = beta0 + b A0 + u_load[0] U + eps
        A1      = c0 + c1 A0 + c2 log I1 + N(0, a1_sd^2)
        log I2  = theta0 + theta1 A0 + theta2 log I1 + theta3 A1 + u_load[1] U + delta

    with ``U ~ N(0, u_sd^2)``. The g-formula value is
    ``theta0 + theta1 a0 + theta2 (beta0 + b a0) + theta3 a1``.
    """

    beta0: float = 1.0
    b: float = 0.0
    theta: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    c: tuple[float, float, float] = (0.0, 0.5, 0.5)
    u_sd: float = 0.0
    u_load: tuple[float, float] = (1.0, 1.0)
    eps_sd: float = 1.0
    delta_sd: float = 1.0
    a1_sd: float = 1.0

    def sample(self, n: int, rng: np.random.Generator, path=None) -> dict[str, np.ndarray]:
        z = rng.standard_normal((5, n))
        U = self.u_sd * z[0]
        A0 = z[1] if path is None else np.full(n, float(path[0]))
        logI1 = self.beta0 + self.b * A0 + self.u_load[0] * U + self.eps_sd * z[2]
        c0, c1, c2 = self.c
        A1 = c0 + c1 * A0 + c2 * logI1 + self.a1_sd * z[3] if path is None else np.full(n, float(path[1]))
        t0, t1, t2, t3 = self.theta
        logI2 = t0 + t1 * A0 + t2 * logI1 + t3 * A1 + self.u_load[1] * U + self.delta_sd * z[4]
        return {"A0": A0, "logI1": logI1, "A1": A1, "logI2": logI2}

    def sample_outcome(self, n, rng, path=None):
        return self.sample(n, rng, path)["logI2"]

    def closed_form(self, path) -> float:
        a0, a1 = path
        t0, t1, t2, t3 = self.theta
        return t0 + t1 * a0 + t2 * (self.beta0 + self.b * a0) + t3 * a1


@dataclass(frozen=True)
class WorkingModelOutcome:
    """Adapter exposing the working model's deaths in one week as a sequential model."""

    spec: WorkingModelSpec
    week: int | None = None  # 1-based; default the last week

    def sample_outcome(self, n, rng, path=None):
        forced = None if path is None else np.asarray(path, float)
        _, _, Y = _simulate_working_batch(self.spec, n, rng, forced=forced, integer=False)
        return Y[:, (self.week or self.spec.T) - 1]

    def closed_form(self, path) -> float:
        return float(self.spec.closed_form_mean(path)[(self.week or self.spec.T) - 1])


def g_formula_oracle(dgp: SequentialModel, path, n_mc: int = 100_000, seed: int = 0) -> tuple[float, float]:
    """Monte-Carlo g-formula: mean outcome with treatments set to ``path``.

    Returns ``(estimate, monte_carlo_se)``.
    """
    if n_mc < 2:
        raise ValueError("n_mc must be >= 2")
    if isinstance(dgp, WorkingModelSpec):
        dgp = WorkingModelOutcome(dgp)
    y = np.asarray(dgp.sample_outcome(int(n_mc), np.random.default_rng(seed), path), float)
    return float(y.mean()), float(y.std(ddof=1) / np.sqrt(y.size))


# ---------------------------------------------------------------------------
# null paradox


def paradox_model(u_sd: float = 1.0, effect: float = 0.0, b: float = 1.0) -> FourVariableModel:
    """Truth for the paradox: no arrow from A0 or A1 into I2 (unless ``effect``)."""
    return FourVariableModel(beta0=1.0, b=b, theta=(0.0, 0.0, 0.0, effect), u_sd=u_sd)


def _ols(y, X):
    XtX_inv = np.linalg.inv(X.T @ X)
    coef = XtX_inv @ X.T @ y
    e = y - X @ coef
    s2 = e @ e / (X.shape[0] - X.shape[1])
    return coef, s2 * XtX_inv, e


def _contrast_vector(contrast: str, p_a0: int, p_a1: int, size: int):
    g = np.zeros(size)
    if contrast in ("joint", "a0"):
        g[p_a0] = 1.0
    if contrast in ("joint", "a1"):
        g[p_a1] = 1.0
    if not g.any():
        raise ValueError("contrast must be 'joint', 'a0' or 'a1'")
    return g


@dataclass(frozen=True)
class ParadoxResult:
    plugin_effect: float
    plugin_se: float
    msm_effect: float
    msm_se: float

    @property
    def plugin_tstat(self) -> float:
        return self.plugin_effect / self.plugin_se

    @property
    def msm_tstat(self) -> float:
        return self.msm_effect / self.msm_se


def paradox_estimates(d: dict[str, np.ndarray], contrast: str = "joint") -> ParadoxResult:
    """Both estimators of ``psi(a) - psi(0)`` (``a = (1, 1)`` for ``"joint"``).

    Plug-in: maximum likelihood for the Gaussian sequential model
    ``log I1 = beta0 + eps``, ``log I2 ~ (1, A0, log I1, A1)``. The
    contrast is ``theta1 + theta3`` (``beta0`` cancels).

    MSM: stabilized weights ``p(A1 | A0) / p(A1 | A0, log I1)`` from two
    Gaussian linear fits, then weighted least squares of ``log I2`` on
    ``(1, A0, A1)`` with an HC0 sandwich treating the weights as known.
    """
    n = d["A0"].size
    if n < 10:
        raise ValueError("need at least 10 observations")
    one = np.ones(n)
    X2 = np.column_stack([one, d["A0"], d["logI1"], d["A1"]])
    coef, cov, _ = _ols(d["logI2"], X2)
    g = _contrast_vector(contrast, 1, 3, 4)
    plug, plug_se = float(g @ coef), float(np.sqrt(g @ cov @ g))

    Xn = np.column_stack([one, d["A0"]])
    Xd = np.column_stack([one, d["A0"], d["logI1"]])
    _, _, en = _ols(d["A1"], Xn)
    _, _, ed = _ols(d["A1"], Xd)
    sn2, sd2 = en @ en / n, ed @ ed / n
    logw = -0.5 * en**2 / sn2 + 0.5 * ed**2 / sd2 - 0.5 * np.log(sn2 / sd2)
    w = np.exp(logw)
    Xm = np.column_stack([one, d["A0"], d["A1"]])
    A = (Xm.T * w) @ Xm
    gam = np.linalg.solve(A, (Xm.T * w) @ d["logI2"])
    e = d["logI2"] - Xm @ gam
    S = Xm * (w * e)[:, None]
    A_inv = np.linalg.inv(A)
    V = A_inv @ (S.T @ S) @ A_inv
    gm = _contrast_vector(contrast, 1, 2, 3)
    return ParadoxResult(plug, plug_se, float(gm @ gam), float(np.sqrt(gm @ V @ gm)))


def null_paradox_demo(
    n: int = 1000,
    seed: int = 0,
    u_sd: float = 1.0,
    effect: float = 0.0,
    contrast: str = "joint",
    b: float = 1.0,
) -> tuple[float, float]:
    """Simulate the paradox model and return ``(plugin_tstat, msm_tstat)``."""
    if n < 500:
        raise ValueError("n must be >= 500")
    d = paradox_model(u_sd, effect, b).sample(n, np.random.default_rng(seed))
    r = paradox_estimates(d, contrast)
    return r.plugin_tstat, r.msm_tstat


# ---------------------------------------------------------------------------
# Monte-Carlo coverage of the MSM on blip data


@dataclass(frozen=True)
class CoverageReport:
    beta_true: float
    mean_beta: float
    mc_se: float
    coverage: float
    n_reps: int
    level: float
    n_failed: int = 0

    @property
    def bias_in_mc_se(self) -> float:
        return (self.mean_beta - self.beta_true) / self.mc_se

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bias_in_mc_se"] = self.bias_in_mc_se
        return d


def coverage_experiment(
    spec: BlipSpec,
    reps: int = 500,
    level: float = 0.95,
    k: int | None = None,
    weighted: bool = True,
    hac_lag: int | None = None,
    critical: str = "fixed-b",
) -> CoverageReport:
    """Refit the MSM on ``reps`` blip trajectories with seeds ``spec.seed + i``.

    ``k`` defaults to the drift degree implied by the spec (``len(drift_coeffs)``).
    """
    k = len(spec.drift_coeffs) if k is None else k
    betas, hits, failed = [], [], 0
    for i in range(reps):
        s = simulate_blip(replace(spec, seed=spec.seed + i))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            w = estimate_weights(s, k=1, delta=spec.delta) if weighted else None
        f = fit_msm_series(s, w, k=k, delta=spec.delta, hac_lag=hac_lag, critical=critical)
        if not np.isfinite(f.se_beta):
            failed += 1
            continue
        betas.append(f.beta)
        hits.append(abs(f.beta - spec.beta) <= f.critical_value(level) * f.se_beta)
    b = np.asarray(betas)
    return CoverageReport(
        spec.beta, float(b.mean()), float(b.std(ddof=1) / np.sqrt(b.size)), float(np.mean(hits)),
        b.size, level, failed,
    )


# ---------------------------------------------------------------------------
# JSON specs


def _policy(d):
    return MobilityPolicy.from_dict(d) if isinstance(d, dict) else MobilityPolicy()


def spec_from_dict(d: dict) -> BlipSpec | WorkingModelSpec:
    """Build a spec from ``{"model": "blip" | "working", ...}``."""
    d = dict(d)
    model = d.pop("model", "blip")
    if "policy" in d:
        d["policy"] = _policy(d["policy"])
    if model == "blip":
        if "drift_coeffs" in d:
            d["drift_coeffs"] = tuple(float(v) for v in d["drift_coeffs"])
        allowed = {f.name for f in fields(BlipSpec)}
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown blip spec keys: {sorted(unknown)}")
        return BlipSpec(**d)
    if model == "working":
        if "kernel" in d:
            k = d["kernel"]
            d["kernel"] = build_gamma_kernel(k.get("mean_days", 23.9), k.get("cv", 0.40))
        if "c" in d:
            c = d["c"]
            d["c"] = tuple(float(v) for v in (c if isinstance(c, list) else [c] * int(d["T"])))
        allowed = {f.name for f in fields(WorkingModelSpec)}
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown working spec keys: {sorted(unknown)}")
        return WorkingModelSpec(**d)
    raise ValueError(f"unknown model {model!r}")


def load_spec(path) -> BlipSpec | WorkingModelSpec:
    with open(path, encoding="utf-8") as fh:
        return spec_from_dict(json.load(fh))
