"""Marginal structural model for log deaths.

    E[L_t^a] = nu(t) + beta * M_t(a),    M_t(a) = sum_{s <= t - delta} a_s

with ``nu(t) = b_0 + sum_j b_j psi_j(t)`` for orthogonal polynomials
``psi_j``. The estimating equation with ``h_t = (1, psi(t), M_t)`` is the
normal equation of weighted least squares with the stabilized weights,
so the fit is a WLS solve. Standard errors come from a Bartlett-kernel
HAC sandwich that treats the weights as known. Intervals use fixed-b
critical values for the Bartlett kernel by default, which keep their
nominal coverage at the short series lengths seen in practice.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import stats

from .data import RegionSeries
from .delay import DEFAULT_DELTA
from .weights import WeightVector, unit_weights


@dataclass(frozen=True)
class Basis:
    """Orthonormal polynomial columns ``psi_1..psi_k`` on the grid ``t = 1..T``.

    Columns are orthogonal to each other and to the constant, so
    ``psi_1`` is a centered, scaled copy of ``t``.
    """

    degree: int
    values: np.ndarray

    @property
    def T(self) -> int:
        return self.values.shape[0]


def orthogonal_basis(T: int, k: int) -> Basis:
    if k < 0:
        raise ValueError("basis degree must be >= 0")
    if k >= T:
        raise ValueError(f"degree {k} needs more than {T} grid points")
    t = np.arange(1, T + 1, dtype=float)
    x = (t - t.mean()) / (t.max() - t.mean())
    V = np.vander(x, k + 1, increasing=True)
    # Householder QR == Gram-Schmidt on 1, t, ..., t^k up to column signs
    Q, R = np.linalg.qr(V)
    Q = Q * np.sign(np.diag(R))
    return Basis(k, Q[:, 1:].copy())


def cumulative_mobility(mobility, delta: int = DEFAULT_DELTA) -> np.ndarray:
    """``M_t = sum_{s=1}^{t-delta} a_s``; zero while ``t <= delta``."""
    if delta < 0:
        raise ValueError("delta must be >= 0")
    a = np.asarray(getattr(mobility, "mobility", mobility), dtype=float)
    csum = np.concatenate([[0.0], np.cumsum(a)])
    idx = np.clip(np.arange(1, a.size + 1) - delta, 0, None)
    return csum[idx]


def default_hac_lag(T: int) -> int:
    return int(math.floor(4 * (T / 100) ** (2 / 9)))


def hac_covariance(residuals, design, weights=None, lag: int | None = None) -> np.ndarray:
    """Sandwich ``A^{-1} B A^{-1}`` for the weighted least-squares score.

    ``A = sum_t w_t x_t x_t'`` and ``B`` is the Bartlett-weighted sum of the
    autocovariances of ``g_t = w_t x_t e_t`` up to ``lag``. With ``lag=0``
    and unit weights this is White's HC0 estimator.
    """
    X = np.asarray(design, float)
    e = np.asarray(residuals, float)
    T = e.size
    w = np.ones(T) if weights is None else np.asarray(getattr(weights, "values", weights), float)
    lag = default_hac_lag(T) if lag is None else int(lag)
    if lag < 0:
        raise ValueError("lag must be >= 0")
    g = X * (w * e)[:, None]
    B = g.T @ g
    for l in range(1, min(lag, T - 1) + 1):
        G = g[l:].T @ g[:-l]
        B += (1.0 - l / (lag + 1.0)) * (G + G.T)
    A_inv = np.linalg.pinv(X.T @ (X * w[:, None]))
    V = A_inv @ B @ A_inv
    return (V + V.T) / 2


@lru_cache(maxsize=64)
def _fixed_b_draws(b: float, m: int = 500, n: int = 40_000, seed: int = 20050101) -> np.ndarray:
    """Sorted ``|t|`` draws from the fixed-b limit of a Bartlett HAC t-statistic.

    Simulates the location model on ``m`` points with bandwidth ``b m``;
    autocovariances come from an FFT so the cost is ``O(n m log m)``.
    """
    rng = np.random.default_rng(seed)
    lags = np.arange(m)
    kern = np.clip(1.0 - lags / (b * m), 0.0, None)
    kern[1:] *= 2.0
    out = []
    for start in range(0, n, 4000):
        e = rng.standard_normal((min(4000, n - start), m))
        mean = e.mean(axis=1)
        u = e - mean[:, None]
        f = np.fft.rfft(u, n=2 * m, axis=1)
        acov = np.fft.irfft(f * np.conj(f), n=2 * m, axis=1)[:, :m]
        omega = acov @ kern / m
        out.append(np.sqrt(m) * np.abs(mean) / np.sqrt(omega))
    return np.sort(np.concatenate(out))


def critical_value(level: float, T: int, lag: int, method: str = "fixed-b") -> float:
    """Two-sided critical value for a HAC t-statistic.

    ``method="normal"`` gives ``z_{(1+level)/2}``. ``"fixed-b"`` uses the
    Kiefer-Vogelsang limit with ``b = (lag + 1) / T``; it reduces to the
    normal value at ``lag = 0``.
    """
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    z = float(stats.norm.ppf(0.5 + level / 2))
    if method == "normal" or lag == 0:
        return z
    if method != "fixed-b":
        raise ValueError(f"unknown critical-value method {method!r}")
    b = round(min(1.0, (lag + 1) / T), 6)
    return max(z, float(np.quantile(_fixed_b_draws(b), level)))


@dataclass(frozen=True)
class MsmFit:
    beta: float
    drift_coeffs: np.ndarray
    covariance: np.ndarray
    residuals: np.ndarray
    cumulative_mobility: np.ndarray
    weights_used: WeightVector
    basis: Basis = field(repr=False)
    outcome: np.ndarray = field(repr=False)
    delta: int = DEFAULT_DELTA
    hac_lag: int = 0
    identifiable: bool = True
    region: str = ""
    critical: str = "fixed-b"

    @property
    def k(self) -> int:
        return self.basis.degree

    @property
    def T(self) -> int:
        return self.outcome.size

    @property
    def coefficients(self) -> np.ndarray:
        return np.append(self.drift_coeffs, self.beta)

    @property
    def design(self) -> np.ndarray:
        return design_matrix(self.basis, self.cumulative_mobility)

    @property
    def fitted(self) -> np.ndarray:
        return self.outcome - self.residuals

    @property
    def nu_hat(self) -> np.ndarray:
        """Estimated drift ``nu(t)`` including the intercept."""
        return self.design[:, :-1] @ self.drift_coeffs

    @property
    def se_beta(self) -> float:
        return float(np.sqrt(self.covariance[-1, -1]))

    def critical_value(self, level: float = 0.95) -> float:
        return critical_value(level, self.T, self.hac_lag, self.critical)

    def conf_int(self, level: float = 0.95) -> tuple[float, float]:
        c = self.critical_value(level)
        return self.beta - c * self.se_beta, self.beta + c * self.se_beta

    def to_dict(self) -> dict:
        return {
            "region": self.region,
            "k": self.k,
            "delta": self.delta,
            "beta": self.beta,
            "se_beta": self.se_beta,
            "drift_coeffs": self.drift_coeffs.tolist(),
            "hac_lag": self.hac_lag,
            "identifiable": self.identifiable,
            "critical": self.critical,
        }

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def write_csv(self, path) -> None:
        """Per-week ``t, L, fitted, weight, M``."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "L", "fitted", "weight", "M"])
            rows = zip(self.outcome, self.fitted, self.weights_used.values, self.cumulative_mobility)
            for t, (L, f, wt, M) in enumerate(rows, start=1):
                w.writerow([t, repr(float(L)), repr(float(f)), repr(float(wt)), repr(float(M))])


def design_matrix(basis: Basis, M: np.ndarray) -> np.ndarray:
    T = basis.T
    return np.column_stack([np.ones(T), basis.values, np.asarray(M, float)])


def fit_msm(
    outcome,
    mobility,
    weights: WeightVector | None = None,
    k: int = 1,
    delta: int = DEFAULT_DELTA,
    hac_lag: int | None = None,
    region: str = "",
    critical: str = "fixed-b",
) -> MsmFit:
    """Weighted least squares of ``outcome`` on ``(1, psi_1..psi_k, M_t)``.

    ``critical`` selects the interval critical values (``"fixed-b"`` or
    ``"normal"``); it does not affect the point estimate or covariance.
    """
    L = np.asarray(outcome, float)
    T = L.size
    if T <= k + 3:
        raise ValueError(f"T={T} too short for basis degree k={k}")
    weights = unit_weights(T) if weights is None else weights
    w = np.asarray(weights.values, float)
    if w.size != T:
        raise ValueError(f"weights have length {w.size}, expected {T}")
    basis = orthogonal_basis(T, k)
    M = cumulative_mobility(mobility, delta)
    X = design_matrix(basis, M)
    XtW = X.T * w
    G = XtW @ X
    identifiable = np.linalg.matrix_rank(X) == X.shape[1] and np.linalg.cond(G) < 1e12
    if identifiable:
        coef = np.linalg.solve(G, XtW @ L)
    else:
        warnings.warn("MSM design is rank deficient; beta is not identified", RuntimeWarning)
        coef = np.linalg.lstsq(G, XtW @ L, rcond=None)[0]
    resid = L - X @ coef
    lag = default_hac_lag(T) if hac_lag is None else int(hac_lag)
    V = hac_covariance(resid, X, w, lag)
    if not identifiable:
        V = V.copy()
        V[-1, :] = V[:, -1] = np.nan
    return MsmFit(
        beta=float(coef[-1]),
        drift_coeffs=coef[:-1],
        covariance=V,
        residuals=resid,
        cumulative_mobility=M,
        weights_used=weights,
        basis=basis,
        outcome=L,
        delta=delta,
        hac_lag=lag,
        identifiable=bool(identifiable),
        region=region,
        critical=critical,
    )


def fit(
    series: RegionSeries,
    weights: WeightVector | None = None,
    k: int = 1,
    delta: int = DEFAULT_DELTA,
    hac_lag: int | None = None,
    critical: str = "fixed-b",
) -> MsmFit:
    """Fit the MSM to a region's log deaths ``L_t = log(Y_t + 1)``."""
    return fit_msm(
        series.log_deaths, series.mobility, weights, k, delta, hac_lag, region=series.region_id, critical=critical
    )


def predict_log(fit: MsmFit, path) -> tuple[np.ndarray, np.ndarray]:
    """Point prediction ``nu(t) + beta * M_t(path)`` and its delta-method se."""
    a = np.asarray(getattr(path, "mobility", path), float)
    if a.size != fit.T:
        raise ValueError(f"path has length {a.size}, fit has T={fit.T}")
    X = design_matrix(fit.basis, cumulative_mobility(a, fit.delta))
    point = X @ fit.coefficients
    se = np.sqrt(np.einsum("ti,ij,tj->t", X, fit.covariance, X).clip(min=0))
    return point, se
