"""Blip (AR(1)-in-levels) model, AIC degree selection and Markov checks.

The blip model regresses the weekly change in log deaths on a drift
polynomial and a single lagged mobility value,

    L_t - L_{t-1} = beta * A_{t-delta} + r(t) + eps_t,   deg r = k - 1.

Summing over weeks gives the MSM with ``nu(t) = sum_{s<=t} r(s)``, a
polynomial of degree ``k``, so the AIC-selected ``k`` is reused there.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import RegionSeries
from .delay import DEFAULT_DELTA
from .weights import RankError


@dataclass(frozen=True)
class BlipFit:
    beta: float
    drift_poly_coeffs: np.ndarray
    sigma2: float
    aic: float
    k_selected: int
    residuals: np.ndarray
    se_beta: float
    t_index: np.ndarray
    design: np.ndarray  # drift columns are powers of t / T

    @property
    def n_obs(self) -> int:
        return self.residuals.size

    def drift(self, t) -> np.ndarray:
        """Evaluate ``r(t)``; coefficients are in increasing powers of ``t``."""
        return np.polynomial.polynomial.polyval(np.asarray(t, float), self.drift_poly_coeffs)


def _blip_rows(series: RegionSeries, k: int, delta: int):
    L = np.asarray(series.log_deaths, float)
    A = np.asarray(series.mobility, float)
    T = L.size
    if k < 1:
        raise ValueError("k must be >= 1")
    if T <= k + delta + 2:
        raise ValueError(f"T={T} too short for k={k}, delta={delta}")
    t = np.arange(max(2, delta + 1), T + 1)  # 1-based weeks with L_{t-1} and A_{t-delta}
    y = L[t - 1] - L[t - 2]
    # powers of t / T keep the design well conditioned; fit_blip rescales
    poly = np.vander(t / T, k, increasing=True)
    X = np.column_stack([poly, A[t - 1 - delta]])
    return t, y, X


def _ols(y, X, names):
    rank = np.linalg.matrix_rank(X)
    if rank < X.shape[1]:
        # find the columns that can be dropped without losing rank
        bad = [names[j] for j in range(X.shape[1]) if np.linalg.matrix_rank(np.delete(X, j, axis=1)) == rank]
        raise RankError(f"collinear design columns: {bad}")
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    return coef, resid


def fit_blip(series: RegionSeries, k: int = 1, delta: int = DEFAULT_DELTA) -> BlipFit:
    """Least squares of ``L_t - L_{t-1}`` on ``(1, t, ..., t^{k-1}, A_{t-delta})``.

    ``aic = n log(RSS / n) + 2 (k + 2)``, counting the ``k`` drift
    coefficients, beta and the error variance.
    """
    t, y, X = _blip_rows(series, k, delta)
    names = [f"t^{j}" for j in range(k)] + [f"A[t-{delta}]"]
    coef, resid = _ols(y, X, names)
    n, p = X.shape
    rss = float(resid @ resid)
    aic = n * np.log(rss / n) + 2 * (k + 2) if rss > 0 else -np.inf
    df = n - p
    s2 = rss / df if df > 0 else np.nan
    cov = s2 * np.linalg.inv(X.T @ X)
    T = series.T
    return BlipFit(
        beta=float(coef[-1]),
        drift_poly_coeffs=coef[:-1] / float(T) ** np.arange(k),
        sigma2=rss / n,
        aic=float(aic),
        k_selected=k,
        residuals=resid,
        se_beta=float(np.sqrt(cov[-1, -1])),
        t_index=t,
        design=X,
    )


def aic_path(series: RegionSeries, k_max: int, delta: int = DEFAULT_DELTA) -> dict[int, float]:
    return {k: fit_blip(series, k, delta).aic for k in range(1, k_max + 1)}


def select_k(series: RegionSeries, k_max: int = 4, delta: int = DEFAULT_DELTA) -> int:
    """Drift degree with the smallest AIC; ties go to the smaller ``k``.

    Every candidate is fitted on the same rows, so the AIC values are
    comparable.
    """
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    aics = aic_path(series, k_max, delta)
    best = min(aics.values())
    return min(k for k, v in aics.items() if v <= best)


@dataclass(frozen=True)
class MarkovDiagnostics:
    """t-statistics of the two 3-lag regressions, ordered (alpha1..3, beta1..3)."""

    t_stats_A: np.ndarray
    t_stats_L: np.ndarray
    coefs_A: np.ndarray
    coefs_L: np.ndarray
    ill_conditioned: bool

    NAMES = ("alpha1", "alpha2", "alpha3", "beta1", "beta2", "beta3")

    def rows(self, region: str = ""):
        for eq, ts in (("A", self.t_stats_A), ("L", self.t_stats_L)):
            for name, t in zip(self.NAMES, ts):
                yield region, name, float(t), eq


def _tstats(y, X):
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    n, p = X.shape
    s2 = resid @ resid / (n - p)
    cov = s2 * np.linalg.pinv(X.T @ X)
    se = np.sqrt(np.clip(np.diag(cov), 0, None))
    with np.errstate(divide="ignore", invalid="ignore"):
        return coef, coef / se


def markov_diagnostics(series: RegionSeries, delta: int = DEFAULT_DELTA) -> MarkovDiagnostics:
    """Check first-order Markov structure.

    Fits, by OLS,

    * ``A_u`` on ``A_{u-1..u-3}`` and ``L_{u-1..u-3}`` (``u = t - delta``), and
    * ``L_t`` on ``A_{t-delta}, A_{t-delta-1}, A_{t-delta-2}`` and ``L_{t-1..t-3}``,

    and returns the t-statistics of the six slope coefficients of each.
    """
    L = np.asarray(series.log_deaths, float)
    A = np.asarray(series.mobility, float)
    T = L.size
    if T <= 10:
        raise ValueError("markov_diagnostics needs T > 10")
    u = np.arange(3, T)  # 0-based
    XA = np.column_stack([np.ones(u.size)] + [A[u - j] for j in (1, 2, 3)] + [L[u - j] for j in (1, 2, 3)])
    t = np.arange(max(3, delta + 2), T)
    XL = np.column_stack(
        [np.ones(t.size)] + [A[t - delta - j] for j in (0, 1, 2)] + [L[t - j] for j in (1, 2, 3)]
    )
    ill = False
    for X in (XA, XL):
        scaled = X / np.maximum(np.linalg.norm(X, axis=0), 1e-300)
        if np.linalg.cond(scaled) > 1e8 or np.linalg.matrix_rank(X) < X.shape[1]:
            ill = True
    if ill:
        warnings.warn("Markov diagnostic design is (near) singular", RuntimeWarning)
    cA, tA = _tstats(A[u], XA)
    cL, tL = _tstats(L[t], XL)
    return MarkovDiagnostics(tA[1:], tL[1:], cA[1:], cL[1:], ill)


def write_markov_csv(path, diagnostics: dict[str, MarkovDiagnostics]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region", "coef", "t_stat", "equation"])
        for region, d in diagnostics.items():
            for row in d.rows(region):
                w.writerow([row[0], row[1], repr(row[2]), row[3]])


@dataclass(frozen=True)
class PooledFit:
    k: int
    beta: float
    se: float
    n_obs: int
    n_regions: int

    def to_dict(self) -> dict:
        return {"k": self.k, "beta": self.beta, "se": self.se}

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def fit_pooled(all_series: Sequence[RegionSeries], k: int = 1, delta: int = DEFAULT_DELTA) -> PooledFit:
    """Stacked blip fit with a common beta and region-specific drift polynomials.

    Each region keeps its own ``r(t)`` (intercept included, i.e. a region
    fixed effect); only the mobility coefficient is shared. The se uses the
    pooled residual variance.
    """
    if len(all_series) < 1:
        raise ValueError("need at least one region")
    blocks, ys, a_cols = [], [], []
    for s in all_series:
        _, y, X = _blip_rows(s, k, delta)
        blocks.append(X[:, :-1])
        ys.append(y)
        a_cols.append(X[:, -1])
    n = sum(b.shape[0] for b in blocks)
    p_drift = sum(b.shape[1] for b in blocks)
    X = np.zeros((n, p_drift + 1))
    r = c = 0
    for b in blocks:
        X[r : r + b.shape[0], c : c + b.shape[1]] = b
        r += b.shape[0]
        c += b.shape[1]
    X[:, -1] = np.concatenate(a_cols)
    y = np.concatenate(ys)
    names = [f"{s.region_id}:t^{j}" for s in all_series for j in range(k)] + ["A"]
    coef, resid = _ols(y, X, names)
    df = n - X.shape[1]
    s2 = float(resid @ resid) / df
    # se of the last coefficient without forming the full inverse
    cov_last = np.linalg.solve(X.T @ X, np.eye(X.shape[1])[:, -1])[-1]
    return PooledFit(k, float(coef[-1]), float(np.sqrt(s2 * cov_last)), n, len(all_series))
