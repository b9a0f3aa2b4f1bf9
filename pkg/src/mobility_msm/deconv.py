"""Penalized non-negative deconvolution of deaths into scaled infections.

Solves

    min_{I >= 0}  ||Y - F I||^2 + lam * sum_r (I_r - I_{r-1})^2

where ``I`` is infections times the (absorbed) probability of dying. The
delay matrix ``F`` has a zero diagonal, so its first row and last column
are removed and the problem is solved against ``Y_2..Y_T``, giving
``I_1..I_{T-1}``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .data import RegionSeries
from .delay import DelayKernel, build_F
from .msm import MsmFit, fit_msm
from .weights import WeightVector, unit_weights

logger = logging.getLogger(__name__)

LAMBDA_GRID = (0.1, 1.0, 10.0)
LOG_FLOOR = 0.5


@dataclass(frozen=True)
class DeconvResult:
    infections: np.ndarray
    lam: float
    implied_deaths: np.ndarray
    observed: np.ndarray
    objective: float
    converged: bool
    n_iter: int
    projected_gradient: float

    def write_csv(self, path) -> None:
        """``t, infections_scaled, implied_deaths, observed_deaths``; row ``t`` is week ``t``.

        Infections cover weeks ``1..T-1`` and deaths weeks ``2..T``; missing
        cells are left empty.
        """
        T = self.infections.size + 1
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "infections_scaled", "implied_deaths", "observed_deaths"])
            for t in range(1, T + 1):
                inf = repr(float(self.infections[t - 1])) if t < T else ""
                imp = repr(float(self.implied_deaths[t - 2])) if t > 1 else ""
                obs = repr(float(self.observed[t - 2])) if t > 1 else ""
                w.writerow([t, inf, imp, obs])


def trimmed_F(kernel: DelayKernel, T: int) -> np.ndarray:
    """Delay matrix without its first row and last column, ``(T-1) x (T-1)``."""
    return build_F(kernel, T)[1:, :-1]


def penalty(x: np.ndarray) -> float:
    d = np.diff(x)
    return float(d @ d)


def objective(x: np.ndarray, F: np.ndarray, y: np.ndarray, lam: float) -> float:
    r = y - F @ x
    return float(r @ r) + lam * penalty(x)


def _projected_gradient_norm(x, grad):
    pg = np.where(x > 0, grad, np.minimum(grad, 0.0))
    return float(np.max(np.abs(pg))) if pg.size else 0.0


def deconvolve(
    series: RegionSeries | np.ndarray,
    kernel: DelayKernel,
    lam: float = 1.0,
    max_iter: int = 5000,
    ftol: float = 1e-8,
) -> DeconvResult:
    """Recover scaled infections with L-BFGS-B under ``I >= 0``.

    The optimizer starts from a constant vector at the mean death count.
    ``converged`` requires the projected-gradient sup-norm to be below
    ``1e-6 * (1 + objective)``; otherwise the last iterate is returned with
    ``converged=False``.
    """
    if lam < 0:
        raise ValueError("lam must be >= 0")
    Y = np.asarray(getattr(series, "deaths", series), float)
    T = Y.size
    if T < 6:
        raise ValueError("deconvolution needs T >= 6")
    F = trimmed_F(kernel, T)
    y = Y[1:]
    # work in units of the typical death count so tolerances are scale free
    scale = max(float(np.mean(np.abs(y))), 1e-12)
    ys = y / scale
    FtF = F.T @ F
    Fty = F.T @ ys
    n = T - 1
    Dm = np.diff(np.eye(n), axis=0)
    Q = FtF + lam * (Dm.T @ Dm)

    def fun(x):
        Qx = Q @ x
        return float(x @ Qx - 2 * Fty @ x + ys @ ys), 2 * (Qx - Fty)

    x0 = np.ones(n)
    res = optimize.minimize(
        fun,
        x0,
        jac=True,
        method="L-BFGS-B",
        bounds=[(0.0, None)] * n,
        options={"maxiter": max_iter, "maxfun": 4 * max_iter, "ftol": ftol * 1e-7, "gtol": 1e-12, "maxcor": 30},
    )
    x = np.clip(res.x, 0.0, None)
    f, g = fun(x)
    if _projected_gradient_norm(x, g) > 1e-6 * (1 + abs(f)):
        # polish: exact solve on the free set, repeated while it stays feasible
        x = _active_set_polish(Q, Fty, x)
        f, g = fun(x)
    pg = _projected_gradient_norm(x, g)
    converged = pg <= 1e-6 * (1 + abs(f))
    if not converged:
        logger.warning("deconvolution did not converge (projected gradient %.3g)", pg)
    inf = x * scale
    implied = F @ inf
    return DeconvResult(
        infections=inf,
        lam=float(lam),
        implied_deaths=implied,
        observed=y,
        objective=objective(inf, F, y, lam),
        converged=bool(converged),
        n_iter=int(res.nit),
        projected_gradient=pg * scale,
    )


def _active_set_polish(Q, b, x, max_rounds=50):
    """Newton steps on the strictly positive coordinates of a convex QP."""
    for _ in range(max_rounds):
        free = x > 0
        g = 2 * (Q @ x - b)
        # release bound coordinates whose gradient points inward
        free |= g < 0
        if not free.any():
            return x
        xf = np.zeros_like(x)
        xf[free] = np.linalg.lstsq(Q[np.ix_(free, free)], b[free], rcond=None)[0]
        if np.all(xf[free] >= 0):
            if np.allclose(xf, x, rtol=0, atol=1e-14):
                return xf
            x = xf
            continue
        # step toward the unconstrained free-set solution until a bound is hit
        d = xf - x
        neg = free & (d < 0)
        step = min(1.0, float(np.min(-x[neg] / d[neg]))) if neg.any() else 1.0
        x = np.clip(x + step * d, 0.0, None)
    return x


def refit_on_infections(
    result: DeconvResult,
    series: RegionSeries,
    weights: WeightVector | None = None,
    k: int = 1,
    hac_lag: int | None = None,
) -> MsmFit:
    """MSM on ``log(max(I_t, 0.5))`` with undelayed cumulative mobility.

    Uses weeks ``1..T-1`` (the weeks with an infection estimate) and the
    matching prefix of ``weights``.
    """
    inf = np.asarray(result.infections, float)
    if not np.any(inf > 0):
        raise ValueError("all deconvolved infections are zero; nothing to refit")
    n = inf.size
    a = np.asarray(series.mobility, float)[:n]
    if weights is None:
        w = unit_weights(n)
    else:
        w = WeightVector(
            np.asarray(weights.values)[:n],
            weights.moment_residuals,
            weights.markov_order,
            weights.pairs,
            None if weights.row_flags is None else weights.row_flags[:n],
            weights.pseudo_inverse,
        )
    outcome = np.log(np.maximum(inf, LOG_FLOOR))
    return fit_msm(outcome, a, w, k=k, delta=0, hac_lag=hac_lag, region=series.region_id)
