"""Sensitivity of the mobility effect to unmeasured confounding.

Two analyses:

* the critical enlargement ``Delta`` (in se units) of the confidence
  interval at which it first reaches zero, and
* the range of the weighted least-squares ``beta`` when each weight may
  move within ``[W_t / Gamma, Gamma W_t]``.

For the second, ``beta(w)`` restricted to one coordinate ``w_t`` is a
linear-fractional function (rank-one update of ``X'WX``) with a positive
denominator, hence monotone. The extremes over the box are therefore
attained at vertices. They are found by multi-start coordinate ascent
over vertices, where moves are proposed by the sign of the analytic
gradient ``d beta / d w_t = [(X'WX)^{-1} x_t]_beta * e_t`` and otherwise
by exact evaluation of every single flip, and, when the box is small
enough, checked by complete vertex enumeration.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .data import RegionSeries
from .delay import DEFAULT_DELTA
from .msm import MsmFit, cumulative_mobility, design_matrix, orthogonal_basis
from .weights import WeightVector

ENUMERATE_MAX = 20
N_STARTS = 64


def z_quantile(alpha: float) -> float:
    return float(stats.norm.ppf(1 - alpha / 2))


def delta_critical(fit: MsmFit | tuple[float, float], alpha: float = 0.05) -> float:
    """Smallest ``Delta`` such that ``beta +/- (z + Delta) se`` contains 0.

    ``fit`` is an :class:`MsmFit` or a ``(beta, se)`` pair.
    """
    beta, se = (fit.beta, fit.se_beta) if isinstance(fit, MsmFit) else fit
    if not se > 0:
        raise ValueError("se must be positive")
    return max(0.0, abs(beta) / se - z_quantile(alpha))


def _batched_beta(W: np.ndarray, X: np.ndarray, L: np.ndarray) -> np.ndarray:
    """beta (last coefficient) of WLS for each row of ``W``."""
    A = np.einsum("nt,ti,tj->nij", W, X, X)
    b = np.einsum("nt,ti,t->ni", W, X, L)
    return np.linalg.solve(A, b[..., None])[..., -1, 0]


def _beta_and_grad(w, X, L):
    A = (X.T * w) @ X
    coef = np.linalg.solve(A, (X.T * w) @ L)
    e = L - X @ coef
    row = np.linalg.solve(A, np.eye(A.shape[0])[:, -1])  # A symmetric
    return coef[-1], (X @ row) * e


class WeightBox:
    """Box of admissible perturbed weights and the map to ``beta``."""

    def __init__(self, X, L, w, gamma):
        self.X = np.asarray(X, float)
        self.L = np.asarray(L, float)
        w = np.asarray(w, float)
        self.free = w > 0
        self.lo = np.where(self.free, w / gamma, w)
        self.hi = np.where(self.free, w * gamma, w)

    def beta(self, w) -> float:
        return float(_batched_beta(np.atleast_2d(w), self.X, self.L)[0])

    def vertex(self, bits) -> np.ndarray:
        w = self.lo.copy()
        idx = np.flatnonzero(self.free)
        w[idx] = np.where(bits, self.hi[idx], self.lo[idx])
        return w

    def enumerate(self, chunk: int = 1 << 14) -> tuple[float, float]:
        idx = np.flatnonzero(self.free)
        m = idx.size
        if m > 30:
            raise ValueError(f"{m} free weights: too many vertices to enumerate")
        lo, hi = np.inf, -np.inf
        n = 1 << m
        shifts = np.arange(m, dtype=np.int64)
        for start in range(0, n, chunk):
            codes = np.arange(start, min(n, start + chunk), dtype=np.int64)
            bits = (codes[:, None] >> shifts) & 1
            W = np.broadcast_to(self.lo, (codes.size, self.lo.size)).copy()
            W[:, idx] = np.where(bits == 1, self.hi[idx], self.lo[idx])
            b = _batched_beta(W, self.X, self.L)
            lo, hi = min(lo, b.min()), max(hi, b.max())
        return float(lo), float(hi)

    def ascend(self, w0, sign: float, max_moves: int = 10_000) -> tuple[float, np.ndarray]:
        """Vertex local search for ``sign * beta`` starting at ``w0``.

        Each round first tries flipping every coordinate the gradient
        favours at once; if that does not improve, all single flips are
        evaluated exactly and the best one is taken. Stops at a vertex no
        single flip can improve.
        """
        w = w0.copy()
        idx = np.flatnonzero(self.free)
        f, g = _beta_and_grad(w, self.X, self.L)
        for _ in range(max_moves):
            target = np.where(sign * g > 0, self.hi, self.lo)
            move = self.free & (target != w)
            if move.any():
                trial = np.where(move, target, w)
                ft, gt = _beta_and_grad(trial, self.X, self.L)
                if sign * ft > sign * f:
                    w, f, g = trial, ft, gt
                    continue
            flips = np.repeat(w[None, :], idx.size, axis=0)
            cur = flips[np.arange(idx.size), idx]
            flips[np.arange(idx.size), idx] = np.where(cur == self.hi[idx], self.lo[idx], self.hi[idx])
            vals = sign * _batched_beta(flips, self.X, self.L)
            j = int(np.argmax(vals))
            if vals[j] <= sign * f + 1e-13 * max(1.0, abs(f)):
                break
            w = flips[j]
            f, g = _beta_and_grad(w, self.X, self.L)
        return float(f), w

    def multistart(self, n_starts: int = N_STARTS, seed: int = 0) -> tuple[float, float]:
        rng = np.random.default_rng(seed)
        m = int(self.free.sum())
        starts = [self.vertex(rng.integers(0, 2, m).astype(bool)) for _ in range(n_starts)]
        # the two gradient-sign vertices at the point estimate are natural starts
        mid = np.sqrt(self.lo * self.hi)
        _, g = _beta_and_grad(mid, self.X, self.L)
        starts += [np.where(g > 0, self.hi, self.lo), np.where(g > 0, self.lo, self.hi)]
        lo = min(self.ascend(s, -1.0)[0] for s in starts)
        hi = max(self.ascend(s, +1.0)[0] for s in starts)
        return lo, hi


def _box_from(series, weights, k, delta, gamma, outcome=None):
    if gamma < 1:
        raise ValueError("gamma must be >= 1")
    L = np.asarray(series.log_deaths if outcome is None else outcome, float)
    T = L.size
    w = np.asarray(getattr(weights, "values", weights), float) if weights is not None else np.ones(T)
    X = design_matrix(orthogonal_basis(T, k), cumulative_mobility(series, delta))
    return WeightBox(X, L, w, gamma)


def gamma_bounds(
    series: RegionSeries,
    weights: WeightVector | np.ndarray | None,
    k: int = 1,
    delta: int = DEFAULT_DELTA,
    gamma: float = 3.0,
    method: str = "auto",
    n_starts: int = N_STARTS,
    seed: int = 0,
) -> tuple[float, float]:
    """Smallest and largest MSM ``beta`` with weights in ``[W/gamma, gamma W]``.

    ``method`` is ``"multistart"``, ``"enumerate"`` or ``"auto"`` (both when
    at most 20 weights are free, keeping the more extreme values).
    Non-positive weights stay at their estimated values.
    """
    box = _box_from(series, weights, k, delta, gamma)
    if gamma == 1:
        b = box.beta(box.lo)
        return b, b
    m = int(box.free.sum())
    if method == "enumerate":
        return box.enumerate()
    if method not in ("auto", "multistart"):
        raise ValueError(f"unknown method {method!r}")
    lo, hi = box.multistart(n_starts, seed)
    if method == "auto" and m <= ENUMERATE_MAX:
        elo, ehi = box.enumerate()
        lo, hi = min(lo, elo), max(hi, ehi)
    return lo, hi


@dataclass(frozen=True)
class SensitivityReport:
    beta: float
    se: float
    delta_critical: float
    gamma: float
    beta_lower: float
    beta_upper: float
    significant_at_gamma: bool
    region: str = ""
    log_population: float = float("nan")


def sensitivity_report(
    series: RegionSeries,
    fit: MsmFit,
    gamma: float = 3.0,
    alpha: float = 0.05,
    log_population: float = float("nan"),
    **kwargs,
) -> SensitivityReport:
    """Both analyses for one fitted region.

    ``significant_at_gamma`` means the bound interval widened by ``z * se``
    on each side still excludes zero.
    """
    lo, hi = gamma_bounds(series, fit.weights_used, fit.k, fit.delta, gamma, **kwargs)
    lo, hi = min(lo, fit.beta), max(hi, fit.beta)
    z = z_quantile(alpha)
    sig = (hi + z * fit.se_beta < 0) or (lo - z * fit.se_beta > 0)
    return SensitivityReport(
        fit.beta, fit.se_beta, delta_critical(fit, alpha), gamma, lo, hi, bool(sig),
        series.region_id, log_population,
    )


def write_reports_csv(path, reports) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region", "log_population", "delta_critical", "gamma", "beta_lo", "beta_hi"])
        for r in reports:
            w.writerow([r.region, repr(r.log_population), repr(r.delta_critical), repr(r.gamma),
                        repr(r.beta_lower), repr(r.beta_upper)])


def brute_force_bounds(X, L, w, gamma) -> tuple[float, float]:
    """Reference extremes by looping over every vertex (small problems only)."""
    w = np.asarray(w, float)
    free = np.flatnonzero(w > 0)
    vals = []
    for bits in itertools.product((0, 1), repeat=free.size):
        v = w.copy()
        v[free] = np.where(np.array(bits, bool), w[free] * gamma, w[free] / gamma)
        A = (X.T * v) @ X
        vals.append(np.linalg.solve(A, (X.T * v) @ L)[-1])
    return min(vals), max(vals)
