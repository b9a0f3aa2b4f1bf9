"""Stabilized inverse-probability weights from moment constraints.

Rather than plugging density estimates into the product of ratios, the
weights are the vector closest to 1 (in squared error) that sums to ``T``
and makes every centered product

    H_tj = (h1_j(A_t) - mu_j(t)) * (h2_j(Y_{t-1}) - nu_j(t))

have zero weighted sample mean. The conditional means ``mu`` and ``nu``
come from homogeneous order-``k`` Markov linear regressions. The
minimizer has the closed form ``W = 1 - H (H'H)^{-1} (H'1 - D)`` with
``D = (T, 0, ..., 0)``.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .data import RegionSeries
from .delay import DEFAULT_DELTA

logger = logging.getLogger(__name__)

H1_FUNCS: dict[str, Callable[[np.ndarray], np.ndarray]] = {"a": lambda a: a, "a2": lambda a: a**2}
H2_FUNCS: dict[str, Callable[[np.ndarray], np.ndarray]] = {"y": lambda y: y, "y2": lambda y: y**2}
DEFAULT_PAIRS: tuple[tuple[str, str], ...] = (("a", "y"), ("a", "y2"), ("a2", "y"), ("a2", "y2"))


class RankError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class WeightVector:
    values: np.ndarray
    moment_residuals: np.ndarray
    markov_order: int = 1
    pairs: tuple[tuple[str, str], ...] = ()
    row_flags: np.ndarray | None = field(default=None, repr=False)
    pseudo_inverse: bool = False

    def __len__(self) -> int:
        return self.values.size

    @property
    def n_negative(self) -> int:
        return int(np.sum(self.values < 0))

    def write_diagnostics(self, csv_path, json_path=None) -> None:
        """``t,weight,row_flag`` CSV plus an optional JSON of moment residuals."""
        flags = np.ones(self.values.size, bool) if self.row_flags is None else self.row_flags
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "weight", "row_flag"])
            for t, (v, f) in enumerate(zip(self.values, flags), start=1):
                w.writerow([t, repr(float(v)), int(bool(f))])
        if json_path is not None:
            doc = {
                "pairs": [list(p) for p in self.pairs],
                "moment_residuals": self.moment_residuals.tolist(),
                "sum_weights": float(self.values.sum()),
                "markov_order": self.markov_order,
                "pseudo_inverse": self.pseudo_inverse,
                "n_negative": self.n_negative,
            }
            with open(json_path, "w", encoding="utf-8") as fh:
                json.dump(doc, fh, indent=2)


def unit_weights(T: int) -> WeightVector:
    return WeightVector(np.ones(T), np.zeros(0), markov_order=0)


def _regress(y: np.ndarray, regressors: Mapping[str, np.ndarray]) -> np.ndarray:
    for name, x in regressors.items():
        if np.ptp(x) <= 1e-12 * max(1.0, np.abs(x).max()):
            raise RankError(f"regressor {name} is constant; conditional mean not identified")
    X = np.column_stack([np.ones_like(y)] + list(regressors.values()))
    rank = np.linalg.matrix_rank(X)
    if rank < X.shape[1]:
        raise RankError(f"collinear regressors {list(regressors)}")
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    return X @ coef


def first_usable(k: int, delta: int) -> int:
    """First 1-based week with every lag that the Markov regressions use."""
    return max(k + 1, delta + k + 1, k + 2)


def fit_conditional_means(
    series: RegionSeries,
    k: int = 1,
    delta: int = DEFAULT_DELTA,
    h1_set: Sequence[str] | Mapping[str, Callable] = ("a", "a2"),
    h2_set: Sequence[str] | Mapping[str, Callable] = ("y", "y2"),
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Markov regressions for the centering terms.

    ``mu[j][t]`` estimates E[h1_j(A_t) | A_{t-1..t-k}] and ``nu[j][t]``
    estimates E[h2_j(Y_{t-1}) | A_{t-1-delta..t-k-delta}, Y_{t-2..t-1-k}].
    Arrays have length ``T`` (0-based position ``t-1``) and are NaN where a
    lag is unavailable.
    """
    if k < 1:
        raise ValueError("Markov order k must be >= 1")
    A = np.asarray(series.mobility, float)
    Y = np.asarray(series.deaths, float)
    T = A.size
    if T <= k + delta + 2:
        raise ValueError(f"T={T} too short for k={k}, delta={delta}")
    h1 = {n: H1_FUNCS[n] for n in h1_set} if not isinstance(h1_set, Mapping) else dict(h1_set)
    h2 = {n: H2_FUNCS[n] for n in h2_set} if not isinstance(h2_set, Mapping) else dict(h2_set)

    # mu: t = k+1..T (1-based), regress on A_{t-1..t-k}
    t_mu = np.arange(k + 1, T + 1) - 1  # 0-based positions
    lags_mu = {f"A[t-{j}]": A[t_mu - j] for j in range(1, k + 1)}
    mu = {}
    for name, f in h1.items():
        out = np.full(T, np.nan)
        out[t_mu] = _regress(f(A[t_mu]), lags_mu)
        mu[name] = out

    # nu: need t-k-delta >= 1 and t-1-k >= 1
    t0 = max(delta + k + 1, k + 2)
    t_nu = np.arange(t0, T + 1) - 1
    lags_nu = {f"A[t-{j + delta}]": A[t_nu - j - delta] for j in range(1, k + 1)}
    lags_nu |= {f"Y[t-{j}]": Y[t_nu - j] for j in range(2, k + 2)}
    nu = {}
    for name, f in h2.items():
        out = np.full(T, np.nan)
        out[t_nu] = _regress(f(Y[t_nu - 1]), lags_nu)
        nu[name] = out
    return mu, nu


def build_H(
    series: RegionSeries,
    mu_hat: Mapping[str, np.ndarray],
    nu_hat: Mapping[str, np.ndarray],
    pairs: Sequence[tuple[str, str]] = DEFAULT_PAIRS,
) -> tuple[np.ndarray, np.ndarray]:
    """Constraint matrix ``[1, H_1, ..., H_N]`` and a mask of complete rows.

    Row ``t`` uses ``h1(A_t)`` and ``h2(Y_{t-1})``. Rows where a centering
    term is NaN (or ``t = 1``) are set to ``(1, 0, ..., 0)``.
    """
    A = np.asarray(series.mobility, float)
    Y = np.asarray(series.deaths, float)
    T = A.size
    Ylag = np.concatenate([[np.nan], Y[:-1]])
    H = np.zeros((T, len(pairs) + 1))
    H[:, 0] = 1.0
    valid = np.ones(T, bool)
    valid[0] = False
    cols = []
    for h1, h2 in pairs:
        c = (H1_FUNCS[h1](A) - mu_hat[h1]) * (H2_FUNCS[h2](Ylag) - nu_hat[h2])
        valid &= np.isfinite(c)
        cols.append(c)
    for j, c in enumerate(cols, start=1):
        H[valid, j] = c[valid]
    return H, valid


def solve_weights(H: np.ndarray, T: int | None = None) -> WeightVector:
    """Closed-form minimizer of ``sum (1 - W_t)^2`` s.t. ``H'W = (T, 0, ..., 0)``.

    Columns are rescaled before solving; the solution is invariant to that.
    A rank-deficient ``H'H`` falls back to the pseudo-inverse with a warning.
    """
    H = np.asarray(H, dtype=float)
    T = H.shape[0] if T is None else int(T)
    if H.shape[0] != T:
        raise ValueError("H must have T rows")
    scale = np.sqrt(np.mean(H**2, axis=0))
    scale[scale == 0] = 1.0
    Hs = H / scale
    D = np.zeros(H.shape[1])
    D[0] = T
    rhs = Hs.T @ np.ones(T) - D / scale
    G = Hs.T @ Hs
    pinv = False
    cond = np.linalg.cond(G)
    if not np.isfinite(cond) or cond > 1e12:
        warnings.warn(f"H'H is ill-conditioned (cond={cond:.3g}); using pseudo-inverse", RuntimeWarning)
        lam = np.linalg.pinv(G) @ rhs
        pinv = True
    else:
        lam = np.linalg.solve(G, rhs)
    W = 1.0 - Hs @ lam
    if np.any(W < 0):
        warnings.warn(f"{int(np.sum(W < 0))} negative weight(s) from the closed form", RuntimeWarning)
    resid = H[:, 1:].T @ W / T
    return WeightVector(W, resid, pseudo_inverse=pinv)


def estimate_weights(
    series: RegionSeries,
    k: int = 1,
    delta: int = DEFAULT_DELTA,
    pairs: Sequence[tuple[str, str]] = DEFAULT_PAIRS,
) -> WeightVector:
    """Full pipeline: Markov regressions, constraint matrix, closed-form weights."""
    h1 = tuple(dict.fromkeys(p[0] for p in pairs))
    h2 = tuple(dict.fromkeys(p[1] for p in pairs))
    mu, nu = fit_conditional_means(series, k, delta, h1, h2)
    H, valid = build_H(series, mu, nu, pairs)
    wv = solve_weights(H)
    logger.debug("%s: weights range [%.3f, %.3f]", series.region_id, wv.values.min(), wv.values.max())
    return WeightVector(wv.values, wv.moment_residuals, k, tuple(pairs), valid, wv.pseudo_inverse)
