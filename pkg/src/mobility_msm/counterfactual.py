"""Intervention paths, counterfactual death curves and excess deaths."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np
from .msm import MsmFit, cumulative_mobility, design_matrix, predict_log

LABELS = ("observed", "early1", "early2", "vigilant", "custom")
VIGILANT_KEEP = 9


@dataclass(frozen=True)
class InterventionPath:
    label: str
    mobility: np.ndarray
    rule: str

    def __len__(self) -> int:
        return self.mobility.size


def _shift(a: np.ndarray, n: int) -> np.ndarray:
    # weeks past the end are not observed; hold the last value
    return np.concatenate([a[n:], np.repeat(a[-1], n)])


def vigilant(a: np.ndarray, keep: int = VIGILANT_KEEP) -> np.ndarray:
    """Keep weeks ``1..keep``, then repeat every later value twice (truncated to ``T``)."""
    tail = np.repeat(a[keep:], 2)[: a.size - keep]
    return np.concatenate([a[:keep], tail])


def make_intervention(series, label: str, mobility=None) -> InterventionPath:
    """Build one of the standard counterfactual mobility paths.

    ``series`` is a :class:`~mobility_msm.data.RegionSeries` or a plain
    mobility vector. For ``label="custom"`` pass the path as ``mobility``.
    """
    a = np.asarray(getattr(series, "mobility", series), float)
    if label == "observed":
        return InterventionPath(label, a.copy(), "observed mobility")
    if label == "early1":
        return InterventionPath(label, _shift(a, 1), "(A_2, ..., A_T, A_T): start one week earlier")
    if label == "early2":
        return InterventionPath(label, _shift(a, 2), "(A_3, ..., A_T, A_T, A_T): start two weeks earlier")
    if label == "vigilant":
        if a.size < 12:
            raise ValueError("vigilant path needs T >= 12")
        return InterventionPath(
            label, vigilant(a), "(A_1..A_9, A_10, A_10, A_11, A_11, ...): halve the post-peak decline"
        )
    if label == "custom":
        if mobility is None:
            raise ValueError("custom intervention needs an explicit mobility path")
        m = np.asarray(mobility, float)
        if m.size != a.size:
            raise ValueError(f"custom path has length {m.size}, expected {a.size}")
        return InterventionPath(label, m, "user supplied")
    raise ValueError(f"unknown intervention {label!r}; expected one of {LABELS}")


@dataclass(frozen=True)
class CounterfactualCurve:
    theta: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    observed: np.ndarray
    label: str = ""

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "theta", "lo", "hi", "observed"])
            for t, row in enumerate(zip(self.theta, self.lo, self.hi, self.observed), start=1):
                w.writerow([t, *(repr(float(v)) for v in row)])


def counterfactual_curve(
    fit: MsmFit,
    path: InterventionPath,
    level: float = 0.95,
    observed=None,
    subtract_one: bool = False,
) -> CounterfactualCurve:
    """``theta_t = exp(E[L_t])`` with pointwise bands formed on the log scale.

    Band half-widths use the fit's critical value (see
    :meth:`MsmFit.critical_value`).

    ``subtract_one=True`` reports ``max(exp(E[L_t]) - 1, 0)`` instead, undoing
    the ``+1`` of ``L = log(Y + 1)``.
    """
    z = fit.critical_value(level)
    point, se = predict_log(fit, path)
    theta, lo, hi = np.exp(point), np.exp(point - z * se), np.exp(point + z * se)
    if subtract_one:
        theta, lo, hi = (np.clip(v - 1.0, 0.0, None) for v in (theta, lo, hi))
    obs = np.expm1(fit.outcome) if observed is None else np.asarray(observed, float)
    return CounterfactualCurve(theta, lo, hi, obs, path.label)


@dataclass(frozen=True)
class ExcessDeaths:
    total: float
    total_ci: tuple[float, float]
    relative: float
    relative_ci: tuple[float, float]
    se_total: float

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "total_lo": self.total_ci[0],
            "total_hi": self.total_ci[1],
            "relative": self.relative,
            "relative_lo": self.relative_ci[0],
            "relative_hi": self.relative_ci[1],
        }

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def excess_deaths(
    fit: MsmFit,
    path: InterventionPath,
    level: float = 0.95,
    observed=None,
    subtract_one: bool = False,
) -> ExcessDeaths:
    """Total ``sum_t theta_t - sum_t Y_t`` and its ratio to ``sum_t Y_t``.

    The interval is a delta-method interval through the HAC covariance;
    observed deaths are treated as fixed.
    """
    z = fit.critical_value(level)
    Y = np.expm1(fit.outcome) if observed is None else np.asarray(observed, float)
    total_obs = float(Y.sum())
    X = design_matrix(fit.basis, cumulative_mobility(path.mobility, fit.delta))
    eta = X @ fit.coefficients
    theta = np.exp(eta)
    grad_w = theta
    if subtract_one:
        grad_w = np.where(theta > 1.0, theta, 0.0)
        theta = np.clip(theta - 1.0, 0.0, None)
    total = float(theta.sum() - total_obs)
    g = X.T @ grad_w
    se = float(np.sqrt(max(g @ fit.covariance @ g, 0.0)))
    ci = (total - z * se, total + z * se)
    if total_obs <= 0:
        raise ZeroDivisionError("relative excess deaths undefined: no observed deaths")
    rel = total / total_obs
    return ExcessDeaths(total, ci, rel, (ci[0] / total_obs, ci[1] / total_obs), se)
