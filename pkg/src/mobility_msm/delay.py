"""Infection-to-death delay distribution on the weekly scale.

The delay from infection to death is approximated by a Gamma
distribution (by default mean 23.9 days, coefficient of variation 0.40,
the convolution of incubation and symptom-to-death Gammas). Lag ``k``
weeks collects the days ``[7k - 3.5, 7k + 3.5)``, so the weekly lag has
the same mean as the daily delay. The small mass that falls in lag 0 is
moved to lag 1: a death is never recorded in the week of infection,
which keeps the diagonal of the convolution matrix at zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy import stats

DEFAULT_MEAN_DAYS = 23.9
DEFAULT_CV = 0.40
DEFAULT_HORIZON = 12
DEFAULT_DELTA = 4

INCUBATION = (5.1, 0.86)
SYMPTOM_TO_DEATH = (18.8, 0.45)


@dataclass(frozen=True)
class DelayKernel:
    mean_days: float
    cv: float
    weekly_pmf: np.ndarray
    delta_weeks: int = DEFAULT_DELTA

    @property
    def shape(self) -> float:
        return 1.0 / self.cv**2

    @property
    def scale(self) -> float:
        return self.mean_days * self.cv**2

    @property
    def horizon_weeks(self) -> int:
        return self.weekly_pmf.size - 1

    @property
    def mean_lag_weeks(self) -> float:
        return float(np.arange(self.weekly_pmf.size) @ self.weekly_pmf)

    def bin_edges(self) -> np.ndarray:
        """Day boundaries of lags ``0..horizon`` (lag 0 and 1 share ``[0, 10.5)``)."""
        return bin_edges(self.horizon_weeks)

    def to_json(self) -> str:
        return json.dumps(
            {
                "mean_days": self.mean_days,
                "cv": self.cv,
                "weekly_pmf": self.weekly_pmf.tolist(),
                "delta_weeks": self.delta_weeks,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "DelayKernel":
        d = json.loads(text)
        return cls(float(d["mean_days"]), float(d["cv"]), np.asarray(d["weekly_pmf"], float), int(d["delta_weeks"]))


def bin_edges(horizon_weeks: int) -> np.ndarray:
    edges = 7.0 * np.arange(horizon_weeks + 1) + 3.5
    return np.concatenate([[0.0], edges])


def build_gamma_kernel(
    mean_days: float = DEFAULT_MEAN_DAYS,
    cv: float = DEFAULT_CV,
    horizon_weeks: int = DEFAULT_HORIZON,
    delta_weeks: int = DEFAULT_DELTA,
) -> DelayKernel:
    """Discretize Gamma(shape=1/cv^2, scale=mean*cv^2) into weekly lags.

    The pmf has ``horizon_weeks + 1`` entries (lags ``0..horizon``); mass past
    the horizon is dropped and the rest renormalized.
    """
    if not mean_days > 0:
        raise ValueError(f"mean_days must be positive, got {mean_days}")
    if not 0 < cv < 2:
        raise ValueError(f"cv must lie in (0, 2), got {cv}")
    if horizon_weeks < 1:
        raise ValueError(f"horizon_weeks must be >= 1, got {horizon_weeks}")
    dist = stats.gamma(a=1.0 / cv**2, scale=mean_days * cv**2)
    edges = bin_edges(horizon_weeks)
    mass = np.diff(dist.cdf(edges))
    # far in the upper tail cdf differences underflow to 0; use sf there
    tail = np.diff(-dist.sf(edges))
    mass = np.where(edges[1:] > mean_days, tail, mass)
    pmf = np.concatenate([[0.0, mass[0] + mass[1]], mass[2:]])
    total = pmf.sum()
    if not total > 0:
        raise ValueError("no delay mass inside the horizon; increase horizon_weeks")
    pmf = pmf / total
    pmf.setflags(write=False)
    return DelayKernel(float(mean_days), float(cv), pmf, int(delta_weeks))


def point_mass_kernel(lag_weeks: int, delta_weeks: int | None = None) -> DelayKernel:
    """Kernel putting all mass on one lag; mostly useful for tests."""
    pmf = np.zeros(lag_weeks + 1)
    pmf[lag_weeks] = 1.0
    pmf.setflags(write=False)
    return DelayKernel(7.0 * lag_weeks, 0.0, pmf, lag_weeks if delta_weeks is None else delta_weeks)


def compose_delay(
    mean1: float = INCUBATION[0],
    cv1: float = INCUBATION[1],
    mean2: float = SYMPTOM_TO_DEATH[0],
    cv2: float = SYMPTOM_TO_DEATH[1],
    n_draws: int = 1_000_000,
    seed: int | None = 0,
) -> tuple[float, float]:
    """Monte-Carlo mean and cv of the sum of two independent Gammas."""
    for name, v in (("mean1", mean1), ("cv1", cv1), ("mean2", mean2), ("cv2", cv2)):
        if v is None or not v > 0:
            raise ValueError(f"{name} must be positive, got {v}")
    if n_draws < 100_000:
        raise ValueError("n_draws must be at least 1e5")
    rng = np.random.default_rng(seed)
    x = rng.gamma(1 / cv1**2, mean1 * cv1**2, n_draws) + rng.gamma(1 / cv2**2, mean2 * cv2**2, n_draws)
    m = float(x.mean())
    return m, float(x.std(ddof=1) / m)


def build_F(kernel: DelayKernel | np.ndarray, T: int) -> np.ndarray:
    """Lower-triangular ``T x T`` matrix with ``F[i, j] = pmf[i - j]``.

    Entry ``(i, j)`` is the probability that an infection in week ``j``
    (eventually fatal) is recorded as a death in week ``i``.
    """
    if T < 2:
        raise ValueError("T must be >= 2")
    pmf = np.asarray(getattr(kernel, "weekly_pmf", kernel), dtype=float)
    lag = np.subtract.outer(np.arange(T), np.arange(T))
    F = np.zeros((T, T))
    ok = (lag >= 0) & (lag < pmf.size)
    F[ok] = pmf[lag[ok]]
    return F
