"""Weekly regional mobility / death series: validation, CSV I/O and covidcast ingestion.

Each region is carried as a :class:`RegionSeries`. Mobility is the
"completely at home" device fraction (an anti-mobility measure: larger
means people moved less), standardized so that the first week is zero.
"""

from __future__ import annotations

import csv
import datetime as dt
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

MIN_WEEKS = 10
CSV_COLUMNS = ("region", "week", "deaths", "mobility")

DEFAULT_ENDPOINT = "https://api.delphi.cmu.edu/epidata/covidcast/"
ENDPOINT_ENV = "MOBILITY_MSM_COVIDCAST_ENDPOINT"
DEATHS_SIGNAL = ("jhu-csse", "deaths_incidence_num")
MOBILITY_SIGNAL = ("safegraph", "completely_home_prop")


class DataError(ValueError):
    """Base class for input-data problems."""


class SchemaError(DataError):
    pass


class ValidationError(DataError):
    pass


class GapError(DataError):
    pass


class NoDataError(DataError):
    pass


class TransportError(RuntimeError):
    def __init__(self, message: str, retries: int):
        super().__init__(f"{message} (after {retries} retries)")
        self.retries = retries


@dataclass(frozen=True)
class RegionSeries:
    """One region's aligned weekly series.

    Use :meth:`from_raw` rather than the constructor; it derives the
    standardized mobility and the log deaths.
    """

    region_id: str
    week_index: np.ndarray
    deaths: np.ndarray
    mobility_raw: np.ndarray
    mobility: np.ndarray = field(repr=False)
    log_deaths: np.ndarray = field(repr=False)

    @classmethod
    def from_raw(
        cls,
        region_id: str,
        deaths: Sequence[float],
        mobility_raw: Sequence[float],
        week_index: Sequence[int] | None = None,
    ) -> "RegionSeries":
        deaths = np.asarray(deaths, dtype=float)
        mobility_raw = np.asarray(mobility_raw, dtype=float)
        if deaths.ndim != 1 or deaths.shape != mobility_raw.shape:
            raise ValidationError(f"{region_id}: deaths and mobility must be 1-d and equal length")
        if deaths.size < 2:
            raise ValidationError(f"{region_id}: need at least 2 weeks, got {deaths.size}")
        if not (np.all(np.isfinite(deaths)) and np.all(np.isfinite(mobility_raw))):
            raise ValidationError(f"{region_id}: non-finite values")
        if np.any(deaths < 0):
            bad = int(np.flatnonzero(deaths < 0)[0])
            raise ValidationError(f"{region_id}: negative deaths at week position {bad + 1}")
        if week_index is None:
            week_index = np.arange(1, deaths.size + 1)
        week_index = np.asarray(week_index, dtype=int)
        if week_index.shape != deaths.shape:
            raise ValidationError(f"{region_id}: week index length mismatch")
        gaps = np.flatnonzero(np.diff(week_index) != 1)
        if gaps.size:
            w = week_index[gaps[0]]
            raise GapError(f"{region_id}: weeks not consecutive after week {w}")
        for a in (deaths, mobility_raw, week_index):
            a.setflags(write=False)
        mobility = mobility_raw - mobility_raw[0]
        log_deaths = np.log1p(deaths)
        mobility.setflags(write=False)
        log_deaths.setflags(write=False)
        return cls(region_id, week_index, deaths, mobility_raw, mobility, log_deaths)

    @property
    def T(self) -> int:
        return int(self.deaths.size)

    def __len__(self) -> int:
        return self.T


# ---------------------------------------------------------------------------
# CSV


def _parse_week(value: str) -> int | dt.date:
    value = value.strip()
    try:
        return int(value)
    except ValueError:
        pass
    try:
        return dt.date.fromisoformat(value)
    except ValueError as exc:
        raise ValidationError(f"cannot parse week value {value!r}") from exc


def _weeks_to_index(region: str, weeks: list[int | dt.date]) -> np.ndarray:
    if all(isinstance(w, int) for w in weeks):
        return np.asarray(weeks, dtype=int)
    if not all(isinstance(w, dt.date) for w in weeks):
        raise ValidationError(f"{region}: mixed integer and date week values")
    first = min(weeks)
    idx = []
    for w in weeks:
        days = (w - first).days
        if days % 7:
            raise GapError(f"{region}: date {w} is not a whole number of weeks after {first}")
        idx.append(days // 7 + 1)
    return np.asarray(idx, dtype=int)


def load_csv(
    path: str | os.PathLike,
    schema: Mapping[str, str] | None = None,
    min_weeks: int = MIN_WEEKS,
) -> list[RegionSeries]:
    """Read a long-format CSV into one :class:`RegionSeries` per region.

    Parameters
    ----------
    path : path-like
        CSV file with a header row.
    schema : mapping, optional
        Maps the logical names ``region, week, deaths, mobility`` to the
        file's column names. Missing keys default to the logical name.
    min_weeks : int
        Minimum series length accepted per region.

    Notes
    -----
    ``week`` may hold integer week numbers or ISO dates spaced 7 days apart.
    Regions are returned in order of first appearance; rows within a
    region are sorted by week.
    """
    schema = {c: c for c in CSV_COLUMNS} | dict(schema or {})
    rows: dict[str, list[tuple[int | dt.date, float, float, int]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in CSV_COLUMNS if schema[c] not in header]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {[schema[c] for c in missing]}")
        for lineno, rec in enumerate(reader, start=2):
            region = rec[schema["region"]].strip()
            try:
                deaths = float(rec[schema["deaths"]])
                mob = float(rec[schema["mobility"]])
            except ValueError as exc:
                raise ValidationError(f"{path}:{lineno}: non-numeric value") from exc
            if not np.isfinite(deaths) or deaths < 0:
                raise ValidationError(f"{path}:{lineno}: deaths must be non-negative, got {deaths}")
            if not (0.0 <= mob <= 1.0):
                raise ValidationError(f"{path}:{lineno}: mobility must lie in [0, 1], got {mob}")
            rows.setdefault(region, []).append((_parse_week(rec[schema["week"]]), deaths, mob, lineno))

    out = []
    for region, recs in rows.items():
        week_idx = _weeks_to_index(region, [r[0] for r in recs])
        order = np.argsort(week_idx, kind="stable")
        week_idx = week_idx[order]
        dup = np.flatnonzero(np.diff(week_idx) == 0)
        if dup.size:
            line = recs[order[dup[0] + 1]][3]
            raise ValidationError(f"{path}:{line}: duplicate week for region {region}")
        deaths = np.array([recs[i][1] for i in order])
        mob = np.array([recs[i][2] for i in order])
        series = RegionSeries.from_raw(region, deaths, mob, week_idx - week_idx[0] + 1)
        if week_idx[0] != 1:
            logger.info("%s: weeks start at %d; re-indexed from 1", region, week_idx[0])
        if series.T < min_weeks:
            raise ValidationError(f"{region}: {series.T} weeks, need at least {min_weeks}")
        logger.info("%s: T=%d", region, series.T)
        out.append(series)
    if not out:
        raise NoDataError(f"{path}: no data rows")
    return out


def _fmt(x: float) -> str:
    if float(x).is_integer() and abs(x) < 2**53:
        return str(int(x))
    return repr(float(x))


def write_csv(path: str | os.PathLike, series: Iterable[RegionSeries]) -> None:
    """Write series in the loader's schema; numeric fields round-trip exactly."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for s in series:
            for week, y, a in zip(s.week_index, s.deaths, s.mobility_raw):
                w.writerow([s.region_id, int(week), _fmt(y), _fmt(a)])


# ---------------------------------------------------------------------------
# covidcast


def bin_daily(
    days: Sequence[dt.date],
    deaths: Mapping[dt.date, float],
    mobility: Mapping[dt.date, float],
    start: dt.date,
    end: dt.date,
    region: str = "",
) -> tuple[np.ndarray, np.ndarray]:
    """Aggregate daily values into 7-day bins anchored on ``start``.

    Deaths are summed (negative corrections clamped to zero), mobility is
    averaged over the days present in the bin. A trailing partial bin is
    dropped.
    """
    n_bins = ((end - start).days + 1) // 7
    if n_bins <= 0:
        raise NoDataError(f"{region}: date range {start}..{end} shorter than one week")
    y = np.zeros(n_bins)
    a_sum = np.zeros(n_bins)
    a_n = np.zeros(n_bins)
    seen = np.zeros(n_bins, dtype=bool)
    for day in days:
        b = (day - start).days // 7
        if not 0 <= b < n_bins:
            continue
        if day in deaths:
            v = float(deaths[day])
            if v < 0:
                logger.warning("%s: negative daily deaths %g on %s clamped to 0", region, v, day)
                v = 0.0
            y[b] += v
            seen[b] = True
        if day in mobility:
            a_sum[b] += float(mobility[day])
            a_n[b] += 1
    if not seen.any() and not a_n.any():
        raise NoDataError(f"{region}: no observations in {start}..{end}")
    empty = np.flatnonzero(~seen | (a_n == 0))
    if empty.size:
        raise GapError(f"{region}: week {empty[0] + 1} has no deaths or no mobility data")
    return y, a_sum / a_n


def _get_signal(session, endpoint, source, signal, region, start, end, retries, backoff):
    params = {
        "data_source": source,
        "signal": signal,
        "time_type": "day",
        "geo_type": "state",
        "geo_value": region.lower(),
        "time_values": f"{start:%Y%m%d}-{end:%Y%m%d}",
    }
    last = None
    for attempt in range(retries + 1):
        try:
            resp = session.get(endpoint, params=params, timeout=30)
            resp.raise_for_status()
            payload = resp.json()
            break
        except Exception as exc:  # requests raises a zoo of exception types
            last = exc
            if attempt < retries:
                time.sleep(backoff * 2**attempt)
    else:
        raise TransportError(f"GET {endpoint} {source}/{signal} failed: {last}", retries)
    rows = payload.get("epidata") or []
    out = {}
    for r in rows:
        tv = str(r["time_value"])
        day = dt.date(int(tv[:4]), int(tv[4:6]), int(tv[6:8]))
        if r.get("value") is not None:
            out[day] = float(r["value"])
    return out


def fetch_covidcast(
    region: str,
    start: dt.date | str,
    end: dt.date | str,
    endpoint: str | None = None,
    session=None,
    retries: int = 3,
    backoff: float = 1.0,
) -> RegionSeries:
    """Download daily deaths and at-home fraction for a state and bin them weekly.

    ``endpoint`` defaults to ``$MOBILITY_MSM_COVIDCAST_ENDPOINT`` or the public
    Delphi Epidata URL. ``session`` is anything with a ``requests``-style
    ``get`` method; a fresh :class:`requests.Session` is used otherwise.
    Requests are issued one at a time.
    """
    if len(region) != 2 or not region.isalpha():
        raise ValidationError(f"region must be a two-letter state code, got {region!r}")
    start = dt.date.fromisoformat(start) if isinstance(start, str) else start
    end = dt.date.fromisoformat(end) if isinstance(end, str) else end
    if end < start:
        raise NoDataError(f"{region}: empty date range {start}..{end}")
    endpoint = endpoint or os.environ.get(ENDPOINT_ENV) or DEFAULT_ENDPOINT
    if session is None:
        import requests

        session = requests.Session()
    deaths = _get_signal(session, endpoint, *DEATHS_SIGNAL, region, start, end, retries, backoff)
    mob = _get_signal(session, endpoint, *MOBILITY_SIGNAL, region, start, end, retries, backoff)
    if not deaths or not mob:
        raise NoDataError(f"{region}: covidcast returned no rows for {start}..{end}")
    days = sorted(set(deaths) | set(mob))
    y, a = bin_daily(days, deaths, mob, start, end, region=region.upper())
    return RegionSeries.from_raw(region.upper(), y, a)

