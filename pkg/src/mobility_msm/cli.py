"""Command-line interface: ``mobility-msm <command> [options]``.

Exit codes: 0 success, 2 bad configuration, 3 data error, 4 numerical
failure. Regions run in a thread pool; all files are written by the main
thread once a region finishes.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import blip, counterfactual, data, deconv, delay, msm, sensitivity, simulate, weights

logger = logging.getLogger("mobility_msm")

COMMANDS = ("fit", "counterfactual", "sensitivity", "deconvolve", "blip", "markov-check", "simulate", "pooled")
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
K_MAX = 4
DEFAULT_SCENARIOS = ("early1", "early2", "vigilant")


class ConfigError(ValueError):
    pass


NUMERIC_ERRORS = (np.linalg.LinAlgError, FloatingPointError, OverflowError, ZeroDivisionError)


@dataclass
class RunConfig:
    command: str
    input: str | None = None
    covidcast: tuple[str, ...] = ()
    start: str = "2020-02-15"
    end: str = "2020-12-25"
    regions: tuple[str, ...] = ()
    k: int | str | None = None
    delta: int = delay.DEFAULT_DELTA
    lam: tuple[float, ...] = (1.0,)
    gamma: float = 3.0
    level: float = 0.95
    output_dir: str = "out"
    seed: int | None = None
    jobs: int = field(default_factory=lambda: os.cpu_count() or 1)
    scenarios: tuple[str, ...] = DEFAULT_SCENARIOS
    spec: str | None = None
    reps: int = 1
    check: str | None = None
    population: str | None = None
    hac_lag: int | None = None
    unweighted: bool = False

    def validate(self) -> None:
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        if not 0 < self.level < 1:
            raise ConfigError("--level must lie in (0, 1)")
        if self.gamma < 1:
            raise ConfigError("--gamma must be >= 1")
        if any(not lam >= 0 for lam in self.lam):
            raise ConfigError("--lambda must be >= 0")
        if self.delta < 0:
            raise ConfigError("--delta must be >= 0")
        if self.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        if self.k == "auto":
            if self.command in ("simulate", "markov-check"):
                raise ConfigError(f"--k auto needs blip degree selection, not available for {self.command}")
        elif self.k is not None and not (isinstance(self.k, int) and self.k >= 1):
            raise ConfigError("--k must be a positive integer or 'auto'")
        if self.command == "simulate":
            if not self.spec:
                raise ConfigError("simulate needs --spec")
            if self.reps < 1:
                raise ConfigError("--reps must be >= 1")
            if self.check not in (None, "coverage"):
                raise ConfigError("--check must be 'coverage'")
        elif not (self.input or self.covidcast):
            raise ConfigError(f"{self.command} needs --input or --covidcast")
        for s in self.scenarios:
            if s not in counterfactual.LABELS or s == "custom":
                raise ConfigError(f"unknown scenario {s!r}")


def _k_arg(text: str) -> int | str:
    if text == "auto":
        return text
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError("k must be an integer or 'auto'") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mobility-msm", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--input", help="CSV with columns region,week,deaths,mobility")
    common.add_argument("--covidcast", nargs="+", default=(), metavar="STATE", help="fetch states from covidcast")
    common.add_argument("--start", default="2020-02-15")
    common.add_argument("--end", default="2020-12-25")
    common.add_argument("--region", action="append", default=[], help="restrict to region (repeatable)")
    common.add_argument("--k", type=_k_arg, default=None, help="drift degree (default 1) or 'auto' (blip AIC)")
    common.add_argument("--delta", type=int, default=delay.DEFAULT_DELTA)
    common.add_argument("--hac-lag", type=int, default=None)
    common.add_argument("--unweighted", action="store_true", help="use unit weights")
    common.add_argument("--level", type=float, default=0.95)
    common.add_argument("--output-dir", default="out")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "counterfactual":
            sp.add_argument("--scenario", action="append", choices=DEFAULT_SCENARIOS + ("observed",))
        if name == "sensitivity":
            sp.add_argument("--gamma", type=float, default=3.0)
            sp.add_argument("--population", help="CSV with columns region,population")
        if name == "deconvolve":
            sp.add_argument("--lambda", dest="lam", type=float, nargs="+", default=[1.0])
        if name == "simulate":
            sp.add_argument("--spec", required=True, help="JSON simulation spec")
            sp.add_argument("--reps", type=int, default=1)
            sp.add_argument("--check", choices=["coverage"])
    return p


def config_from_args(ns: argparse.Namespace) -> RunConfig:
    cfg = RunConfig(
        command=ns.command,
        input=ns.input,
        covidcast=tuple(ns.covidcast),
        start=ns.start,
        end=ns.end,
        regions=tuple(ns.region),
        k=ns.k,
        delta=ns.delta,
        level=ns.level,
        output_dir=ns.output_dir,
        seed=ns.seed,
        jobs=ns.jobs,
        hac_lag=ns.hac_lag,
        unweighted=ns.unweighted,
    )
    for attr in ("gamma", "population", "spec", "reps", "check"):
        if hasattr(ns, attr):
            setattr(cfg, attr, getattr(ns, attr))
    if getattr(ns, "lam", None) is not None:
        cfg.lam = tuple(ns.lam)
    if getattr(ns, "scenario", None):
        cfg.scenarios = tuple(dict.fromkeys(ns.scenario))
    return cfg


# ---------------------------------------------------------------------------
# per-region work; each task returns {filename: writer} and never touches disk


Outputs = dict[str, Callable[[Path], None]]


def _load(cfg: RunConfig) -> list[data.RegionSeries]:
    series: list[data.RegionSeries] = []
    if cfg.input:
        series.extend(data.load_csv(cfg.input))
    if cfg.covidcast:
        import datetime as dt

        start, end = dt.date.fromisoformat(cfg.start), dt.date.fromisoformat(cfg.end)
        for code in cfg.covidcast:
            series.append(data.fetch_covidcast(code, start, end))
    if cfg.regions:
        wanted = set(cfg.regions)
        missing = wanted - {s.region_id for s in series}
        if missing:
            raise data.NoDataError(f"regions not found in input: {sorted(missing)}")
        series = [s for s in series if s.region_id in wanted]
    if not series:
        raise data.NoDataError("no regions to process")
    return series


def _choose_k(cfg: RunConfig, s: data.RegionSeries) -> int:
    if cfg.k == "auto":
        return blip.select_k(s, K_MAX, cfg.delta)
    return 1 if cfg.k is None else int(cfg.k)


def _fit_region(cfg: RunConfig, s: data.RegionSeries):
    k = _choose_k(cfg, s)
    w = weights.unit_weights(s.T) if cfg.unweighted else weights.estimate_weights(s, k=1, delta=cfg.delta)
    return msm.fit(s, w, k=k, delta=cfg.delta, hac_lag=cfg.hac_lag), w


def task_fit(cfg, s) -> Outputs:
    f, w = _fit_region(cfg, s)
    return {
        f"{s.region_id}_fit.json": f.write_json,
        f"{s.region_id}_fit.csv": f.write_csv,
        f"{s.region_id}_weights.csv": lambda p: w.write_diagnostics(p),
    }


def task_counterfactual(cfg, s) -> Outputs:
    f, _ = _fit_region(cfg, s)
    out: Outputs = {}
    for label in cfg.scenarios:
        path = counterfactual.make_intervention(s, label)
        curve = counterfactual.counterfactual_curve(f, path, cfg.level, observed=s.deaths)
        ex = counterfactual.excess_deaths(f, path, cfg.level, observed=s.deaths)
        out[f"{s.region_id}_cf_{label}.csv"] = curve.write_csv
        out[f"{s.region_id}_excess_{label}.json"] = ex.write_json
    return out


def task_sensitivity(cfg, s, log_pop=float("nan")):
    f, _ = _fit_region(cfg, s)
    return sensitivity.sensitivity_report(s, f, cfg.gamma, 1 - cfg.level, log_pop, seed=cfg.seed or 0)


def task_deconvolve(cfg, s) -> Outputs:
    kern = delay.build_gamma_kernel(delta_weeks=cfg.delta)
    k = _choose_k(cfg, s)
    out: Outputs = {}
    for lam in cfg.lam:
        r = deconv.deconvolve(s, kern, lam)
        tag = f"{lam:g}"
        out[f"{s.region_id}_deconv_lambda{tag}.csv"] = r.write_csv
        if np.any(r.infections > 0):
            refit = deconv.refit_on_infections(r, s, None, k=k, hac_lag=cfg.hac_lag)
            summary = refit.to_dict() | {"lambda": lam, "converged": r.converged}
            out[f"{s.region_id}_deconv_lambda{tag}_fit.json"] = _json_writer(summary)
    return out


def task_blip(cfg, s) -> Outputs:
    k = _choose_k(cfg, s)
    b = blip.fit_blip(s, k, cfg.delta)
    aics = blip.aic_path(s, max(K_MAX, k), cfg.delta)
    d = {"region": s.region_id, "k": k, "beta": b.beta, "se_beta": b.se_beta,
         "drift_poly_coeffs": b.drift_poly_coeffs.tolist(), "aic": {str(j): v for j, v in aics.items()}}
    return {f"{s.region_id}_blip.json": _json_writer(d)}


def task_markov(cfg, s):
    return blip.markov_diagnostics(s, cfg.delta)


def _json_writer(obj) -> Callable[[Path], None]:
    def write(path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(obj, fh, indent=2)

    return write


def _read_population(path) -> dict[str, float]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    try:
        return {r["region"]: math.log(float(r["population"])) for r in rows}
    except (KeyError, ValueError) as exc:
        raise data.SchemaError(f"{path}: need numeric columns region,population") from exc


def _classify(exc: BaseException) -> int:
    if isinstance(exc, data.DataError):
        return EXIT_DATA
    if isinstance(exc, NUMERIC_ERRORS):
        return EXIT_NUMERIC
    if isinstance(exc, ValueError):
        return EXIT_DATA
    return EXIT_NUMERIC


def _map_regions(cfg, series, fn):
    """Run ``fn(cfg, s)`` per region; returns ordered ``[(region, result|None, code, msg)]``."""

    def one(s):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            try:
                return s.region_id, fn(cfg, s), EXIT_OK, "ok"
            except (data.DataError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
                return s.region_id, None, _classify(exc), f"{type(exc).__name__}: {exc}"

    if cfg.jobs == 1 or len(series) == 1:
        return [one(s) for s in series]
    with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
        return list(pool.map(one, series))


def _status_table(rows) -> int:
    width = max([6] + [len(r[0]) for r in rows])
    print(f"{'region':<{width}}  status  message", file=sys.stderr)
    worst = EXIT_OK
    for region, _, code, msg in rows:
        print(f"{region:<{width}}  {code:>6}  {msg}", file=sys.stderr)
        worst = max(worst, code)
    return worst


def run(cfg: RunConfig) -> int:
    cfg.validate()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.command == "simulate":
        return _run_simulate(cfg, out)
    series = _load(cfg)
    if cfg.command == "pooled":
        # one drift degree for all regions; with auto, the largest selected
        k = max(_choose_k(cfg, s) for s in series)
        pf = blip.fit_pooled(series, k, cfg.delta)
        pf.write_json(out / "pooled.json")
        return EXIT_OK
    if cfg.command == "sensitivity":
        pops = _read_population(cfg.population) if cfg.population else {}
        rows = _map_regions(cfg, series, lambda c, s: task_sensitivity(c, s, pops.get(s.region_id, float("nan"))))
        sensitivity.write_reports_csv(out / "sensitivity.csv", [r[1] for r in rows if r[1] is not None])
        return _status_table(rows)
    if cfg.command == "markov-check":
        rows = _map_regions(cfg, series, task_markov)
        blip.write_markov_csv(out / "markov.csv", {r[0]: r[1] for r in rows if r[1] is not None})
        return _status_table(rows)
    task = {
        "fit": task_fit,
        "counterfactual": task_counterfactual,
        "deconvolve": task_deconvolve,
        "blip": task_blip,
    }[cfg.command]
    rows = _map_regions(cfg, series, task)
    for _, outputs, code, _ in rows:
        if outputs:
            for name, writer in outputs.items():
                writer(out / name)
    return _status_table(rows)


def _run_simulate(cfg: RunConfig, out: Path) -> int:
    spec = simulate.load_spec(cfg.spec)
    if cfg.seed is not None:
        spec = replace(spec, seed=cfg.seed)
    if cfg.check == "coverage":
        if not isinstance(spec, simulate.BlipSpec):
            raise ConfigError("--check coverage needs a blip spec")
        rep = simulate.coverage_experiment(spec, cfg.reps, cfg.level, k=cfg.k, weighted=not cfg.unweighted,
                                           hac_lag=cfg.hac_lag)
        _json_writer(rep.to_dict())(out / "coverage.json")
        print(json.dumps(rep.to_dict()), file=sys.stdout)
        return EXIT_OK
    series = []
    for i in range(cfg.reps):
        s_i = replace(spec, seed=spec.seed + i)
        region = f"sim{i + 1:03d}"
        if isinstance(s_i, simulate.BlipSpec):
            series.append(simulate.simulate_blip(s_i, region))
        else:
            series.append(simulate.simulate_working(s_i, region)[0])
    data.write_csv(out / "simulated.csv", series)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = config_from_args(ns)
        return run(cfg)
    except ConfigError as exc:
        parser.error(str(exc))  # exits with status 2
    except data.TransportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (data.DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
