"""Marginal structural models for the effect of mobility on COVID-19 deaths."""

from .blip import fit_blip, fit_pooled, markov_diagnostics, select_k
from .counterfactual import counterfactual_curve, excess_deaths, make_intervention
from .data import RegionSeries, fetch_covidcast, load_csv, write_csv
from .deconv import deconvolve, refit_on_infections
from .delay import DelayKernel, build_F, build_gamma_kernel, compose_delay
from .msm import MsmFit, fit, fit_msm
from .sensitivity import delta_critical, gamma_bounds, sensitivity_report
from .simulate import (
    BlipSpec,
    MobilityPolicy,
    WorkingModelSpec,
    g_formula_oracle,
    null_paradox_demo,
    simulate_blip,
    simulate_working,
)
from .weights import WeightVector, estimate_weights, solve_weights

__version__ = "0.1.0"

__all__ = [
    "BlipSpec", "DelayKernel", "MobilityPolicy", "MsmFit", "RegionSeries", "WeightVector",
    "WorkingModelSpec", "build_F", "build_gamma_kernel", "compose_delay", "counterfactual_curve",
    "deconvolve", "delta_critical", "estimate_weights", "excess_deaths", "fetch_covidcast", "fit",
    "fit_blip", "fit_msm", "fit_pooled", "g_formula_oracle", "gamma_bounds", "load_csv",
    "make_intervention", "markov_diagnostics", "null_paradox_demo", "refit_on_infections",
    "select_k", "sensitivity_report", "simulate_blip", "simulate_working", "solve_weights",
    "write_csv",
]
