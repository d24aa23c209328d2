"""Synthetic forcing and twin-experiment observations."""

from __future__ import annotations

import numpy as np

from .architectures import GraphSpec
from .core import simulate
from .forcing import ForcingSeries, build_spinup, from_arrays


def synthetic_forcing(n_years: int = 12, seed: int = 0, start_year: int = 1990, spinup: int = 3) -> ForcingSeries:
    """Daily precipitation and seasonal PET over whole water years.

    Precipitation is intermittent gamma-distributed rain with a wetter winter;
    PET follows a sinusoid peaking in July. Observed flow is left at zero
    until :func:`twin_observations` fills it in.
    """
    rng = np.random.default_rng(seed)
    start = np.datetime64(f"{start_year}-10-01")
    end = np.datetime64(f"{start_year + n_years}-10-01")
    dates = np.arange(start, end, dtype="datetime64[D]")
    n = len(dates)
    phase = 2 * np.pi * np.arange(n) / 365.25
    wet = 0.35 + 0.15 * np.cos(phase - 1.6)
    precip = rng.gamma(0.6, 9.0, n) * (rng.random(n) < wet)
    pet = np.clip(2.8 - 2.2 * np.cos(phase - 1.2), 0.05, None)
    series = from_arrays(dates, precip, pet, np.zeros(n))
    return build_spinup(series, spinup) if spinup else series


def twin_observations(
    graph: GraphSpec, params, forcing: ForcingSeries, scaling=None, init_states=None, noise: float = 0.01, seed: int = 0
) -> ForcingSeries:
    """Replace observed flow with a simulation times ``1 + noise * N(0, 1)``."""
    q = simulate(graph, params, forcing, init_states, scaling).streamflow
    rng = np.random.default_rng(seed)
    q = np.maximum(q * (1.0 + noise * rng.standard_normal(len(q))), 0.0)
    return ForcingSeries(forcing.dates, forcing.precip, forcing.pet, q, forcing.water_year, forcing.spinup_len)
