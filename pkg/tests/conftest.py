"""Shared fixtures and builders for the test suite."""

from __future__ import annotations

import math
from datetime import datetime, timedelta, timezone

import numpy as np
import pytest

from mefcast.features import NormStats
from mefcast.ingest import FuelKind, HourlyObservation, validate_series
from mefcast.nn import ConvLayerSpec, HeadSpec, ModelSpec
from mefcast.synth import ScenarioConfig, generate_scenario

T0 = datetime(2023, 1, 1, 0, tzinfo=timezone.utc)
HOUR = timedelta(hours=1)


def make_obs(
    hour: int,
    demand: float = 100.0,
    co2: float = 50.0,
    region: str = "TEST",
    forecast: float | None = None,
    net_imports: float = 0.0,
    generation: dict | None = None,
    start: datetime = T0,
) -> HourlyObservation:
    if generation is None:
        generation = {FuelKind.natural_gas: demand if not math.isnan(demand) else 0.0}
    return HourlyObservation(
        timestamp=start + hour * HOUR,
        region=region,
        demand=demand,
        demand_forecast=forecast,
        net_imports=net_imports,
        generation=dict(generation),
        co2=co2,
    )


def make_series(n_hours: int, co2=None, demand=None, region: str = "TEST", **kwargs):
    """Contiguous validated series with simple defaults."""
    observations = []
    for i in range(n_hours):
        observations.append(
            make_obs(
                i,
                demand=100.0 if demand is None else float(demand[i]),
                co2=50.0 if co2 is None else float(co2[i]),
                region=region,
                **kwargs,
            )
        )
    return validate_series(observations)


def obs_equal(a: HourlyObservation, b: HourlyObservation) -> bool:
    """Field-by-field equality with NaN == NaN."""

    def num_eq(x, y):
        if x is None or y is None:
            return x is None and y is None
        if math.isnan(x) or math.isnan(y):
            return math.isnan(x) and math.isnan(y)
        return x == y

    return (
        a.timestamp == b.timestamp
        and a.region == b.region
        and num_eq(a.demand, b.demand)
        and num_eq(a.demand_forecast, b.demand_forecast)
        and num_eq(a.net_imports, b.net_imports)
        and num_eq(a.co2, b.co2)
        and set(a.generation) == set(b.generation)
        and all(num_eq(a.generation[f], b.generation[f]) for f in a.generation)
    )


@pytest.fixture(scope="session")
def clean_scenario():
    """Noise-free 10-day default scenario with its ground-truth sidecar."""
    return generate_scenario(ScenarioConfig(days=10, seed=11))


@pytest.fixture(scope="session")
def noisy_scenario():
    """30-day scenario with demand and forecast noise, for pipeline tests."""
    config = ScenarioConfig(days=30, noise_sigma_mwh=5.4, forecast_noise_sigma_mwh=1.8, seed=21)
    return generate_scenario(config)


def pinned_linear_model(stats: NormStats, coefficient: float):
    """Model whose raw-unit output is exactly coefficient * forecast[h] + const.

    A +10 conv bias keeps the ReLU in its linear region for any plausible
    z-score, and the final layer cancels the offset.
    """
    spec = ModelSpec(
        heads=[HeadSpec("dayahead_demand_forecast", (ConvLayerSpec(1, 1, 1),))],
        trunk=[24],
        use_calendar=False,
    )
    params = {path: np.zeros(shape) for path, shape in spec.param_shapes().items()}
    w_norm = coefficient * stats.stds["dayahead_demand_forecast"] / stats.stds["target"]
    params["head/dayahead_demand_forecast/conv0/w"][:] = 1.0
    params["head/dayahead_demand_forecast/conv0/b"][:] = 10.0
    params["trunk/dense0/w"][:] = np.eye(24) * w_norm
    params["trunk/dense0/b"][:] = -10.0 * w_norm
    return spec, params


def random_observations(rng: np.random.Generator, n_hours: int, region: str = "RND"):
    """Random but valid observation list (no NaN), for round-trip tests."""
    fuels = list(FuelKind)
    observations = []
    for i in range(n_hours):
        generation = {}
        for fuel in fuels:
            if rng.random() < 0.4:
                generation[fuel] = float(np.round(rng.uniform(0, 5000), 6))
        observations.append(
            HourlyObservation(
                timestamp=T0 + i * HOUR,
                region=region,
                demand=float(rng.uniform(0, 30000)),
                demand_forecast=float(rng.uniform(0, 30000)) if rng.random() < 0.8 else None,
                net_imports=float(rng.uniform(-2000, 2000)),
                generation=generation,
                co2=float(rng.uniform(0, 9000)),
            )
        )
    return observations
