"""Merit-order dispatch scenarios with analytically known marginal intensity.

The generator produces hourly series shaped like a real grid day (diurnal
demand, midday solar dip, optional noise) in which every hour's marginal
unit, and therefore the true marginal emissions rate, is known exactly.
These scenarios are the ground truth the rest of the pipeline is tested
against. Transmission, reserves, ramping and storage are deliberately out
of scope: dispatch is a pure sort-and-fill.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import date, datetime, timezone
from io import StringIO

import numpy as np

from .errors import ConfigError, InfeasibleError
from .ingest import (
    HOUR,
    FuelKind,
    HourlyObservation,
    ValidatedSeries,
    format_timestamp,
    parse_timestamp,
    validate_series,
)


@dataclass(frozen=True)
class GeneratorUnit:
    """One dispatchable unit. Capacity doubles as MWh per hour."""

    name: str
    capacity_mw: float
    emission_rate_t_per_mwh: float
    marginal_cost: float
    fuel: FuelKind | None = None

    def __post_init__(self):
        if self.capacity_mw <= 0:
            raise ConfigError(f"unit {self.name!r}: capacity must be positive")
        if self.emission_rate_t_per_mwh < 0:
            raise ConfigError(f"unit {self.name!r}: emission rate must be >= 0")
        if self.fuel is None:
            # Emitting units default to gas, clean units to nuclear, so that
            # fossil-generation sums see exactly the emitting fleet.
            inferred = FuelKind.natural_gas if self.emission_rate_t_per_mwh > 0 else FuelKind.nuclear
            object.__setattr__(self, "fuel", inferred)


@dataclass(frozen=True)
class DispatchResult:
    outputs: dict[str, float]  # unit name -> MWh
    emissions_t: float
    marginal_unit: str


def merit_order(fleet: list[GeneratorUnit]) -> list[GeneratorUnit]:
    """Units in dispatch order: ascending marginal cost, ties broken by name."""
    return sorted(fleet, key=lambda unit: (unit.marginal_cost, unit.name))


def merit_order_dispatch(fleet: list[GeneratorUnit], demand_mwh: float) -> DispatchResult:
    """Fill units in merit order until demand is met.

    The marginal unit is the partially loaded one, or the last fully loaded
    unit when demand lands exactly on a capacity boundary. Zero demand makes
    the first unit in merit order marginal by convention.
    """
    if not fleet:
        raise ConfigError("cannot dispatch an empty fleet")
    ordered = merit_order(fleet)
    total_capacity = sum(unit.capacity_mw for unit in ordered)
    if demand_mwh < 0:
        raise InfeasibleError(f"demand {demand_mwh} MWh is negative")
    if demand_mwh > total_capacity:
        raise InfeasibleError(
            f"demand {demand_mwh} MWh exceeds fleet capacity {total_capacity} MWh"
        )

    outputs = {unit.name: 0.0 for unit in ordered}
    remaining = demand_mwh
    marginal = ordered[0].name
    for unit in ordered:
        if remaining <= 0.0:
            break
        take = min(unit.capacity_mw, remaining)
        outputs[unit.name] = take
        remaining -= take
        marginal = unit.name
    emissions = sum(outputs[unit.name] * unit.emission_rate_t_per_mwh for unit in ordered)
    return DispatchResult(outputs=outputs, emissions_t=emissions, marginal_unit=marginal)


def default_fleet() -> list[GeneratorUnit]:
    """Three-unit toy fleet: clean baseload plus two emitting tiers."""
    return [
        GeneratorUnit("A", 100.0, 0.0, 0.0),
        GeneratorUnit("B", 100.0, 0.4, 30.0),
        GeneratorUnit("C", 100.0, 0.9, 60.0),
    ]


@dataclass
class ScenarioConfig:
    """Shape of a generated scenario.

    Hourly demand is ``base + amplitude * sin(2*pi*(h - phase)/24)`` plus
    seeded Gaussian noise, so demand peaks at ``phase_hour + 6`` (18:00 by
    default). Solar output follows a daylight half-sine of height
    ``solar_depth_mwh`` and is netted off demand before dispatch, carving
    the characteristic midday intensity dip. Forecast noise is drawn
    independently of demand noise.
    """

    fleet: list[GeneratorUnit] = field(default_factory=default_fleet)
    days: int = 30
    base_demand_mwh: float = 180.0
    diurnal_amplitude_mwh: float = 40.0
    solar_depth_mwh: float = 30.0
    noise_sigma_mwh: float = 0.0
    forecast_noise_sigma_mwh: float = 0.0
    phase_hour: float = 12.0
    seed: int = 0
    region: str = "SYNTH"
    start_day: date = date(2023, 1, 1)

    def __post_init__(self):
        if self.days < 1:
            raise ConfigError("scenario needs at least one day")
        capacity = sum(unit.capacity_mw for unit in self.fleet)
        peak = self.base_demand_mwh + self.diurnal_amplitude_mwh
        if peak > capacity:
            raise ConfigError(
                f"peak demand {peak} MWh exceeds fleet capacity {capacity} MWh"
            )
        if self.base_demand_mwh < 0 or self.diurnal_amplitude_mwh < 0 or self.solar_depth_mwh < 0:
            raise ConfigError("demand shape parameters must be nonnegative")


@dataclass(frozen=True)
class SidecarEntry:
    """Ground truth for one hour: who is marginal, and the exact MEF when defined."""

    timestamp: datetime
    marginal_unit: str
    true_mef: float  # NaN at hour 0 and wherever the marginal unit changed


def solar_output(hour_of_day: float, depth_mwh: float) -> float:
    """Daylight half-sine: zero outside 06:00-18:00, ``depth`` at noon."""
    return depth_mwh * max(0.0, math.sin(math.pi * (hour_of_day - 6.0) / 12.0))


def generate_scenario(config: ScenarioConfig) -> tuple[ValidatedSeries, list[SidecarEntry]]:
    """Generate a scenario series plus its per-hour ground-truth sidecar."""
    rates = {unit.name: unit.emission_rate_t_per_mwh for unit in config.fleet}
    seeds = np.random.SeedSequence(config.seed).spawn(2)
    demand_rng = np.random.default_rng(seeds[0])
    forecast_rng = np.random.default_rng(seeds[1])

    start = datetime(
        config.start_day.year, config.start_day.month, config.start_day.day, tzinfo=timezone.utc
    )
    n_hours = config.days * 24

    observations: list[HourlyObservation] = []
    marginal_units: list[str] = []
    for i in range(n_hours):
        h = i % 24
        clean = config.base_demand_mwh + config.diurnal_amplitude_mwh * math.sin(
            2.0 * math.pi * (h - config.phase_hour) / 24.0
        )
        noise = demand_rng.normal(0.0, config.noise_sigma_mwh) if config.noise_sigma_mwh > 0 else 0.0
        demand = max(0.0, clean + noise)
        forecast_noise = (
            forecast_rng.normal(0.0, config.forecast_noise_sigma_mwh)
            if config.forecast_noise_sigma_mwh > 0
            else 0.0
        )
        forecast = max(0.0, demand + forecast_noise)

        solar = min(solar_output(h, config.solar_depth_mwh), demand)
        net_demand = demand - solar
        try:
            dispatch = merit_order_dispatch(config.fleet, net_demand)
        except InfeasibleError as exc:
            raise InfeasibleError(f"hour {format_timestamp(start + i * HOUR)}: {exc}") from exc

        generation: dict[FuelKind, float] = {}
        if config.solar_depth_mwh > 0:
            generation[FuelKind.solar] = solar
        for unit in config.fleet:
            fuel = unit.fuel
            generation[fuel] = generation.get(fuel, 0.0) + dispatch.outputs[unit.name]

        observations.append(
            HourlyObservation(
                timestamp=start + i * HOUR,
                region=config.region,
                demand=demand,
                demand_forecast=forecast,
                net_imports=0.0,
                generation=generation,
                co2=dispatch.emissions_t,
            )
        )
        marginal_units.append(dispatch.marginal_unit)

    sidecar = []
    for i, unit_name in enumerate(marginal_units):
        if i > 0 and marginal_units[i - 1] == unit_name:
            true_mef = rates[unit_name]
        else:
            true_mef = math.nan
        sidecar.append(
            SidecarEntry(timestamp=start + i * HOUR, marginal_unit=unit_name, true_mef=true_mef)
        )

    return validate_series(observations), sidecar


def sidecar_to_csv(entries: list[SidecarEntry]) -> str:
    out = StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["timestamp", "marginal_unit", "true_mef"])
    for entry in entries:
        mef_cell = "" if math.isnan(entry.true_mef) else repr(float(entry.true_mef))
        writer.writerow([format_timestamp(entry.timestamp), entry.marginal_unit, mef_cell])
    return out.getvalue()


def parse_sidecar_csv(content: str) -> list[SidecarEntry]:
    reader = csv.reader(StringIO(content, newline=""))
    header = next(reader)
    if header != ["timestamp", "marginal_unit", "true_mef"]:
        raise ConfigError(f"unexpected sidecar header: {header}")
    entries = []
    for row in reader:
        if not row:
            continue
        mef = float(row[2]) if row[2] else math.nan
        entries.append(
            SidecarEntry(timestamp=parse_timestamp(row[0]), marginal_unit=row[1], true_mef=mef)
        )
    return entries
