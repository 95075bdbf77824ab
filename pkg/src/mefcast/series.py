"""Derived emissions quantities computed from a validated hourly series.

Definitions (the load-bearing interpretation for the whole package, also
documented in the README):

* marginal emissions    dE[t] = co2[t] - co2[t-1]          (tonnes)
* marginal generation   dG[t] = fossil[t] - fossil[t-1]    (MWh)
* marginal demand       dD[t] = demand[t] - demand[t-1]    (MWh)
* marginal intensity    mef[t] = dE[t] / dG[t]             (t/MWh)
* hourly intensity      co2[t] / total_generation[t]       (t/MWh)
* daily average factor  sum(co2) / sum(total_generation)   (t/MWh)

Index 0 of every difference series carries NaN (no predecessor hour), and
NaN marks every undefined value downstream; aggregations skip NaN
explicitly.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta
from io import StringIO

import numpy as np

from .errors import DataError, SeriesError
from .ingest import (
    FOSSIL_FUELS,
    HOUR,
    HourlyObservation,
    ValidatedSeries,
    format_timestamp,
)

#: Ramps smaller than this are numerically meaningless for intensity ratios.
DEFAULT_EPSILON_G_MWH = 1.0


@dataclass
class DerivedSeries:
    """Per-hour derived quantities aligned with the source observations."""

    timestamps: list[datetime]
    delta_e: np.ndarray
    delta_g_fossil: np.ndarray
    mef: np.ndarray
    marginal_demand: np.ndarray
    intensity: np.ndarray
    aef_daily: dict[date, float]
    skipped_days: list[tuple[date, str]] = field(default_factory=list)


@dataclass
class IntensityProfile:
    """Mean intensity by local hour-of-day plus the overall mean."""

    hourly_mean: np.ndarray  # 24 values, t/MWh
    overall_mean: float
    period: tuple[date, date]


def first_difference(x) -> np.ndarray:
    """Difference series: out[0] = NaN, out[t] = x[t] - x[t-1].

    NaN inputs propagate: any difference touching a NaN hour is NaN.
    """
    values = np.asarray(x, dtype=float)
    if values.ndim != 1 or values.size < 1:
        raise DataError("first_difference expects a non-empty 1-D series")
    out = np.empty_like(values)
    out[0] = np.nan
    out[1:] = values[1:] - values[:-1]
    return out


def fossil_generation(obs: HourlyObservation) -> float:
    """Generation summed over coal, natural gas, and petroleum; absent fuels count 0."""
    return float(sum(value for fuel, value in obs.generation.items() if fuel in FOSSIL_FUELS))


def marginal_intensity(delta_e: float, delta_g: float, epsilon_g: float = DEFAULT_EPSILON_G_MWH) -> float:
    """dE/dG when the generation ramp is resolvable, NaN otherwise."""
    if math.isnan(delta_e) or math.isnan(delta_g) or abs(delta_g) < epsilon_g:
        return math.nan
    return delta_e / delta_g


def aef_ratio(total_co2: float, total_generation: float) -> float:
    """Total emissions over total generation; raises when generation is not positive."""
    if not total_generation > 0:
        raise DataError("average emissions factor undefined: total generation is not positive")
    return total_co2 / total_generation


def _hour_arrays(series: ValidatedSeries) -> dict[str, np.ndarray]:
    missing = np.asarray(series.missing_mask())
    co2 = np.array([obs.co2 for obs in series.observations], dtype=float)
    demand = np.array([obs.demand for obs in series.observations], dtype=float)
    fossil = np.array([fossil_generation(obs) for obs in series.observations], dtype=float)
    total = np.array([obs.total_generation() for obs in series.observations], dtype=float)
    # Placeholder rows have empty generation maps that sum to 0; mask them
    # so no derived statistic ever reads a missing hour.
    fossil[missing] = np.nan
    total[missing] = np.nan
    return {"co2": co2, "demand": demand, "fossil": fossil, "total": total, "missing": missing}


def complete_days(series: ValidatedSeries) -> dict[date, slice]:
    """UTC calendar days fully covered by non-missing hours, as index slices."""
    missing = series.missing_mask()
    days: dict[date, slice] = {}
    start = series.start
    n = len(series.observations)
    first_midnight = int((24 - start.hour) % 24)
    for lo in range(first_midnight, n - 23, 24):
        stamp = start + lo * HOUR
        if stamp.hour != 0:
            continue
        if not any(missing[lo : lo + 24]):
            days[stamp.date()] = slice(lo, lo + 24)
    return days


def average_emissions_factor(series: ValidatedSeries, day: date) -> float:
    """Daily total emissions per MWh generated over the day's 24 hours."""
    days = complete_days(series)
    if day not in days:
        raise DataError(f"day {day.isoformat()} skipped: not fully covered by valid hours")
    window = days[day]
    arrays = _hour_arrays(series)
    total_co2 = float(np.sum(arrays["co2"][window]))
    total_gen = float(np.sum(arrays["total"][window]))
    if not (math.isfinite(total_co2) and math.isfinite(total_gen)):
        raise DataError(f"day {day.isoformat()} skipped: non-finite emissions or generation")
    return aef_ratio(total_co2, total_gen)


def derive_all(series: ValidatedSeries, epsilon_g: float = DEFAULT_EPSILON_G_MWH) -> DerivedSeries:
    """Compute every derived quantity for one series in a single pass."""
    arrays = _hour_arrays(series)
    delta_e = first_difference(arrays["co2"])
    delta_g = first_difference(arrays["fossil"])
    marginal_demand = first_difference(arrays["demand"])

    with np.errstate(invalid="ignore", divide="ignore"):
        mef = np.where(np.abs(delta_g) >= epsilon_g, delta_e / delta_g, np.nan)
        intensity = np.where(arrays["total"] >= epsilon_g, arrays["co2"] / arrays["total"], np.nan)

    aef: dict[date, float] = {}
    skipped: list[tuple[date, str]] = []
    day_slices = complete_days(series)
    seen_days = {ts.date() for ts in (series.start + i * HOUR for i in range(len(series)))}
    for day in sorted(seen_days):
        window = day_slices.get(day)
        if window is None:
            skipped.append((day, "incomplete or missing hours"))
            continue
        total_gen = float(np.sum(arrays["total"][window]))
        total_co2 = float(np.sum(arrays["co2"][window]))
        if not math.isfinite(total_co2) or not math.isfinite(total_gen):
            skipped.append((day, "non-finite emissions or generation"))
            continue
        if not total_gen > 0:
            skipped.append((day, "total generation not positive"))
            continue
        aef[day] = total_co2 / total_gen

    timestamps = [series.start + i * HOUR for i in range(len(series))]
    return DerivedSeries(
        timestamps=timestamps,
        delta_e=delta_e,
        delta_g_fossil=delta_g,
        mef=mef,
        marginal_demand=marginal_demand,
        intensity=intensity,
        aef_daily=aef,
        skipped_days=skipped,
    )


def intensity_profile(
    series: ValidatedSeries,
    local_offset_hours: float = 0.0,
    epsilon_g: float = DEFAULT_EPSILON_G_MWH,
) -> IntensityProfile:
    """Mean hourly intensity by local hour-of-day and the overall mean.

    ``local_offset_hours`` shifts UTC timestamps into presentation time
    (CAISO uses -8). NaN intensity hours are excluded from every mean.
    """
    arrays = _hour_arrays(series)
    with np.errstate(invalid="ignore", divide="ignore"):
        intensity = np.where(arrays["total"] >= epsilon_g, arrays["co2"] / arrays["total"], np.nan)

    offset = timedelta(hours=local_offset_hours)
    local_times = [series.start + i * HOUR + offset for i in range(len(series))]
    hours = np.array([t.hour for t in local_times])

    by_day: dict[date, int] = {}
    for t, value in zip(local_times, intensity):
        if not math.isnan(value):
            by_day[t.date()] = by_day.get(t.date(), 0) + 1
    if not any(count == 24 for count in by_day.values()):
        raise SeriesError("intensity profile requires at least one complete local day")

    hourly_mean = np.full(24, np.nan)
    for h in range(24):
        values = intensity[hours == h]
        values = values[~np.isnan(values)]
        if values.size:
            hourly_mean[h] = float(np.mean(values))
    valid = intensity[~np.isnan(intensity)]
    overall = float(np.mean(valid))
    period = (min(by_day), max(by_day))
    return IntensityProfile(hourly_mean=hourly_mean, overall_mean=overall, period=period)


# ---------------------------------------------------------------------------
# CSV exports (plot-ready)
# ---------------------------------------------------------------------------


def _cell(value: float) -> str:
    return "" if math.isnan(value) else repr(float(value))


def derived_to_csv(derived: DerivedSeries) -> str:
    out = StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["timestamp", "delta_e_t", "delta_g_mwh", "mef_t_per_mwh", "intensity_t_per_mwh"])
    for i, stamp in enumerate(derived.timestamps):
        writer.writerow(
            [
                format_timestamp(stamp),
                _cell(float(derived.delta_e[i])),
                _cell(float(derived.delta_g_fossil[i])),
                _cell(float(derived.mef[i])),
                _cell(float(derived.intensity[i])),
            ]
        )
    return out.getvalue()


def profile_to_csv(profile: IntensityProfile) -> str:
    """24-row CSV with the hourly-mean and (repeated) overall-mean columns."""
    out = StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["hour", "hourly_mean_t_per_mwh", "overall_mean_t_per_mwh"])
    for h in range(24):
        writer.writerow([h, _cell(float(profile.hourly_mean[h])), _cell(profile.overall_mean)])
    return out.getvalue()
