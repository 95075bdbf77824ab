"""Windowed model inputs built from a validated series and its derivatives.

Each training example ("window") targets one forecast date d and carries:

* ``prev_demand``, ``prev_emissions``         observed series of day d-1
* ``prev_marginal_emissions``                 hour-over-hour emission deltas of d-1
* ``prev_marginal_demand``                    hour-over-hour demand deltas of d-1
* ``dayahead_demand_forecast``                the hourly forecast for day d
* ``calendar``                                24 x 12 encoding of day d
* target                                      observed emissions of day d

All five series channels are 24-vectors. Windows are only built from days
fully covered by valid hours; normalization statistics come from the train
split alone.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from datetime import date, timedelta
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .ingest import HOUR, ValidatedSeries
from .series import DerivedSeries, complete_days, derive_all

#: Channels consumed by convolutional heads, in stable declaration order.
SERIES_CHANNELS = (
    "prev_demand",
    "prev_emissions",
    "prev_marginal_emissions",
    "prev_marginal_demand",
    "dayahead_demand_forecast",
)

CALENDAR_CHANNEL = "calendar"
CALENDAR_WIDTH = 12

#: Channels that get z-scored (the calendar encoding passes through raw).
NORMALIZED_CHANNELS = SERIES_CHANNELS + ("target",)

SIGMA_FLOOR = 1e-6

DEFAULT_SPLIT = (0.7, 0.15, 0.15)


def calendar_features(day: date, holidays: Iterable[date] = ()) -> np.ndarray:
    """24 x 12 calendar encoding for one date.

    Columns: sin/cos of hour-of-week (period 168 h), sin/cos of day-of-year
    (period 365.25 d), day-of-week one-hot (Monday = 0), holiday flag.
    """
    holiday_set = set(holidays)
    dow = day.weekday()
    doy = day.timetuple().tm_yday
    out = np.zeros((24, CALENDAR_WIDTH))
    doy_angle = 2.0 * math.pi * doy / 365.25
    flag = 1.0 if day in holiday_set else 0.0
    for h in range(24):
        how = dow * 24 + h
        angle = 2.0 * math.pi * how / 168.0
        out[h, 0] = math.sin(angle)
        out[h, 1] = math.cos(angle)
        out[h, 2] = math.sin(doy_angle)
        out[h, 3] = math.cos(doy_angle)
        out[h, 4 + dow] = 1.0
        out[h, 11] = flag
    return out


@dataclass
class FeatureWindow:
    """Inputs (and, for training, the target) for one forecast date."""

    forecast_date: date
    channels: dict[str, np.ndarray]
    target: np.ndarray | None = None
    forecast_fallback: bool = False  # forecast column absent; observed demand used
    synthetic_first_marginal: bool = False  # series began on day d-1; delta[0] zero-filled

    def copy(self) -> "FeatureWindow":
        return FeatureWindow(
            forecast_date=self.forecast_date,
            channels={name: values.copy() for name, values in self.channels.items()},
            target=None if self.target is None else self.target.copy(),
            forecast_fallback=self.forecast_fallback,
            synthetic_first_marginal=self.synthetic_first_marginal,
        )


@dataclass
class NormStats:
    """Per-channel z-score statistics, fitted on the training split only."""

    means: dict[str, float]
    stds: dict[str, float]

    def to_dict(self) -> dict:
        return {
            "means": {k: self.means[k] for k in sorted(self.means)},
            "stds": {k: self.stds[k] for k in sorted(self.stds)},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NormStats":
        return cls(means=dict(data["means"]), stds=dict(data["stds"]))


@dataclass
class Dataset:
    """Chronologically split windows plus their normalization statistics."""

    windows: list[FeatureWindow]
    n_train: int
    n_val: int
    n_test: int
    stats: NormStats | None = None

    @property
    def train(self) -> list[FeatureWindow]:
        return self.windows[: self.n_train]

    @property
    def val(self) -> list[FeatureWindow]:
        return self.windows[self.n_train : self.n_train + self.n_val]

    @property
    def test(self) -> list[FeatureWindow]:
        return self.windows[self.n_train + self.n_val :]

    def split(self, name: str) -> list[FeatureWindow]:
        try:
            return {"train": self.train, "val": self.val, "test": self.test}[name]
        except KeyError:
            raise ConfigError(f"unknown split {name!r}; expected train, val, or test") from None


def _day_arrays(series: ValidatedSeries) -> tuple[np.ndarray, np.ndarray, list[float | None]]:
    demand = np.array([obs.demand for obs in series.observations], dtype=float)
    co2 = np.array([obs.co2 for obs in series.observations], dtype=float)
    forecast = [obs.demand_forecast for obs in series.observations]
    return demand, co2, forecast


def _prev_day_marginals(
    derived: DerivedSeries,
    lo: int,
    missing: Sequence[bool],
) -> tuple[np.ndarray, np.ndarray, bool] | str:
    """Delta channels for the previous day starting at index ``lo``.

    Returns a drop reason string when the cross-midnight difference would
    touch a missing hour. A series that begins exactly at ``lo`` gets a
    zero-filled first slot instead (flagged), so the earliest possible
    window is not lost to the missing day before the data starts.
    """
    synthetic = False
    delta_e = derived.delta_e[lo : lo + 24].copy()
    delta_d = derived.marginal_demand[lo : lo + 24].copy()
    if lo == 0:
        delta_e[0] = 0.0
        delta_d[0] = 0.0
        synthetic = True
    elif missing[lo - 1]:
        return "hour before previous day is missing"
    if np.isnan(delta_e).any() or np.isnan(delta_d).any():
        return "non-finite marginal values in previous day"
    return delta_e, delta_d, synthetic


def build_windows(
    series: ValidatedSeries,
    derived: DerivedSeries | None = None,
    holidays: Iterable[date] = (),
) -> tuple[list[FeatureWindow], list[tuple[date, str]]]:
    """One window per date whose previous day and own day are fully usable.

    Returns the windows in chronological order plus a list of
    ``(date, reason)`` pairs for every candidate date that was dropped.
    """
    if derived is None:
        derived = derive_all(series)
    demand, co2, forecast = _day_arrays(series)
    missing = series.missing_mask()
    day_slices = complete_days(series)
    holiday_set = set(holidays)

    all_days = sorted({(series.start + i * HOUR).date() for i in range(len(series))})
    windows: list[FeatureWindow] = []
    dropped: list[tuple[date, str]] = []
    for d in all_days[1:]:
        prev = d - timedelta(days=1)
        if d not in day_slices:
            dropped.append((d, "forecast day incomplete"))
            continue
        if prev not in day_slices:
            dropped.append((d, "previous day incomplete"))
            continue
        cur = day_slices[d]
        prev_slice = day_slices[prev]
        prev_demand = demand[prev_slice]
        prev_emissions = co2[prev_slice]
        target = co2[cur]
        if np.isnan(prev_demand).any() or np.isnan(prev_emissions).any() or np.isnan(target).any():
            dropped.append((d, "non-finite demand or emissions values"))
            continue

        marginals = _prev_day_marginals(derived, prev_slice.start, missing)
        if isinstance(marginals, str):
            dropped.append((d, marginals))
            continue
        delta_e, delta_d, synthetic = marginals

        day_forecast = forecast[cur.start : cur.stop]
        fallback = any(f is None or math.isnan(f) for f in day_forecast)
        if fallback:
            forecast_channel = demand[cur].copy()
        else:
            forecast_channel = np.array(day_forecast, dtype=float)

        windows.append(
            FeatureWindow(
                forecast_date=d,
                channels={
                    "prev_demand": prev_demand.copy(),
                    "prev_emissions": prev_emissions.copy(),
                    "prev_marginal_emissions": delta_e,
                    "prev_marginal_demand": delta_d,
                    "dayahead_demand_forecast": forecast_channel,
                    CALENDAR_CHANNEL: calendar_features(d, holiday_set),
                },
                target=target.copy(),
                forecast_fallback=fallback,
                synthetic_first_marginal=synthetic,
            )
        )
    return windows, dropped


def build_live_window(
    series: ValidatedSeries,
    derived: DerivedSeries | None = None,
    holidays: Iterable[date] = (),
    next_day_forecast: Sequence[float] | None = None,
) -> FeatureWindow:
    """Prediction window (no target) for the day after the newest complete day.

    When no hourly forecast for the coming day is supplied, the newest
    day's observed demand stands in, flagged via ``forecast_fallback``.
    """
    if derived is None:
        derived = derive_all(series)
    day_slices = complete_days(series)
    if not day_slices:
        raise DataError("no complete day available to predict from")
    newest = max(day_slices)
    target_date = newest + timedelta(days=1)
    prev_slice = day_slices[newest]

    demand, co2, _ = _day_arrays(series)
    prev_demand = demand[prev_slice]
    prev_emissions = co2[prev_slice]
    if np.isnan(prev_demand).any() or np.isnan(prev_emissions).any():
        raise DataError(f"newest complete day {newest} contains non-finite values")

    marginals = _prev_day_marginals(derived, prev_slice.start, series.missing_mask())
    if isinstance(marginals, str):
        raise DataError(f"cannot build prediction window for {target_date}: {marginals}")
    delta_e, delta_d, synthetic = marginals

    if next_day_forecast is not None:
        forecast_channel = np.asarray(list(next_day_forecast), dtype=float)
        if forecast_channel.shape != (24,) or np.isnan(forecast_channel).any():
            raise DataError("next-day forecast must be 24 finite values")
        fallback = False
    else:
        forecast_channel = prev_demand.copy()
        fallback = True

    return FeatureWindow(
        forecast_date=target_date,
        channels={
            "prev_demand": prev_demand.copy(),
            "prev_emissions": prev_emissions.copy(),
            "prev_marginal_emissions": delta_e,
            "prev_marginal_demand": delta_d,
            "dayahead_demand_forecast": forecast_channel,
            CALENDAR_CHANNEL: calendar_features(target_date, set(holidays)),
        },
        target=None,
        forecast_fallback=fallback,
        synthetic_first_marginal=synthetic,
    )


def chronological_split(
    windows: Sequence[FeatureWindow],
    fractions: Sequence[float] = DEFAULT_SPLIT,
) -> Dataset:
    """Contiguous prefix/middle/suffix split, never shuffled.

    Counts are floor allocations with the remainder assigned to train,
    except that val and test are each guaranteed one window (taken from
    train) so every split is usable.
    """
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ConfigError("split fractions must be three positive numbers")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must sum to 1, got {sum(fractions)}")
    n = len(windows)
    if n < 3:
        raise DataError(f"need at least 3 windows to split, got {n}")

    n_val = math.floor(n * fractions[1])
    n_test = math.floor(n * fractions[2])
    n_train = n - n_val - n_test
    if n_val == 0:
        n_val, n_train = 1, n_train - 1
    if n_test == 0:
        n_test, n_train = 1, n_train - 1

    ordered = sorted(windows, key=lambda w: w.forecast_date)
    return Dataset(windows=list(ordered), n_train=n_train, n_val=n_val, n_test=n_test)


def fit_normalizer(train_windows: Sequence[FeatureWindow], sigma_floor: float = SIGMA_FLOOR) -> NormStats:
    """Population mean/std per channel over all training hours."""
    if not train_windows:
        raise DataError("cannot fit a normalizer on zero training windows")
    means: dict[str, float] = {}
    stds: dict[str, float] = {}
    for name in NORMALIZED_CHANNELS:
        if name == "target":
            values = np.concatenate([w.target for w in train_windows if w.target is not None])
            if values.size == 0:
                raise DataError("training windows carry no targets")
        else:
            values = np.concatenate([w.channels[name] for w in train_windows])
        means[name] = float(np.mean(values))
        stds[name] = max(float(np.std(values)), sigma_floor)
    return NormStats(means=means, stds=stds)


def apply_normalizer(window: FeatureWindow, stats: NormStats) -> FeatureWindow:
    """Z-score the series channels (and target, if present); calendar passes through."""
    normalized = window.copy()
    for name in SERIES_CHANNELS:
        normalized.channels[name] = (window.channels[name] - stats.means[name]) / stats.stds[name]
    if window.target is not None:
        normalized.target = (window.target - stats.means["target"]) / stats.stds["target"]
    return normalized


def inverse_normalizer(window: FeatureWindow, stats: NormStats) -> FeatureWindow:
    """Exact inverse of ``apply_normalizer``."""
    raw = window.copy()
    for name in SERIES_CHANNELS:
        raw.channels[name] = window.channels[name] * stats.stds[name] + stats.means[name]
    if window.target is not None:
        raw.target = window.target * stats.stds["target"] + stats.means["target"]
    return raw


def denormalize_target(values: np.ndarray, stats: NormStats) -> np.ndarray:
    return values * stats.stds["target"] + stats.means["target"]


def normalize_dataset(dataset: Dataset, sigma_floor: float = SIGMA_FLOOR) -> Dataset:
    """Fit stats on the train split and z-score every window."""
    stats = fit_normalizer(dataset.train, sigma_floor=sigma_floor)
    windows = [apply_normalizer(w, stats) for w in dataset.windows]
    return Dataset(
        windows=windows,
        n_train=dataset.n_train,
        n_val=dataset.n_val,
        n_test=dataset.n_test,
        stats=stats,
    )


# ---------------------------------------------------------------------------
# Dataset serialization (versioned, reproducible bundle)
# ---------------------------------------------------------------------------

DATASET_FORMAT_VERSION = 1


def dataset_to_json(dataset: Dataset) -> str:
    """Canonical JSON bundle; byte-identical for identical datasets."""
    doc = {
        "version": DATASET_FORMAT_VERSION,
        "counts": {"train": dataset.n_train, "val": dataset.n_val, "test": dataset.n_test},
        "stats": None if dataset.stats is None else dataset.stats.to_dict(),
        "windows": [
            {
                "forecast_date": w.forecast_date.isoformat(),
                "channels": {name: w.channels[name].tolist() for name in sorted(w.channels)},
                "target": None if w.target is None else w.target.tolist(),
                "forecast_fallback": w.forecast_fallback,
                "synthetic_first_marginal": w.synthetic_first_marginal,
            }
            for w in dataset.windows
        ],
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def dataset_from_json(text: str) -> Dataset:
    doc = json.loads(text)
    if doc.get("version") != DATASET_FORMAT_VERSION:
        raise ConfigError(f"unsupported dataset bundle version: {doc.get('version')!r}")
    windows = []
    for item in doc["windows"]:
        channels = {name: np.asarray(values, dtype=float) for name, values in item["channels"].items()}
        windows.append(
            FeatureWindow(
                forecast_date=date.fromisoformat(item["forecast_date"]),
                channels=channels,
                target=None if item["target"] is None else np.asarray(item["target"], dtype=float),
                forecast_fallback=item["forecast_fallback"],
                synthetic_first_marginal=item["synthetic_first_marginal"],
            )
        )
    counts = doc["counts"]
    stats = None if doc["stats"] is None else NormStats.from_dict(doc["stats"])
    return Dataset(
        windows=windows,
        n_train=counts["train"],
        n_val=counts["val"],
        n_test=counts["test"],
        stats=stats,
    )
