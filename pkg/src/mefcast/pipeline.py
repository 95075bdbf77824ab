"""End-to-end plumbing shared by the HTTP service and the test suite.

These helpers glue the per-module operations into the standard flows
(CSV -> series -> windows -> model -> report) so the service endpoints and
CLI stay thin.
"""

from __future__ import annotations

import base64
from datetime import date, timedelta
from typing import Sequence

from .config import RunConfig
from .errors import DataError
from .features import Dataset, FeatureWindow, build_live_window, build_windows, chronological_split
from .ingest import ValidatedSeries, parse_csv, validate_series
from .nn import ModelSpec, Params, load_model_bytes, save_model_bytes
from .features import NormStats
from .series import derive_all
from .train_eval import TrainHistory, train


def series_from_csv(text: str, gap_policy_hours: int = 3) -> ValidatedSeries:
    return validate_series(parse_csv(text), gap_policy_hours=gap_policy_hours)


def dataset_for(series: ValidatedSeries, config: RunConfig) -> tuple[Dataset, list]:
    """Windows and chronological split per the config; not yet normalized."""
    derived = derive_all(series, epsilon_g=config.series.epsilon_g_mwh)
    windows, dropped = build_windows(series, derived, holidays=config.features.holidays)
    dataset = chronological_split(windows, fractions=config.features.split)
    return dataset, dropped


def window_for_date(
    series: ValidatedSeries,
    config: RunConfig,
    target_date: date | None = None,
    next_day_forecast: Sequence[float] | None = None,
) -> FeatureWindow:
    """Historical window (with target) or the live next-day window.

    ``target_date=None`` selects the day after the newest complete day.
    """
    derived = derive_all(series, epsilon_g=config.series.epsilon_g_mwh)
    windows, _ = build_windows(series, derived, holidays=config.features.holidays)
    by_date = {w.forecast_date: w for w in windows}
    live_date = None
    if windows:
        live_date = max(by_date) + timedelta(days=1)

    if target_date is None:
        return build_live_window(
            series, derived, holidays=config.features.holidays, next_day_forecast=next_day_forecast
        )
    if target_date in by_date:
        return by_date[target_date]
    if live_date is not None and target_date == live_date:
        return build_live_window(
            series, derived, holidays=config.features.holidays, next_day_forecast=next_day_forecast
        )
    raise DataError(
        f"no usable window for {target_date}: available dates are "
        f"{min(by_date) if by_date else 'none'}..{max(by_date) if by_date else 'none'}"
    )


def train_on_series(
    series: ValidatedSeries, config: RunConfig
) -> tuple[ModelSpec, Params, NormStats, TrainHistory, Dataset, date]:
    """Full training flow; returns everything needed to save and evaluate."""
    spec = config.model.to_spec()
    dataset, _ = dataset_for(series, config)
    params, history, stats = train(spec, dataset, config.train.to_train_config())
    trained_through = dataset.windows[-1].forecast_date
    return spec, params, stats, history, dataset, trained_through


def encode_model(
    spec: ModelSpec, params: Params, stats: NormStats | None, trained_through: date | None
) -> str:
    return base64.b64encode(save_model_bytes(spec, params, stats, trained_through)).decode("ascii")


def decode_model(text: str) -> tuple[ModelSpec, Params, NormStats | None, date | None]:
    try:
        raw = base64.b64decode(text.encode("ascii"), validate=True)
    except Exception as exc:
        raise DataError(f"model payload is not valid base64: {exc}") from exc
    return load_model_bytes(raw)
