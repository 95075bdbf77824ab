"""Training, day-ahead prediction, baselines, metrics, and nowcast updates.

The model is trained on z-scored windows with mean-squared error against
observed emissions; marginal emissions of a forecast come out of the
forecast itself by first differences, which keeps the reported hourly
levels and ramps mutually consistent. Baselines implement the two naive
approaches a forecast must beat: yesterday-repeats (persistence) and the
per-hour-of-day climatology of the training period.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from datetime import date, timedelta
from io import StringIO
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError, NumericError, SeriesError
from .features import (
    Dataset,
    FeatureWindow,
    NormStats,
    apply_normalizer,
    build_live_window,
    normalize_dataset,
)
from .ingest import HOUR, HourlyObservation, ValidatedSeries, validate_series
from .nn import (
    ModelSpec,
    Params,
    adam_step,
    init_optimizer,
    init_params,
    loss_and_gradients,
    model_forward,
)
from .series import DEFAULT_EPSILON_G_MWH, complete_days, derive_all

DEFAULT_SENSITIVITY_DELTA = 0.01
DEFAULT_STALENESS_DAYS = 7


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 16
    learning_rate: float = 1e-3
    patience: int = 50
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.patience < 0:
            raise ConfigError("patience must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")


@dataclass
class TrainHistory:
    train_mse: list[float]
    val_mse: list[float]
    best_epoch: int  # 0-based index into the loss lists
    stopping_reason: str  # "max_epochs" or "early_stop"

    def to_csv(self) -> str:
        out = StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["epoch", "train_mse", "val_mse"])
        for i, (train, val) in enumerate(zip(self.train_mse, self.val_mse)):
            writer.writerow([i, repr(train), repr(val)])
        return out.getvalue()


@dataclass
class Metrics:
    mae: float
    rmse: float
    mape_percent: float
    nrmse: float
    n_hours: int

    def to_dict(self) -> dict:
        return {
            "mae_t": self.mae,
            "rmse_t": self.rmse,
            "mape_percent": None if math.isnan(self.mape_percent) else self.mape_percent,
            "nrmse": self.nrmse,
            "n_hours": self.n_hours,
        }


@dataclass
class EvalResult:
    metrics: Metrics
    per_hour_rmse: np.ndarray  # 24 values
    n_windows: int


@dataclass
class ForecastReport:
    """Everything one day-ahead forecast produces, denormalized."""

    forecast_date: date
    predicted_emissions_t: np.ndarray
    predicted_marginal_emissions_t: np.ndarray
    sensitivity_t_per_mwh: np.ndarray | None = None
    metrics: Metrics | None = None
    baseline_metrics: dict[str, Metrics] = field(default_factory=dict)
    forecast_fallback: bool = False

    def to_json_dict(self) -> dict:
        def clean(values: np.ndarray | None):
            if values is None:
                return None
            return [None if math.isnan(v) else float(v) for v in values]

        return {
            "forecast_date": self.forecast_date.isoformat(),
            "predicted_emissions_t": clean(self.predicted_emissions_t),
            "predicted_marginal_emissions_t": clean(self.predicted_marginal_emissions_t),
            "sensitivity_t_per_mwh": clean(self.sensitivity_t_per_mwh),
            "metrics": None if self.metrics is None else self.metrics.to_dict(),
            "baseline_metrics": {name: m.to_dict() for name, m in sorted(self.baseline_metrics.items())},
            "forecast_fallback": self.forecast_fallback,
        }

    def to_csv(self) -> str:
        out = StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["hour", "predicted_emissions_t", "predicted_delta_e_t", "sensitivity_t_per_mwh"])
        for h in range(24):
            sens = ""
            if self.sensitivity_t_per_mwh is not None and not math.isnan(self.sensitivity_t_per_mwh[h]):
                sens = repr(float(self.sensitivity_t_per_mwh[h]))
            writer.writerow(
                [
                    h,
                    repr(float(self.predicted_emissions_t[h])),
                    repr(float(self.predicted_marginal_emissions_t[h])),
                    sens,
                ]
            )
        return out.getvalue()


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _mean_split_loss(spec: ModelSpec, params: Params, windows: Sequence[FeatureWindow]) -> float:
    total = 0.0
    for window in windows:
        pred, _ = model_forward(spec, params, window.channels)
        total += float(np.mean((pred - window.target) ** 2))
    return total / len(windows)


def train(spec: ModelSpec, dataset: Dataset, config: TrainConfig) -> tuple[Params, TrainHistory, NormStats]:
    """Minibatch Adam on normalized MSE, keeping the best-validation epoch.

    Accepts a raw or pre-normalized dataset; raw datasets are z-scored here
    using train-split statistics. Fully deterministic under a fixed seed:
    batch order comes from one seeded generator and gradients accumulate in
    ascending window order within each batch.
    """
    config.validate()
    spec.validate()
    if dataset.stats is None:
        dataset = normalize_dataset(dataset)
    if not dataset.train or not dataset.val:
        raise DataError("training requires non-empty train and val splits")
    stats = dataset.stats
    train_windows = dataset.train
    val_windows = dataset.val

    params = init_params(spec)
    optimizer = init_optimizer(params, config.learning_rate)
    rng = np.random.default_rng(np.random.PCG64(config.seed))

    best_val = math.inf
    best_epoch = 0
    best_params = {path: values.copy() for path, values in params.items()}
    epochs_since_best = 0
    train_losses: list[float] = []
    val_losses: list[float] = []
    reason = "max_epochs"

    for epoch in range(config.epochs):
        order = rng.permutation(len(train_windows))
        for batch_index, start in enumerate(range(0, len(order), config.batch_size)):
            batch = sorted(order[start : start + config.batch_size])
            mean_grads: dict[str, np.ndarray] | None = None
            batch_loss = 0.0
            try:
                for window_index in batch:
                    window = train_windows[window_index]
                    loss, grads = loss_and_gradients(spec, params, window.channels, window.target)
                    batch_loss += loss
                    if mean_grads is None:
                        mean_grads = grads
                    else:
                        for path in mean_grads:
                            mean_grads[path] += grads[path]
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, batch {batch_index}: {exc}") from exc
            scale = 1.0 / len(batch)
            for path in mean_grads:
                mean_grads[path] *= scale
            batch_loss *= scale
            if not math.isfinite(batch_loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {batch_index}")
            params, optimizer = adam_step(params, mean_grads, optimizer)

        train_losses.append(_mean_split_loss(spec, params, train_windows))
        val_losses.append(_mean_split_loss(spec, params, val_windows))
        if val_losses[-1] < best_val:
            best_val = val_losses[-1]
            best_epoch = epoch
            best_params = {path: values.copy() for path, values in params.items()}
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best > config.patience:
                reason = "early_stop"
                break

    history = TrainHistory(
        train_mse=train_losses,
        val_mse=val_losses,
        best_epoch=best_epoch,
        stopping_reason=reason,
    )
    return best_params, history, stats


# ---------------------------------------------------------------------------
# Prediction and evaluation
# ---------------------------------------------------------------------------


def predict_day(
    params: Params, spec: ModelSpec, stats: NormStats, window: FeatureWindow
) -> tuple[np.ndarray, np.ndarray]:
    """Predicted emissions (tonnes) and their hour-over-hour differences.

    The input window carries raw (unnormalized) channels. The difference at
    hour 0 uses the previous day's observed hour-23 emissions, so predicted
    ramps telescope onto the observed series.
    """
    normalized = apply_normalizer(window, stats)
    pred_norm, _ = model_forward(spec, params, normalized.channels)
    pred = pred_norm * stats.stds["target"] + stats.means["target"]
    delta = np.empty(24)
    delta[0] = pred[0] - window.channels["prev_emissions"][23]
    delta[1:] = pred[1:] - pred[:-1]
    return pred, delta


def compute_metrics(pred: np.ndarray, target: np.ndarray, epsilon: float = DEFAULT_EPSILON_G_MWH) -> Metrics:
    """Pooled MAE/RMSE/MAPE/nRMSE; MAPE skips hours with |target| < epsilon."""
    pred = np.asarray(pred, dtype=float).reshape(-1)
    target = np.asarray(target, dtype=float).reshape(-1)
    if pred.shape != target.shape or pred.size == 0:
        raise DataError("metrics need matching, non-empty prediction and target arrays")
    err = pred - target
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err**2)))
    valid = np.abs(target) >= epsilon
    mape = float(np.mean(np.abs(err[valid] / target[valid])) * 100.0) if valid.any() else math.nan
    mean_target = float(np.mean(target))
    nrmse = rmse / mean_target if mean_target != 0 else math.nan
    if rmse < mae - 1e-12:
        raise NumericError(f"metric inconsistency: RMSE {rmse} < MAE {mae}")
    return Metrics(mae=mae, rmse=rmse, mape_percent=mape, nrmse=nrmse, n_hours=int(pred.size))


def evaluate(
    params: Params, spec: ModelSpec, stats: NormStats, windows: Sequence[FeatureWindow]
) -> EvalResult:
    """Aggregate metrics over a split, plus RMSE per forecast hour."""
    if not windows:
        raise DataError("cannot evaluate an empty split")
    preds = []
    targets = []
    for window in windows:
        if window.target is None:
            raise DataError(f"window {window.forecast_date} has no target")
        pred, _ = predict_day(params, spec, stats, window)
        preds.append(pred)
        targets.append(window.target)
    pred_matrix = np.vstack(preds)
    target_matrix = np.vstack(targets)
    metrics = compute_metrics(pred_matrix, target_matrix)
    per_hour = np.sqrt(np.mean((pred_matrix - target_matrix) ** 2, axis=0))
    return EvalResult(metrics=metrics, per_hour_rmse=per_hour, n_windows=len(windows))


def evaluate_predictions(pred_matrix: np.ndarray, target_matrix: np.ndarray) -> EvalResult:
    """Metrics for precomputed prediction rows (used by the baselines)."""
    metrics = compute_metrics(pred_matrix, target_matrix)
    per_hour = np.sqrt(np.mean((np.atleast_2d(pred_matrix) - np.atleast_2d(target_matrix)) ** 2, axis=0))
    return EvalResult(metrics=metrics, per_hour_rmse=per_hour, n_windows=int(np.atleast_2d(pred_matrix).shape[0]))


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------


def baseline_persistence(series: ValidatedSeries, day: date) -> np.ndarray:
    """Previous day's observed emissions, verbatim."""
    days = complete_days(series)
    prev = day - timedelta(days=1)
    if prev not in days:
        raise DataError(f"persistence baseline for {day} needs a complete previous day")
    window = days[prev]
    values = np.array([series.observations[i].co2 for i in range(window.start, window.stop)])
    if np.isnan(values).any():
        raise DataError(f"persistence baseline for {day}: previous day has non-finite emissions")
    return values


def baseline_hourly_mean(train_windows: Sequence[FeatureWindow]) -> np.ndarray:
    """Per-hour-of-day mean of training-period emissions targets."""
    targets = [w.target for w in train_windows if w.target is not None]
    if not targets:
        raise DataError("hourly-mean baseline needs training windows with targets")
    return np.mean(np.vstack(targets), axis=0)


def baseline_metrics_for_windows(
    windows: Sequence[FeatureWindow], hourly_mean: np.ndarray | None = None
) -> dict[str, EvalResult]:
    """Persistence (and optionally climatology) metrics over a split."""
    targets = np.vstack([w.target for w in windows])
    persistence = np.vstack([w.channels["prev_emissions"] for w in windows])
    results = {"persistence": evaluate_predictions(persistence, targets)}
    if hourly_mean is not None:
        clim = np.tile(hourly_mean, (len(windows), 1))
        results["hourly_mean"] = evaluate_predictions(clim, targets)
    return results


# ---------------------------------------------------------------------------
# Sensitivity to the day-ahead demand forecast
# ---------------------------------------------------------------------------


def sensitivity(
    params: Params,
    spec: ModelSpec,
    stats: NormStats,
    window: FeatureWindow,
    delta: float = DEFAULT_SENSITIVITY_DELTA,
) -> np.ndarray:
    """Per-hour emissions response to a relative bump of the demand forecast.

    Hour h's entry is (total predicted-emissions change over the day) /
    (delta * forecast[h]), in t/MWh. Hours with a vanishing forecast value
    get NaN.
    """
    if delta <= 0:
        raise ConfigError("sensitivity delta must be positive")
    base_pred, _ = predict_day(params, spec, stats, window)
    forecast = window.channels["dayahead_demand_forecast"]
    out = np.empty(24)
    for h in range(24):
        value = float(forecast[h])
        if abs(value) < 1e-9:
            out[h] = math.nan
            continue
        bumped = window.copy()
        bumped.channels["dayahead_demand_forecast"][h] = value * (1.0 + delta)
        pred, _ = predict_day(params, spec, stats, bumped)
        out[h] = float(np.sum(pred - base_pred)) / (delta * value)
    return out


def build_forecast_report(
    params: Params,
    spec: ModelSpec,
    stats: NormStats,
    window: FeatureWindow,
    hourly_mean: np.ndarray | None = None,
    delta: float = DEFAULT_SENSITIVITY_DELTA,
) -> ForecastReport:
    """Prediction, derived ramps, sensitivity, and (when possible) metrics."""
    pred, pred_delta = predict_day(params, spec, stats, window)
    report = ForecastReport(
        forecast_date=window.forecast_date,
        predicted_emissions_t=pred,
        predicted_marginal_emissions_t=pred_delta,
        sensitivity_t_per_mwh=sensitivity(params, spec, stats, window, delta=delta),
        forecast_fallback=window.forecast_fallback,
    )
    if window.target is not None:
        report.metrics = compute_metrics(pred, window.target)
        baselines = baseline_metrics_for_windows([window], hourly_mean)
        report.baseline_metrics = {name: result.metrics for name, result in baselines.items()}
    return report


# ---------------------------------------------------------------------------
# Nowcasting
# ---------------------------------------------------------------------------


def params_checksum(params: Params) -> str:
    digest = hashlib.sha256()
    for path in sorted(params):
        digest.update(path.encode("utf-8"))
        digest.update(np.ascontiguousarray(params[path], dtype="<f8").tobytes())
    return digest.hexdigest()


@dataclass
class NowcastState:
    """Mutable prediction-side state: the growing series plus a frozen model."""

    series: ValidatedSeries
    spec: ModelSpec
    params: Params
    stats: NormStats
    trained_through: date | None = None
    staleness_days: int = DEFAULT_STALENESS_DAYS
    gap_policy_hours: int = 3
    holidays: tuple[date, ...] = ()


@dataclass
class NowcastResult:
    window: FeatureWindow
    report: ForecastReport
    retrain_recommended: bool
    params_checksum: str


def nowcast_append(
    state: NowcastState,
    new_observations: Iterable[HourlyObservation],
    next_day_forecast: Sequence[float] | None = None,
    sensitivity_delta: float = DEFAULT_SENSITIVITY_DELTA,
) -> NowcastResult:
    """Extend the series and rebuild the next prediction window; never retrains.

    New rows must follow the existing series; holes no longer than the gap
    policy are interpolated, anything longer is a contiguity error. The
    model parameters are untouched (the returned checksum proves it); a
    retrain is only flagged once the newest data is more than
    ``staleness_days`` past the training cutoff.
    """
    new_rows = sorted(new_observations, key=lambda obs: obs.timestamp)
    if not new_rows:
        raise DataError("nowcast append requires at least one new observation")
    old_end = state.series.end
    if new_rows[0].timestamp <= old_end:
        raise SeriesError(
            f"append must extend the series: first new hour {new_rows[0].timestamp} "
            f"is not after {old_end}"
        )

    combined = list(state.series.observations) + new_rows
    updated = validate_series(combined, gap_policy_hours=state.gap_policy_hours)
    appended_from = old_end + HOUR
    for entry in updated.gap_report:
        if entry.method == "missing" and entry.start >= appended_from:
            raise SeriesError(
                f"append is not contiguous: {entry.length} hour hole at {entry.start} "
                f"exceeds the {state.gap_policy_hours} hour gap policy"
            )
    state.series = updated

    derived = derive_all(updated)
    window = build_live_window(
        updated, derived, holidays=state.holidays, next_day_forecast=next_day_forecast
    )
    report = build_forecast_report(
        state.params, state.spec, state.stats, window, delta=sensitivity_delta
    )

    retrain = False
    if state.trained_through is not None:
        newest = max(complete_days(updated))
        retrain = (newest - state.trained_through).days > state.staleness_days

    return NowcastResult(
        window=window,
        report=report,
        retrain_recommended=retrain,
        params_checksum=params_checksum(state.params),
    )
