"""Request and response models for the HTTP service.

Series travel as CSV text in the documented schema (lossless, bit-exact);
reports and metrics travel as JSON with ``null`` standing in for NaN.
Model artifacts travel base64-encoded in the versioned binary format.
"""

from __future__ import annotations

from datetime import date

from pydantic import BaseModel, Field

from ..config import RunConfig, SynthSection


# input models


class ValidateRequest(BaseModel):
    csv: str
    config: RunConfig = Field(default_factory=RunConfig)


class FetchRequest(BaseModel):
    start: date
    end: date  # exclusive
    region: str | None = None  # default: config.ingest.region
    base_url: str | None = None  # default: config.ingest.base_url
    api_key: str | None = None  # default: MEFCAST_API_KEY from the environment
    config: RunConfig = Field(default_factory=RunConfig)


class DeriveRequest(BaseModel):
    csv: str
    config: RunConfig = Field(default_factory=RunConfig)


class ProfileRequest(BaseModel):
    csv: str
    config: RunConfig = Field(default_factory=RunConfig)


class SynthRequest(BaseModel):
    config: RunConfig = Field(default_factory=RunConfig)
    synth: SynthSection | None = None  # overrides config.synth when given


class TrainRequest(BaseModel):
    csv: str
    config: RunConfig = Field(default_factory=RunConfig)


class PredictRequest(BaseModel):
    csv: str
    model_b64: str
    target_date: date | None = None  # default: day after the newest complete day
    next_day_forecast: list[float] | None = None
    config: RunConfig = Field(default_factory=RunConfig)


class EvaluateRequest(BaseModel):
    csv: str
    model_b64: str
    split: str = "test"
    config: RunConfig = Field(default_factory=RunConfig)


class SensitivityRequest(BaseModel):
    csv: str
    model_b64: str
    target_date: date | None = None
    config: RunConfig = Field(default_factory=RunConfig)


class NowcastRequest(BaseModel):
    csv: str
    new_csv: str
    model_b64: str
    next_day_forecast: list[float] | None = None
    config: RunConfig = Field(default_factory=RunConfig)


# output models


class HealthResponse(BaseModel):
    name: str
    version: str


class GapEntryModel(BaseModel):
    start: str
    length: int
    method: str


class ValidateResponse(BaseModel):
    csv: str
    region: str
    start: str
    hours: int
    gap_report: list[GapEntryModel]
    clamped_negative_generation: int


class DeriveResponse(BaseModel):
    csv: str
    aef_daily: dict[str, float]
    skipped_days: list[list[str]]


class ProfileResponse(BaseModel):
    csv: str
    hourly_mean: list[float | None]
    overall_mean: float
    period_start: str
    period_end: str


class SynthResponse(BaseModel):
    csv: str
    sidecar_csv: str


class MetricsModel(BaseModel):
    mae_t: float
    rmse_t: float
    mape_percent: float | None
    nrmse: float
    n_hours: int


class TrainResponse(BaseModel):
    model_b64: str
    history_csv: str
    best_epoch: int
    stopping_reason: str
    best_val_mse: float
    epochs_run: int
    n_train: int
    n_val: int
    n_test: int
    trained_through: str
    config_hash: str


class ForecastReportModel(BaseModel):
    forecast_date: str
    predicted_emissions_t: list[float | None]
    predicted_marginal_emissions_t: list[float | None]
    sensitivity_t_per_mwh: list[float | None] | None
    metrics: MetricsModel | None
    baseline_metrics: dict[str, MetricsModel]
    forecast_fallback: bool


class PredictResponse(BaseModel):
    report: ForecastReportModel
    report_csv: str
    config_hash: str


class EvaluateResponse(BaseModel):
    split: str
    n_windows: int
    metrics: MetricsModel
    per_hour_rmse: list[float]
    baseline_metrics: dict[str, MetricsModel]
    config_hash: str


class SensitivityResponse(BaseModel):
    forecast_date: str
    sensitivity_t_per_mwh: list[float | None]
    config_hash: str


class NowcastResponse(BaseModel):
    csv: str
    report: ForecastReportModel
    retrain_recommended: bool
    params_checksum: str


class ErrorBody(BaseModel):
    detail: str
    kind: str
