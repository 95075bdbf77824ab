"""FastAPI service wrapping the forecasting pipeline.

Every endpoint is a pure function of its request body: series go in and
come out as CSV text, model artifacts as base64 blobs. Run it with

    uvicorn mefcast.service.app:app

The CLI drives this same app in-process, so one code path serves both.
"""

from __future__ import annotations

import math
from datetime import datetime, timezone

from fastapi import FastAPI
from fastapi.requests import Request
from fastapi.responses import JSONResponse

from .. import __version__
from ..errors import DataError, MefcastError
from ..ingest import FetchConfig, fetch_remote, format_timestamp, parse_csv, serialize_csv, validate_series
from ..pipeline import (
    dataset_for,
    decode_model,
    encode_model,
    series_from_csv,
    train_on_series,
    window_for_date,
)
from ..series import derive_all, derived_to_csv, intensity_profile, profile_to_csv
from ..synth import generate_scenario, sidecar_to_csv
from ..train_eval import (
    NowcastState,
    baseline_hourly_mean,
    baseline_metrics_for_windows,
    build_forecast_report,
    evaluate,
    nowcast_append,
    sensitivity,
)
from . import schemas

_STATUS_BY_KIND = {"usage": 400, "data": 422, "numeric": 500}


def create_app() -> FastAPI:
    app = FastAPI(title="mefcast", version=__version__)

    @app.exception_handler(MefcastError)
    async def mefcast_error_handler(request: Request, exc: MefcastError) -> JSONResponse:
        status = _STATUS_BY_KIND.get(exc.kind, 500)
        return JSONResponse(status_code=status, content={"detail": str(exc), "kind": exc.kind})

    @app.get("/health", response_model=schemas.HealthResponse)
    def health() -> schemas.HealthResponse:
        return schemas.HealthResponse(name="mefcast", version=__version__)

    def _validated_response(series) -> schemas.ValidateResponse:
        return schemas.ValidateResponse(
            csv=serialize_csv(series),
            region=series.region,
            start=format_timestamp(series.start),
            hours=len(series),
            gap_report=[
                schemas.GapEntryModel(
                    start=format_timestamp(entry.start), length=entry.length, method=entry.method
                )
                for entry in series.gap_report
            ],
            clamped_negative_generation=series.clamped_negative_generation,
        )

    @app.post("/ingest/validate", response_model=schemas.ValidateResponse)
    def ingest_validate(request: schemas.ValidateRequest) -> schemas.ValidateResponse:
        series = series_from_csv(request.csv, request.config.ingest.gap_policy_hours)
        return _validated_response(series)

    @app.post("/ingest/fetch", response_model=schemas.ValidateResponse)
    def ingest_fetch(request: schemas.FetchRequest) -> schemas.ValidateResponse:
        ingest_cfg = request.config.ingest
        fetch_config = FetchConfig(
            base_url=request.base_url or ingest_cfg.base_url,
            region=request.region or ingest_cfg.region,
            start=datetime(request.start.year, request.start.month, request.start.day, tzinfo=timezone.utc),
            end=datetime(request.end.year, request.end.month, request.end.day, tzinfo=timezone.utc),
            api_key=request.api_key or ingest_cfg.api_key,
        )
        rows = fetch_remote(fetch_config)
        if not rows:
            raise DataError("fetch returned no observations for the requested range")
        series = validate_series(rows, gap_policy_hours=ingest_cfg.gap_policy_hours)
        return _validated_response(series)

    @app.post("/series/derive", response_model=schemas.DeriveResponse)
    def series_derive(request: schemas.DeriveRequest) -> schemas.DeriveResponse:
        series = series_from_csv(request.csv, request.config.ingest.gap_policy_hours)
        derived = derive_all(series, epsilon_g=request.config.series.epsilon_g_mwh)
        return schemas.DeriveResponse(
            csv=derived_to_csv(derived),
            aef_daily={day.isoformat(): value for day, value in derived.aef_daily.items()},
            skipped_days=[[day.isoformat(), reason] for day, reason in derived.skipped_days],
        )

    @app.post("/series/profile", response_model=schemas.ProfileResponse)
    def series_profile(request: schemas.ProfileRequest) -> schemas.ProfileResponse:
        series = series_from_csv(request.csv, request.config.ingest.gap_policy_hours)
        profile = intensity_profile(
            series,
            local_offset_hours=request.config.ingest.local_utc_offset_hours,
            epsilon_g=request.config.series.epsilon_g_mwh,
        )
        return schemas.ProfileResponse(
            csv=profile_to_csv(profile),
            hourly_mean=[None if math.isnan(v) else float(v) for v in profile.hourly_mean],
            overall_mean=profile.overall_mean,
            period_start=profile.period[0].isoformat(),
            period_end=profile.period[1].isoformat(),
        )

    @app.post("/synth/generate", response_model=schemas.SynthResponse)
    def synth_generate(request: schemas.SynthRequest) -> schemas.SynthResponse:
        section = request.synth if request.synth is not None else request.config.synth
        series, sidecar = generate_scenario(section.to_scenario_config())
        return schemas.SynthResponse(csv=serialize_csv(series), sidecar_csv=sidecar_to_csv(sidecar))

    @app.post("/model/train", response_model=schemas.TrainResponse)
    def model_train(request: schemas.TrainRequest) -> schemas.TrainResponse:
        config = request.config
        series = series_from_csv(request.csv, config.ingest.gap_policy_hours)
        spec, params, stats, history, dataset, trained_through = train_on_series(series, config)
        return schemas.TrainResponse(
            model_b64=encode_model(spec, params, stats, trained_through),
            history_csv=history.to_csv(),
            best_epoch=history.best_epoch,
            stopping_reason=history.stopping_reason,
            best_val_mse=min(history.val_mse),
            epochs_run=len(history.val_mse),
            n_train=dataset.n_train,
            n_val=dataset.n_val,
            n_test=dataset.n_test,
            trained_through=trained_through.isoformat(),
            config_hash=config.config_hash(),
        )

    def _hourly_mean_or_none(series, config):
        try:
            dataset, _ = dataset_for(series, config)
            return baseline_hourly_mean(dataset.train)
        except DataError:
            return None

    @app.post("/model/predict", response_model=schemas.PredictResponse)
    def model_predict(request: schemas.PredictRequest) -> schemas.PredictResponse:
        config = request.config
        spec, params, stats, _ = decode_model(request.model_b64)
        if stats is None:
            raise DataError("model file carries no normalization statistics")
        series = series_from_csv(request.csv, config.ingest.gap_policy_hours)
        window = window_for_date(
            series, config, target_date=request.target_date, next_day_forecast=request.next_day_forecast
        )
        hourly_mean = _hourly_mean_or_none(series, config) if window.target is not None else None
        report = build_forecast_report(
            params, spec, stats, window, hourly_mean=hourly_mean, delta=config.sensitivity.delta
        )
        return schemas.PredictResponse(
            report=schemas.ForecastReportModel(**report.to_json_dict()),
            report_csv=report.to_csv(),
            config_hash=config.config_hash(),
        )

    @app.post("/model/evaluate", response_model=schemas.EvaluateResponse)
    def model_evaluate(request: schemas.EvaluateRequest) -> schemas.EvaluateResponse:
        config = request.config
        spec, params, stats, _ = decode_model(request.model_b64)
        if stats is None:
            raise DataError("model file carries no normalization statistics")
        series = series_from_csv(request.csv, config.ingest.gap_policy_hours)
        dataset, _ = dataset_for(series, config)
        windows = dataset.split(request.split)
        result = evaluate(params, spec, stats, windows)
        baselines = baseline_metrics_for_windows(windows, baseline_hourly_mean(dataset.train))
        return schemas.EvaluateResponse(
            split=request.split,
            n_windows=result.n_windows,
            metrics=schemas.MetricsModel(**result.metrics.to_dict()),
            per_hour_rmse=[float(v) for v in result.per_hour_rmse],
            baseline_metrics={
                name: schemas.MetricsModel(**value.metrics.to_dict()) for name, value in baselines.items()
            },
            config_hash=config.config_hash(),
        )

    @app.post("/model/sensitivity", response_model=schemas.SensitivityResponse)
    def model_sensitivity(request: schemas.SensitivityRequest) -> schemas.SensitivityResponse:
        config = request.config
        spec, params, stats, _ = decode_model(request.model_b64)
        if stats is None:
            raise DataError("model file carries no normalization statistics")
        series = series_from_csv(request.csv, config.ingest.gap_policy_hours)
        window = window_for_date(series, config, target_date=request.target_date)
        values = sensitivity(params, spec, stats, window, delta=config.sensitivity.delta)
        return schemas.SensitivityResponse(
            forecast_date=window.forecast_date.isoformat(),
            sensitivity_t_per_mwh=[None if math.isnan(v) else float(v) for v in values],
            config_hash=config.config_hash(),
        )

    @app.post("/nowcast/append", response_model=schemas.NowcastResponse)
    def nowcast(request: schemas.NowcastRequest) -> schemas.NowcastResponse:
        config = request.config
        spec, params, stats, trained_through = decode_model(request.model_b64)
        if stats is None:
            raise DataError("model file carries no normalization statistics")
        series = series_from_csv(request.csv, config.ingest.gap_policy_hours)
        new_rows = parse_csv(request.new_csv)
        state = NowcastState(
            series=series,
            spec=spec,
            params=params,
            stats=stats,
            trained_through=trained_through,
            staleness_days=config.train.staleness_days,
            gap_policy_hours=config.ingest.gap_policy_hours,
            holidays=tuple(config.features.holidays),
        )
        result = nowcast_append(
            state,
            new_rows,
            next_day_forecast=request.next_day_forecast,
            sensitivity_delta=config.sensitivity.delta,
        )
        return schemas.NowcastResponse(
            csv=serialize_csv(state.series),
            report=schemas.ForecastReportModel(**result.report.to_json_dict()),
            retrain_recommended=result.retrain_recommended,
            params_checksum=result.params_checksum,
        )

    return app


app = create_app()
