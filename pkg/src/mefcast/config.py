"""Run configuration: one strict JSON document drives every subcommand.

Unknown keys are rejected, every package default is overridable here, and
the canonical serialization (sorted keys, compact separators) is hashed
into each output's run manifest so artifacts remain traceable to the exact
configuration that produced them.
"""

from __future__ import annotations

import hashlib
import json
from datetime import date
from pathlib import Path

from pydantic import BaseModel, ConfigDict, ValidationError

from .errors import ConfigError
from .ingest import FuelKind
from .nn import ConvLayerSpec, HeadSpec, ModelSpec, default_model_spec
from .synth import GeneratorUnit, ScenarioConfig, default_fleet
from .train_eval import TrainConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class IngestSection(_Strict):
    gap_policy_hours: int = 3
    local_utc_offset_hours: float = -8.0
    region: str = "CISO"
    base_url: str = "https://api.eia.gov/v2/electricity/rto/fuel-type-data/data/"
    api_key: str = ""  # falls back to the MEFCAST_API_KEY environment variable


class SeriesSection(_Strict):
    epsilon_g_mwh: float = 1.0


class FeaturesSection(_Strict):
    split: tuple[float, float, float] = (0.7, 0.15, 0.15)
    holidays: list[date] = []
    sigma_floor: float = 1e-6


class ConvLayerModel(_Strict):
    kernels: int = 8
    width: int = 3
    stride: int = 1
    pool: tuple[int, int] | None = (2, 2)


class HeadModel(_Strict):
    channel: str
    layers: list[ConvLayerModel]


class ModelSection(_Strict):
    heads: list[HeadModel] | None = None  # None selects the default per-channel heads
    trunk: list[int] = [64, 24]
    seed: int = 0
    use_calendar: bool = True

    def to_spec(self) -> ModelSpec:
        if self.heads is None:
            spec = default_model_spec(seed=self.seed)
            spec.trunk = list(self.trunk)
            spec.use_calendar = self.use_calendar
        else:
            spec = ModelSpec(
                heads=[
                    HeadSpec(
                        channel=head.channel,
                        layers=tuple(
                            ConvLayerSpec(
                                kernels=layer.kernels,
                                width=layer.width,
                                stride=layer.stride,
                                pool=layer.pool,
                            )
                            for layer in head.layers
                        ),
                    )
                    for head in self.heads
                ],
                trunk=list(self.trunk),
                seed=self.seed,
                use_calendar=self.use_calendar,
            )
        spec.validate()
        return spec


class TrainSection(_Strict):
    epochs: int = 200
    batch_size: int = 16
    learning_rate: float = 1e-3
    patience: int = 50
    seed: int = 0
    staleness_days: int = 7

    def to_train_config(self) -> TrainConfig:
        config = TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            patience=self.patience,
            seed=self.seed,
        )
        config.validate()
        return config


class SensitivitySection(_Strict):
    delta: float = 0.01


class UnitModel(_Strict):
    name: str
    capacity_mw: float
    emission_rate_t_per_mwh: float
    marginal_cost: float
    fuel: str | None = None

    def to_unit(self) -> GeneratorUnit:
        return GeneratorUnit(
            name=self.name,
            capacity_mw=self.capacity_mw,
            emission_rate_t_per_mwh=self.emission_rate_t_per_mwh,
            marginal_cost=self.marginal_cost,
            fuel=None if self.fuel is None else FuelKind(self.fuel),
        )


class SynthSection(_Strict):
    fleet: list[UnitModel] | None = None  # None selects the built-in three-unit fleet
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

    def to_scenario_config(self) -> ScenarioConfig:
        return ScenarioConfig(
            fleet=default_fleet() if self.fleet is None else [u.to_unit() for u in self.fleet],
            days=self.days,
            base_demand_mwh=self.base_demand_mwh,
            diurnal_amplitude_mwh=self.diurnal_amplitude_mwh,
            solar_depth_mwh=self.solar_depth_mwh,
            noise_sigma_mwh=self.noise_sigma_mwh,
            forecast_noise_sigma_mwh=self.forecast_noise_sigma_mwh,
            phase_hour=self.phase_hour,
            seed=self.seed,
            region=self.region,
            start_day=self.start_day,
        )


class RunConfig(_Strict):
    ingest: IngestSection = IngestSection()
    series: SeriesSection = SeriesSection()
    features: FeaturesSection = FeaturesSection()
    model: ModelSection = ModelSection()
    train: TrainSection = TrainSection()
    sensitivity: SensitivitySection = SensitivitySection()
    synth: SynthSection = SynthSection()

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        try:
            return cls.model_validate(data)
        except ValidationError as exc:
            raise ConfigError(f"invalid config: {exc}") from exc

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        return cls.from_json(text)

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    def with_seed(self, seed: int) -> "RunConfig":
        """Copy with the one seed applied to model, training, and synthesis."""
        updated = self.model_copy(deep=True)
        updated.model.seed = seed
        updated.train.seed = seed
        updated.synth.seed = seed
        return updated
