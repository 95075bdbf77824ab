"""Merit-order dispatch and scenario generation."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mefcast.errors import ConfigError, InfeasibleError
from mefcast.ingest import FuelKind
from mefcast.series import derive_all, fossil_generation
from mefcast.synth import (
    GeneratorUnit,
    ScenarioConfig,
    default_fleet,
    generate_scenario,
    merit_order_dispatch,
    parse_sidecar_csv,
    sidecar_to_csv,
)


class TestMeritOrderDispatch:
    def test_partial_load_example(self):
        result = merit_order_dispatch(default_fleet(), 150.0)
        assert result.outputs == {"A": 100.0, "B": 50.0, "C": 0.0}
        assert result.emissions_t == pytest.approx(20.0)
        assert result.marginal_unit == "B"

    def test_zero_demand(self):
        result = merit_order_dispatch(default_fleet(), 0.0)
        assert all(v == 0.0 for v in result.outputs.values())
        assert result.emissions_t == 0.0
        assert result.marginal_unit == "A"

    def test_full_fleet(self):
        result = merit_order_dispatch(default_fleet(), 300.0)
        assert result.emissions_t == pytest.approx(130.0)
        assert result.marginal_unit == "C"

    def test_boundary_lands_on_last_loaded_unit(self):
        result = merit_order_dispatch(default_fleet(), 200.0)
        assert result.outputs == {"A": 100.0, "B": 100.0, "C": 0.0}
        assert result.marginal_unit == "B"

    def test_infeasible_demand(self):
        with pytest.raises(InfeasibleError, match="capacity"):
            merit_order_dispatch(default_fleet(), 301.0)

    def test_negative_demand(self):
        with pytest.raises(InfeasibleError):
            merit_order_dispatch(default_fleet(), -1.0)

    def test_cost_tie_broken_by_name(self):
        fleet = [
            GeneratorUnit("zeta", 10.0, 0.1, 5.0),
            GeneratorUnit("alpha", 10.0, 0.2, 5.0),
        ]
        result = merit_order_dispatch(fleet, 10.0)
        assert result.outputs["alpha"] == 10.0 and result.outputs["zeta"] == 0.0

    @given(demand=st.floats(0, 300), data=st.data())
    @settings(max_examples=80, deadline=None)
    def test_optimality_and_energy_balance(self, demand, data):
        n_units = data.draw(st.integers(1, 5))
        fleet = [
            GeneratorUnit(
                name=f"u{i}",
                capacity_mw=data.draw(st.floats(60, 100)),
                emission_rate_t_per_mwh=data.draw(st.floats(0, 1.0)),
                marginal_cost=data.draw(st.floats(0, 50)),
            )
            for i in range(n_units)
        ]
        total = sum(u.capacity_mw for u in fleet)
        if demand > total:
            with pytest.raises(InfeasibleError):
                merit_order_dispatch(fleet, demand)
            return
        result = merit_order_dispatch(fleet, demand)
        assert sum(result.outputs.values()) == pytest.approx(demand, abs=1e-9)
        ordered = sorted(fleet, key=lambda u: (u.marginal_cost, u.name))
        # no cheaper unit below capacity while a costlier one produces
        for i, cheap in enumerate(ordered):
            for costly in ordered[i + 1 :]:
                if result.outputs[costly.name] > 1e-12:
                    assert result.outputs[cheap.name] == pytest.approx(cheap.capacity_mw)

    def test_emissions_monotone_in_demand(self):
        fleet = default_fleet()
        demands = np.linspace(0, 300, 61)
        emissions = [merit_order_dispatch(fleet, d).emissions_t for d in demands]
        assert all(b >= a - 1e-12 for a, b in zip(emissions, emissions[1:]))


class TestGeneratorUnit:
    def test_fuel_inference(self):
        assert GeneratorUnit("x", 10, 0.0, 0).fuel == FuelKind.nuclear
        assert GeneratorUnit("y", 10, 0.5, 0).fuel == FuelKind.natural_gas

    def test_invalid_capacity(self):
        with pytest.raises(ConfigError):
            GeneratorUnit("bad", 0.0, 0.1, 1.0)


class TestGenerateScenario:
    def test_deterministic_under_seed(self):
        config = ScenarioConfig(days=3, noise_sigma_mwh=4.0, forecast_noise_sigma_mwh=2.0, seed=5)
        series_a, sidecar_a = generate_scenario(config)
        series_b, sidecar_b = generate_scenario(config)
        assert [o.demand for o in series_a.observations] == [o.demand for o in series_b.observations]
        assert [o.co2 for o in series_a.observations] == [o.co2 for o in series_b.observations]
        assert sidecar_a == sidecar_b

    def test_different_seeds_differ(self):
        a, _ = generate_scenario(ScenarioConfig(days=2, noise_sigma_mwh=4.0, seed=1))
        b, _ = generate_scenario(ScenarioConfig(days=2, noise_sigma_mwh=4.0, seed=2))
        assert any(x.demand != y.demand for x, y in zip(a.observations, b.observations))

    def test_forecast_noise_independent_of_demand_noise(self):
        config = ScenarioConfig(days=4, noise_sigma_mwh=0.0, forecast_noise_sigma_mwh=3.0, seed=7)
        series, _ = generate_scenario(config)
        residuals = [o.demand_forecast - o.demand for o in series.observations]
        assert np.std(residuals) > 0.5

    def test_noise_free_mef_identity(self, clean_scenario):
        series, sidecar = clean_scenario
        derived = derive_all(series, epsilon_g=1e-6)
        for i in range(1, len(series)):
            if not math.isnan(sidecar[i].true_mef):
                assert derived.mef[i] == pytest.approx(sidecar[i].true_mef, abs=1e-9)

    def test_boundary_hours_convex_combination(self, clean_scenario):
        series, sidecar = clean_scenario
        derived = derive_all(series, epsilon_g=1e-6)
        rates = {"A": 0.0, "B": 0.4, "C": 0.9}
        boundary_checked = 0
        for i in range(1, len(series)):
            if math.isnan(sidecar[i].true_mef) and i > 0:
                prev_unit = sidecar[i - 1].marginal_unit
                cur_unit = sidecar[i].marginal_unit
                if prev_unit == cur_unit or math.isnan(derived.mef[i]):
                    continue
                lo = min(rates[prev_unit], rates[cur_unit])
                hi = max(rates[prev_unit], rates[cur_unit])
                assert lo - 1e-9 <= derived.mef[i] <= hi + 1e-9
                boundary_checked += 1
        assert boundary_checked > 0

    def test_energy_balance_with_solar(self, clean_scenario):
        series, _ = clean_scenario
        for obs in series.observations:
            assert obs.total_generation() == pytest.approx(obs.demand, abs=1e-9)

    def test_fossil_generation_is_emitting_fleet(self, clean_scenario):
        series, _ = clean_scenario
        for obs in series.observations:
            solar = obs.generation.get(FuelKind.solar, 0.0)
            nuclear = obs.generation.get(FuelKind.nuclear, 0.0)
            assert fossil_generation(obs) == pytest.approx(obs.demand - solar - nuclear, abs=1e-9)

    def test_infeasible_config_rejected(self):
        with pytest.raises(ConfigError, match="capacity"):
            ScenarioConfig(days=1, base_demand_mwh=280.0, diurnal_amplitude_mwh=40.0)

    def test_sidecar_csv_round_trip(self, clean_scenario):
        _, sidecar = clean_scenario
        text = sidecar_to_csv(sidecar)
        assert text.splitlines()[0] == "timestamp,marginal_unit,true_mef"
        back = parse_sidecar_csv(text)
        assert len(back) == len(sidecar)
        for a, b in zip(sidecar, back):
            assert a.timestamp == b.timestamp and a.marginal_unit == b.marginal_unit
            assert (math.isnan(a.true_mef) and math.isnan(b.true_mef)) or a.true_mef == b.true_mef
