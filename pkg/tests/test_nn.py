"""Network primitives, gradients, optimizer, and the model file format."""

from __future__ import annotations

import math
from datetime import date

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import mefcast.nn as nn_module
from mefcast.errors import ConfigError, DataError, NumericError
from mefcast.features import SERIES_CHANNELS, NormStats, calendar_features
from mefcast.nn import (
    ConvLayerSpec,
    HeadSpec,
    ModelSpec,
    adam_step,
    conv1d_forward,
    conv_output_len,
    default_model_spec,
    dense_forward,
    finite_difference_check,
    flatten_concat,
    init_optimizer,
    init_params,
    load_model_bytes,
    loss_and_gradients,
    maxpool1d,
    model_backward,
    model_forward,
    mse_grad,
    mse_loss,
    relu,
    save_model_bytes,
)


def random_channels(seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    channels = {name: rng.normal(size=24) for name in SERIES_CHANNELS}
    channels["calendar"] = calendar_features(date(2023, 5, 17))
    return channels


def small_spec(**kwargs) -> ModelSpec:
    defaults = dict(
        heads=[
            HeadSpec("prev_demand", (ConvLayerSpec(3, 3, 1, pool=(2, 2)),)),
            HeadSpec("dayahead_demand_forecast", (ConvLayerSpec(2, 5, 2, pool=None),)),
        ],
        trunk=[16, 24],
        seed=1,
        use_calendar=False,
    )
    defaults.update(kwargs)
    return ModelSpec(**defaults)


class TestConv1d:
    def test_hand_example(self):
        out = conv1d_forward(np.array([[1.0, 2.0, 3.0, 4.0]]), np.array([[[1.0, 0.0, -1.0]]]), np.zeros(1), 1)
        assert np.array_equal(out, [[-2.0, -2.0]])

    def test_identity_kernel(self):
        x = np.random.default_rng(0).normal(size=(1, 24))
        out = conv1d_forward(x, np.ones((1, 1, 1)), np.zeros(1), 1)
        assert np.array_equal(out, x)

    def test_shape_formula(self):
        assert conv_output_len(24, 3, 2) == 11
        x = np.zeros((1, 24))
        out = conv1d_forward(x, np.zeros((5, 1, 3)), np.zeros(5), 2)
        assert out.shape == (5, 11)

    def test_bias_added_per_kernel(self):
        out = conv1d_forward(np.zeros((1, 4)), np.zeros((2, 1, 2)), np.array([1.5, -2.0]), 1)
        assert np.allclose(out[0], 1.5) and np.allclose(out[1], -2.0)

    def test_channel_mismatch_names_shapes(self):
        with pytest.raises(DataError, match="2 input channels"):
            conv1d_forward(np.zeros((1, 8)), np.zeros((1, 2, 3)), np.zeros(1), 1)


class TestMaxPool:
    def test_windowed_max(self):
        out, argmax = maxpool1d(np.array([[1.0, 3.0, 2.0, 5.0]]), 2, 2)
        assert np.array_equal(out, [[3.0, 5.0]])
        assert np.array_equal(argmax, [[1, 3]])

    def test_identity_pool(self):
        x = np.random.default_rng(1).normal(size=(2, 6))
        out, _ = maxpool1d(x, 1, 1)
        assert np.array_equal(out, x)

    def test_tie_takes_lowest_index(self):
        out, argmax = maxpool1d(np.full((1, 4), 7.0), 2, 2)
        assert np.array_equal(out, [[7.0, 7.0]])
        assert np.array_equal(argmax, [[0, 2]])


class TestDenseAndFriends:
    def test_identity_weights(self):
        x = np.arange(4.0)
        assert np.array_equal(dense_forward(x, np.eye(4), np.zeros(4)), x)

    def test_relu(self):
        assert np.array_equal(relu(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])

    def test_flatten_concat_counts(self):
        out = flatten_concat([np.ones((2, 3)), np.zeros(4)])
        assert out.shape == (10,)
        assert np.array_equal(out, [1] * 6 + [0] * 4)

    def test_flatten_concat_row_major(self):
        out = flatten_concat([np.array([[1.0, 2.0], [3.0, 4.0]])])
        assert np.array_equal(out, [1.0, 2.0, 3.0, 4.0])


class TestModelSpec:
    def test_example_parameter_count(self):
        spec = ModelSpec(
            heads=[HeadSpec("prev_demand", (ConvLayerSpec(8, 3, 1, pool=(2, 2)),))],
            trunk=[32, 24],
            use_calendar=False,
        )
        assert spec.n_params() == 3672

    def test_default_spec_covers_all_channels(self):
        spec = default_model_spec()
        spec.validate()
        assert sorted(h.channel for h in spec.heads) == sorted(SERIES_CHANNELS)
        assert spec.trunk[-1] == 24

    def test_duplicate_channel_rejected(self):
        spec = small_spec(
            heads=[
                HeadSpec("prev_demand", (ConvLayerSpec(2, 3, 1),)),
                HeadSpec("prev_demand", (ConvLayerSpec(2, 3, 1),)),
            ]
        )
        with pytest.raises(ConfigError, match="more than once"):
            spec.validate()

    def test_collapsed_length_rejected(self):
        spec = small_spec(heads=[HeadSpec("prev_demand", (ConvLayerSpec(2, 20, 1, pool=(6, 6)),))])
        with pytest.raises(ConfigError):
            spec.validate()

    def test_trunk_must_end_in_24(self):
        spec = small_spec(trunk=[16, 12])
        with pytest.raises(ConfigError, match="24"):
            spec.validate()

    def test_spec_dict_round_trip(self):
        spec = small_spec()
        again = ModelSpec.from_dict(spec.to_dict())
        assert again.to_dict() == spec.to_dict()


class TestInitParams:
    def test_same_seed_identical(self):
        a = init_params(default_model_spec(seed=9))
        b = init_params(default_model_spec(seed=9))
        assert a.keys() == b.keys()
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_different_seed_differs(self):
        a = init_params(default_model_spec(seed=1))
        b = init_params(default_model_spec(seed=2))
        assert any(not np.array_equal(a[k], b[k]) for k in a)

    def test_weights_within_documented_bounds(self):
        spec = default_model_spec(seed=4)
        params = init_params(spec)
        shapes = spec.param_shapes()
        final_w = f"trunk/dense{len(spec.trunk) - 1}/w"
        for path, values in params.items():
            if path.endswith("/b"):
                assert np.all(values == 0.0)
                continue
            if path == final_w:
                bound = math.sqrt(6.0 / (shapes[path][1] + shapes[path][0]))
            else:
                bound = math.sqrt(6.0 / np.prod(shapes[path][1:]))
            assert np.all(np.abs(values) <= bound)


class TestModelForward:
    def test_zero_params_output_is_final_bias(self):
        spec = small_spec()
        params = {path: np.zeros(shape) for path, shape in spec.param_shapes().items()}
        bias = np.arange(24.0)
        params["trunk/dense1/b"] = bias.copy()
        out, _ = model_forward(spec, params, random_channels())
        assert np.array_equal(out, bias)

    def test_final_layer_linearity(self):
        spec = small_spec()
        params = init_params(spec)
        channels = random_channels(3)
        base, _ = model_forward(spec, params, channels)
        bias = params["trunk/dense1/b"]
        doubled = {k: v.copy() for k, v in params.items()}
        doubled["trunk/dense1/w"][5, :] *= 2.0
        out, _ = model_forward(spec, doubled, channels)
        assert out[5] - bias[5] == pytest.approx(2.0 * (base[5] - bias[5]), rel=1e-12)
        mask = np.ones(24, dtype=bool)
        mask[5] = False
        assert np.array_equal(out[mask], base[mask])

    def test_deterministic_across_runs(self):
        spec = default_model_spec(seed=11)
        params = init_params(spec)
        channels = random_channels(7)
        out1, _ = model_forward(spec, params, channels)
        out2, _ = model_forward(spec, params, channels)
        assert np.array_equal(out1, out2)

    def test_missing_channel_rejected(self):
        spec = small_spec()
        params = init_params(spec)
        channels = random_channels()
        del channels["prev_demand"]
        with pytest.raises(DataError, match="prev_demand"):
            model_forward(spec, params, channels)

    def test_non_finite_input_raises_numeric_error(self):
        spec = small_spec()
        params = init_params(spec)
        channels = random_channels()
        channels["prev_demand"][3] = np.inf
        with pytest.raises(NumericError, match="head/prev_demand/conv0"):
            model_forward(spec, params, channels)


class TestLoss:
    def test_perfect_prediction(self):
        target = np.arange(24.0)
        assert mse_loss(target, target) == 0.0
        spec = small_spec()
        params = {path: np.zeros(shape) for path, shape in spec.param_shapes().items()}
        channels = random_channels()
        out, tape = model_forward(spec, params, channels)
        grads = model_backward(spec, params, tape, mse_grad(out, out))
        assert np.all(grads["trunk/dense1/b"] == 0.0)

    def test_constant_offset(self):
        pred = np.ones(24)
        target = np.zeros(24)
        assert mse_loss(pred, target) == pytest.approx(1.0)
        assert np.allclose(mse_grad(pred, target), 2.0 / 24.0)


class TestAdam:
    def test_zero_gradient_fixed_point(self):
        params = {"p": np.array([1.0, -2.0])}
        state = init_optimizer(params, 0.01)
        new_params, new_state = adam_step(params, {"p": np.zeros(2)}, state)
        assert np.array_equal(new_params["p"], params["p"])
        assert new_state.t == 1

    def test_first_step_magnitude_is_lr(self):
        params = {"p": np.array([0.0])}
        state = init_optimizer(params, 0.001)
        new_params, _ = adam_step(params, {"p": np.array([1.0])}, state)
        assert new_params["p"][0] == pytest.approx(-0.001, rel=1e-6)

    def test_sign_flip_symmetry_at_t1(self):
        params = {"p": np.array([0.5])}
        grads = {"p": np.array([0.37])}
        state = init_optimizer(params, 0.003)
        up, _ = adam_step(params, grads, state)
        down, _ = adam_step(params, {"p": -grads["p"]}, init_optimizer(params, 0.003))
        assert (up["p"] - params["p"]) == pytest.approx(-(down["p"] - params["p"]), rel=1e-15)


class TestGradients:
    def test_linear_model_gradients_exact(self):
        # Bias +10 keeps the single ReLU in its linear region, so central
        # differences agree with analytic gradients to round-off.
        spec = ModelSpec(
            heads=[HeadSpec("prev_demand", (ConvLayerSpec(1, 1, 1),))],
            trunk=[24],
            use_calendar=False,
        )
        params = {path: np.zeros(shape) for path, shape in spec.param_shapes().items()}
        params["head/prev_demand/conv0/w"][:] = 1.0
        params["head/prev_demand/conv0/b"][:] = 10.0
        params["trunk/dense0/w"][:] = np.eye(24) * 0.5
        rng = np.random.default_rng(0)
        channels = {"prev_demand": rng.normal(size=24)}
        target = rng.normal(size=24)
        report = finite_difference_check(spec, params, channels, target, max_coordinates=200, seed=1)
        assert report.max_rel_error < 1e-9

    def test_two_head_model_passes_tolerance(self):
        spec = small_spec()
        params = init_params(spec)
        report = finite_difference_check(
            spec, params, random_channels(5), np.random.default_rng(6).normal(size=24), seed=2
        )
        assert report.passed and report.max_rel_error < 1e-4

    @pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
    def test_default_model_many_seeds(self, seed):
        spec = default_model_spec(seed=seed)
        params = init_params(spec)
        rng = np.random.default_rng(100 + seed)
        channels = {name: rng.normal(size=24) for name in SERIES_CHANNELS}
        channels["calendar"] = calendar_features(date(2023, 2, 1 + seed))
        report = finite_difference_check(spec, params, channels, rng.normal(size=24), seed=seed)
        assert report.passed, f"seed {seed}: {report.max_rel_error}"

    def test_corrupted_gradient_detected(self, monkeypatch):
        spec = small_spec()
        params = init_params(spec)
        channels = random_channels(8)
        target = np.random.default_rng(9).normal(size=24)
        corrupted_path = "head/prev_demand/conv0/w"
        true_fn = loss_and_gradients

        def corrupt(*args, **kwargs):
            loss, grads = true_fn(*args, **kwargs)
            grads[corrupted_path] = grads[corrupted_path] * 2.0
            return loss, grads

        monkeypatch.setattr(nn_module, "loss_and_gradients", corrupt)
        report = finite_difference_check(spec, params, channels, target, max_coordinates=400, seed=3)
        assert not report.passed
        assert report.worst_path == corrupted_path

    def test_relu_region_output_linearity(self):
        spec = small_spec()
        params = init_params(spec)
        channels = random_channels(12)
        path, index = "trunk/dense0/w", 37
        eps = 1e-4

        def outputs_at(delta):
            probe = {k: v.copy() for k, v in params.items()}
            probe[path].flat[index] += delta
            out, _ = model_forward(spec, probe, channels)
            return out

        plus = outputs_at(eps)
        minus = outputs_at(-eps)
        slope = (plus - minus) / (2 * eps)

        _, tape = model_forward(spec, params, channels)
        jacobian_column = np.empty(24)
        for i in range(24):
            one_hot = np.zeros(24)
            one_hot[i] = 1.0
            grads = model_backward(spec, params, tape, one_hot)
            jacobian_column[i] = grads[path].flat[index]
        assert np.allclose(slope, jacobian_column, rtol=1e-9, atol=1e-9)


class TestShapeSoundness:
    @given(data=st.data())
    @settings(max_examples=40, deadline=None)
    def test_every_validated_spec_runs_forward(self, data):
        """Specs accepted by validation never shape-error on a conforming window."""
        n_heads = data.draw(st.integers(1, len(SERIES_CHANNELS)))
        channels = data.draw(
            st.permutations(list(SERIES_CHANNELS)).map(lambda order: order[:n_heads])
        )
        heads = []
        for channel in channels:
            layers = []
            length = 24
            for _ in range(data.draw(st.integers(1, 2))):
                width = data.draw(st.integers(1, min(6, length)))
                stride = data.draw(st.integers(1, 3))
                length = conv_output_len(length, width, stride)
                pool = None
                if length > 1 and data.draw(st.booleans()):
                    p_width = data.draw(st.integers(1, min(3, length)))
                    p_stride = data.draw(st.integers(1, 2))
                    pool = (p_width, p_stride)
                    length = conv_output_len(length, p_width, p_stride)
                layers.append(
                    ConvLayerSpec(kernels=data.draw(st.integers(1, 6)), width=width, stride=stride, pool=pool)
                )
                if length < 2:
                    break
            heads.append(HeadSpec(channel, tuple(layers)))
        trunk = data.draw(st.lists(st.integers(1, 32), min_size=0, max_size=2)) + [24]
        spec = ModelSpec(heads=heads, trunk=trunk, seed=data.draw(st.integers(0, 99)), use_calendar=data.draw(st.booleans()))
        spec.validate()
        params = init_params(spec)
        out, _ = model_forward(spec, params, random_channels(3))
        assert out.shape == (24,)


class TestPermutationConsistency:
    def test_permuted_kernels_identical_losses(self):
        spec = ModelSpec(
            heads=[HeadSpec("prev_demand", (ConvLayerSpec(4, 3, 1, pool=(2, 2)),))],
            trunk=[8, 24],
            seed=3,
            use_calendar=False,
        )
        base = init_params(spec)
        perm = [2, 0, 3, 1]
        seg_len = 11  # pooled length per kernel

        permuted = {k: v.copy() for k, v in base.items()}
        permuted["head/prev_demand/conv0/w"] = base["head/prev_demand/conv0/w"][perm]
        permuted["head/prev_demand/conv0/b"] = base["head/prev_demand/conv0/b"][perm]
        w0 = base["trunk/dense0/w"]
        cols = np.concatenate([np.arange(p * seg_len, (p + 1) * seg_len) for p in perm])
        permuted["trunk/dense0/w"] = w0[:, cols]

        rng = np.random.default_rng(4)
        windows = [(rng.normal(size=24), rng.normal(size=24)) for _ in range(6)]

        def run_schedule(start_params):
            params = {k: v.copy() for k, v in start_params.items()}
            state = init_optimizer(params, 0.01)
            losses = []
            for _ in range(15):
                for x, target in windows:
                    loss, grads = loss_and_gradients(spec, params, {"prev_demand": x}, target)
                    params, state = adam_step(params, grads, state)
                    losses.append(loss)
            return losses

        losses_a = run_schedule(base)
        losses_b = run_schedule(permuted)
        assert np.allclose(losses_a, losses_b, rtol=1e-9, atol=1e-12)


class TestModelFile:
    def test_save_load_bit_identical(self):
        spec = default_model_spec(seed=6)
        params = init_params(spec)
        stats = NormStats(
            means={name: float(i) for i, name in enumerate(SERIES_CHANNELS + ("target",))},
            stds={name: 1.0 + i for i, name in enumerate(SERIES_CHANNELS + ("target",))},
        )
        blob = save_model_bytes(spec, params, stats, date(2023, 3, 1))
        spec2, params2, stats2, trained = load_model_bytes(blob)
        assert trained == date(2023, 3, 1)
        assert stats2.to_dict() == stats.to_dict()
        assert all(np.array_equal(params[k], params2[k]) for k in params)
        channels = random_channels(2)
        out1, _ = model_forward(spec, params, channels)
        out2, _ = model_forward(spec2, params2, channels)
        assert np.array_equal(out1, out2)

    def test_serialization_stable_bytes(self):
        spec = small_spec()
        params = init_params(spec)
        assert save_model_bytes(spec, params) == save_model_bytes(spec, params)

    def test_bad_magic_rejected(self):
        with pytest.raises(DataError, match="magic"):
            load_model_bytes(b"NOTMAGIC" + b"\x00" * 32)

    def test_truncated_file_rejected(self):
        blob = save_model_bytes(small_spec(), init_params(small_spec()))
        with pytest.raises(DataError, match="truncated"):
            load_model_bytes(blob[:-16])

    def test_trailing_bytes_rejected(self):
        blob = save_model_bytes(small_spec(), init_params(small_spec()))
        with pytest.raises(DataError, match="trailing"):
            load_model_bytes(blob + b"\x00")
