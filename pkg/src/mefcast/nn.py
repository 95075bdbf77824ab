"""From-scratch multi-headed 1-D convolutional network.

Everything runs on float64 numpy arrays: valid (unpadded) cross-correlation
convolutions, ReLU, max pooling, dense layers, reverse-mode gradients
through an explicit forward tape, bias-corrected Adam, and a central
finite-difference gradient verifier. Each input channel group gets its own
convolutional head; head outputs (plus the flattened calendar block) are
concatenated and mapped through dense trunk layers to 24 outputs, one per
forecast hour.

Parameters live in a flat ``{path: ndarray}`` map with stable paths like
``head/prev_demand/conv0/w`` and ``trunk/dense1/b``; the serialized model
file is the ``MEFCAST1`` magic, a canonical-JSON header, and the raw
little-endian float64 parameter buffers in path-sorted order.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from datetime import date
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError, NumericError
from .features import CALENDAR_CHANNEL, CALENDAR_WIDTH, NormStats, SERIES_CHANNELS

MAGIC = b"MEFCAST1"
MODEL_FORMAT_VERSION = 1

WINDOW_HOURS = 24
OUTPUT_WIDTH = 24

Params = dict[str, np.ndarray]
Grads = dict[str, np.ndarray]


def conv_output_len(length: int, width: int, stride: int) -> int:
    """Valid-convolution shape rule: floor((L - W)/S) + 1."""
    return (length - width) // stride + 1


@dataclass(frozen=True)
class ConvLayerSpec:
    """One conv layer: K kernels of width W at stride S, ReLU, optional max-pool."""

    kernels: int
    width: int
    stride: int
    pool: tuple[int, int] | None = None  # (width, stride)

    def to_dict(self) -> dict:
        return {
            "kernels": self.kernels,
            "width": self.width,
            "stride": self.stride,
            "pool": list(self.pool) if self.pool else None,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ConvLayerSpec":
        pool = data.get("pool")
        return cls(
            kernels=int(data["kernels"]),
            width=int(data["width"]),
            stride=int(data["stride"]),
            pool=None if pool is None else (int(pool[0]), int(pool[1])),
        )


@dataclass(frozen=True)
class HeadSpec:
    """A conv stack bound to the one channel group it consumes."""

    channel: str
    layers: tuple[ConvLayerSpec, ...]

    def to_dict(self) -> dict:
        return {"channel": self.channel, "layers": [layer.to_dict() for layer in self.layers]}

    @classmethod
    def from_dict(cls, data: dict) -> "HeadSpec":
        return cls(
            channel=str(data["channel"]),
            layers=tuple(ConvLayerSpec.from_dict(item) for item in data["layers"]),
        )


@dataclass
class ModelSpec:
    """Architecture description; parameter shapes are a pure function of it."""

    heads: list[HeadSpec]
    trunk: list[int]
    seed: int = 0
    use_calendar: bool = True

    def validate(self) -> None:
        if not self.heads:
            raise ConfigError("model needs at least one head")
        consumed = [head.channel for head in self.heads]
        if len(set(consumed)) != len(consumed):
            raise ConfigError(f"channel groups consumed more than once: {sorted(consumed)}")
        unknown = set(consumed) - set(SERIES_CHANNELS)
        if unknown:
            raise ConfigError(f"unknown channel groups: {sorted(unknown)}")
        for head in self.heads:
            if not head.layers:
                raise ConfigError(f"head {head.channel!r} has no conv layers")
            length = WINDOW_HOURS
            for i, layer in enumerate(head.layers):
                if layer.kernels < 1 or layer.width < 1 or layer.stride < 1:
                    raise ConfigError(f"head {head.channel!r} conv{i}: K, W, S must be >= 1")
                if length < layer.width:
                    raise ConfigError(
                        f"head {head.channel!r} conv{i}: input length {length} < kernel width {layer.width}"
                    )
                length = conv_output_len(length, layer.width, layer.stride)
                if layer.pool is not None:
                    p_width, p_stride = layer.pool
                    if p_width < 1 or p_stride < 1:
                        raise ConfigError(f"head {head.channel!r} conv{i}: pool params must be >= 1")
                    if length < p_width:
                        raise ConfigError(
                            f"head {head.channel!r} conv{i}: length {length} < pool width {p_width}"
                        )
                    length = conv_output_len(length, p_width, p_stride)
                if length < 1:
                    raise ConfigError(f"head {head.channel!r} conv{i}: output length collapsed to 0")
        if not self.trunk:
            raise ConfigError("trunk must list at least the output layer size")
        if self.trunk[-1] != OUTPUT_WIDTH:
            raise ConfigError(f"trunk must end in {OUTPUT_WIDTH} outputs, got {self.trunk[-1]}")
        if any(size < 1 for size in self.trunk):
            raise ConfigError("trunk layer sizes must be >= 1")

    def head_output_len(self, head: HeadSpec) -> tuple[int, int]:
        """(kernels, length) after the head's full conv stack."""
        length = WINDOW_HOURS
        kernels = 1
        for layer in head.layers:
            length = conv_output_len(length, layer.width, layer.stride)
            kernels = layer.kernels
            if layer.pool is not None:
                length = conv_output_len(length, layer.pool[0], layer.pool[1])
        return kernels, length

    def trunk_input_len(self) -> int:
        total = 0
        for head in self.heads:
            kernels, length = self.head_output_len(head)
            total += kernels * length
        if self.use_calendar:
            total += WINDOW_HOURS * CALENDAR_WIDTH
        return total

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        """Parameter shapes keyed by stable path, in creation order."""
        shapes: dict[str, tuple[int, ...]] = {}
        for head in self.heads:
            channels_in = 1
            for i, layer in enumerate(head.layers):
                prefix = f"head/{head.channel}/conv{i}"
                shapes[f"{prefix}/w"] = (layer.kernels, channels_in, layer.width)
                shapes[f"{prefix}/b"] = (layer.kernels,)
                channels_in = layer.kernels
        fan_in = self.trunk_input_len()
        for i, size in enumerate(self.trunk):
            shapes[f"trunk/dense{i}/w"] = (size, fan_in)
            shapes[f"trunk/dense{i}/b"] = (size,)
            fan_in = size
        return shapes

    def n_params(self) -> int:
        return sum(int(np.prod(shape)) for shape in self.param_shapes().values())

    def to_dict(self) -> dict:
        return {
            "heads": [head.to_dict() for head in self.heads],
            "trunk": list(self.trunk),
            "seed": self.seed,
            "use_calendar": self.use_calendar,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        return cls(
            heads=[HeadSpec.from_dict(item) for item in data["heads"]],
            trunk=[int(v) for v in data["trunk"]],
            seed=int(data["seed"]),
            use_calendar=bool(data.get("use_calendar", True)),
        )


def default_model_spec(seed: int = 0) -> ModelSpec:
    """Smallest architecture exercising every tunable: per-channel heads of
    8 kernels (width 3, stride 1) with 2/2 max-pooling, calendar joining the
    trunk flat, one hidden trunk layer of 64, linear 24-wide output."""
    heads = [
        HeadSpec(channel=name, layers=(ConvLayerSpec(kernels=8, width=3, stride=1, pool=(2, 2)),))
        for name in SERIES_CHANNELS
    ]
    return ModelSpec(heads=heads, trunk=[64, 24], seed=seed, use_calendar=True)


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise DataError(message)


def check_finite(values: np.ndarray, path: str) -> np.ndarray:
    if not np.all(np.isfinite(values)):
        raise NumericError(f"non-finite values at {path}")
    return values


def conv1d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int) -> np.ndarray:
    """Valid cross-correlation: out[k, j] = b[k] + sum_cw x[c, j*S + w] * w[k, c, w]."""
    _require(x.ndim == 2, f"conv input must be 2-D (channels, length), got shape {x.shape}")
    kernels, channels_in, width = w.shape
    _require(
        x.shape[0] == channels_in,
        f"conv expects {channels_in} input channels, got {x.shape[0]}",
    )
    _require(x.shape[1] >= width, f"conv input length {x.shape[1]} < kernel width {width}")
    length_out = conv_output_len(x.shape[1], width, stride)
    out = np.empty((kernels, length_out))
    for j in range(length_out):
        segment = x[:, j * stride : j * stride + width]
        out[:, j] = b + np.tensordot(w, segment, axes=([1, 2], [0, 1]))
    return out


def conv1d_backward(
    x: np.ndarray, w: np.ndarray, stride: int, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of conv1d_forward w.r.t. input, kernels, and bias."""
    width = w.shape[2]
    dx = np.zeros_like(x)
    dw = np.zeros_like(w)
    db = grad_out.sum(axis=1)
    for j in range(grad_out.shape[1]):
        segment = x[:, j * stride : j * stride + width]
        g = grad_out[:, j]
        dw += g[:, None, None] * segment[None, :, :]
        dx[:, j * stride : j * stride + width] += np.tensordot(g, w, axes=(0, 0))
    return dx, dw, db


def maxpool1d(x: np.ndarray, width: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Windowed max with first-index tie breaking; returns (out, argmax)."""
    _require(x.ndim == 2, f"pool input must be 2-D, got shape {x.shape}")
    _require(x.shape[1] >= width, f"pool input length {x.shape[1]} < pool width {width}")
    kernels = x.shape[0]
    length_out = conv_output_len(x.shape[1], width, stride)
    out = np.empty((kernels, length_out))
    argmax = np.empty((kernels, length_out), dtype=np.int64)
    rows = np.arange(kernels)
    for j in range(length_out):
        window = x[:, j * stride : j * stride + width]
        idx = np.argmax(window, axis=1)  # first maximum wins ties
        argmax[:, j] = j * stride + idx
        out[:, j] = window[rows, idx]
    return out, argmax


def maxpool1d_backward(input_shape: tuple[int, int], argmax: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    dx = np.zeros(input_shape)
    rows = np.repeat(np.arange(input_shape[0]), argmax.shape[1]).reshape(argmax.shape)
    np.add.at(dx, (rows, argmax), grad_out)
    return dx


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    _require(
        x.shape == (w.shape[1],),
        f"dense expects input shape {(w.shape[1],)}, got {x.shape}",
    )
    return w @ x + b


def dense_backward(
    x: np.ndarray, w: np.ndarray, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    dw = grad_out[:, None] * x[None, :]
    db = grad_out.copy()
    dx = w.T @ grad_out
    return dx, dw, db


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(pre_activation: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * (pre_activation > 0.0)


def flatten_concat(parts: Sequence[np.ndarray]) -> np.ndarray:
    """Row-major flatten of each part, concatenated in the order given."""
    return np.concatenate([np.asarray(part).reshape(-1) for part in parts])


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def init_params(spec: ModelSpec) -> Params:
    """He-uniform hidden weights, Glorot-uniform final layer, zero biases.

    Draws come from one PCG64 generator seeded by ``spec.seed``, consumed in
    parameter-creation order, so identical specs yield identical parameters.
    """
    spec.validate()
    rng = np.random.default_rng(np.random.PCG64(spec.seed))
    shapes = spec.param_shapes()
    final_w = f"trunk/dense{len(spec.trunk) - 1}/w"
    params: Params = {}
    for path, shape in shapes.items():
        if path.endswith("/b"):
            params[path] = np.zeros(shape)
            continue
        if path == final_w:
            fan_in, fan_out = shape[1], shape[0]
            bound = math.sqrt(6.0 / (fan_in + fan_out))
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = math.sqrt(6.0 / fan_in)
        params[path] = rng.uniform(-bound, bound, size=shape)
    return params


# ---------------------------------------------------------------------------
# Forward / backward through the whole model
# ---------------------------------------------------------------------------


@dataclass
class ForwardTape:
    """Everything backward needs, recorded in forward order."""

    head_steps: dict[str, list[tuple]]
    head_segments: list[tuple[str, int]]  # (channel, flattened length) in concat order
    head_shapes: dict[str, tuple[int, int]]
    trunk_steps: list[tuple]
    output: np.ndarray


def _channel_as_input(channels: Mapping[str, np.ndarray], name: str) -> np.ndarray:
    try:
        values = channels[name]
    except KeyError:
        raise DataError(f"window is missing channel group {name!r}") from None
    arr = np.asarray(values, dtype=float)
    if arr.shape != (WINDOW_HOURS,):
        raise DataError(f"channel {name!r}: expected shape (24,), got {arr.shape}")
    return arr.reshape(1, WINDOW_HOURS)


def model_forward(
    spec: ModelSpec, params: Params, channels: Mapping[str, np.ndarray]
) -> tuple[np.ndarray, ForwardTape]:
    """Run the network on one window's channels; returns (24 outputs, tape)."""
    head_steps: dict[str, list[tuple]] = {}
    head_segments: list[tuple[str, int]] = []
    head_shapes: dict[str, tuple[int, int]] = {}
    flats: list[np.ndarray] = []

    for head in spec.heads:
        x = _channel_as_input(channels, head.channel)
        steps: list[tuple] = []
        for i, layer in enumerate(head.layers):
            prefix = f"head/{head.channel}/conv{i}"
            pre = conv1d_forward(x, params[f"{prefix}/w"], params[f"{prefix}/b"], layer.stride)
            check_finite(pre, prefix)
            steps.append(("conv", prefix, x, layer.stride))
            activated = relu(pre)
            steps.append(("relu", pre))
            x = activated
            if layer.pool is not None:
                pooled, argmax = maxpool1d(x, layer.pool[0], layer.pool[1])
                steps.append(("pool", x.shape, argmax))
                x = pooled
        head_steps[head.channel] = steps
        head_shapes[head.channel] = x.shape
        flat = x.reshape(-1)
        head_segments.append((head.channel, flat.size))
        flats.append(flat)

    if spec.use_calendar:
        if CALENDAR_CHANNEL not in channels:
            raise DataError("window is missing the calendar channel")
        calendar = np.asarray(channels[CALENDAR_CHANNEL], dtype=float)
        if calendar.shape != (WINDOW_HOURS, CALENDAR_WIDTH):
            raise DataError(
                f"calendar channel: expected shape {(WINDOW_HOURS, CALENDAR_WIDTH)}, got {calendar.shape}"
            )
        flats.append(calendar.reshape(-1))

    vector = flatten_concat(flats)
    trunk_steps: list[tuple] = []
    last = len(spec.trunk) - 1
    for i in range(len(spec.trunk)):
        prefix = f"trunk/dense{i}"
        pre = dense_forward(vector, params[f"{prefix}/w"], params[f"{prefix}/b"])
        check_finite(pre, prefix)
        trunk_steps.append(("dense", prefix, vector))
        if i < last:
            trunk_steps.append(("relu", pre))
            vector = relu(pre)
        else:
            vector = pre

    tape = ForwardTape(
        head_steps=head_steps,
        head_segments=head_segments,
        head_shapes=head_shapes,
        trunk_steps=trunk_steps,
        output=vector,
    )
    return vector, tape


def mse_loss(pred: np.ndarray, target: np.ndarray) -> float:
    _require(pred.shape == target.shape, f"loss shapes differ: {pred.shape} vs {target.shape}")
    return float(np.mean((pred - target) ** 2))


def mse_grad(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    return 2.0 * (pred - target) / pred.size


def model_backward(spec: ModelSpec, params: Params, tape: ForwardTape, grad_output: np.ndarray) -> Grads:
    """Reverse accumulation through the tape; returns gradients per parameter path."""
    grads: Grads = {path: np.zeros_like(values) for path, values in params.items()}

    grad = np.asarray(grad_output, dtype=float)
    for step in reversed(tape.trunk_steps):
        if step[0] == "relu":
            grad = relu_backward(step[1], grad)
        else:
            _, prefix, x = step
            grad, dw, db = dense_backward(x, params[f"{prefix}/w"], grad)
            grads[f"{prefix}/w"] += dw
            grads[f"{prefix}/b"] += db

    # Split the trunk-input gradient back into head segments (the calendar
    # block, when present, is an input and needs no gradient).
    offset = 0
    for channel, size in tape.head_segments:
        segment = grad[offset : offset + size]
        offset += size
        g = segment.reshape(tape.head_shapes[channel])
        for step in reversed(tape.head_steps[channel]):
            if step[0] == "pool":
                input_shape, argmax = step[1], step[2]
                g = maxpool1d_backward(input_shape, argmax, g)
            elif step[0] == "relu":
                g = relu_backward(step[1], g)
            else:
                _, prefix, x, stride = step
                g, dw, db = conv1d_backward(x, params[f"{prefix}/w"], stride, g)
                grads[f"{prefix}/w"] += dw
                grads[f"{prefix}/b"] += db
    return grads


def loss_and_gradients(
    spec: ModelSpec, params: Params, channels: Mapping[str, np.ndarray], target: np.ndarray
) -> tuple[float, Grads]:
    pred, tape = model_forward(spec, params, channels)
    loss = mse_loss(pred, target)
    if not math.isfinite(loss):
        raise NumericError("non-finite loss")
    grads = model_backward(spec, params, tape, mse_grad(pred, target))
    return loss, grads


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    """Bias-corrected Adam moments, one pair of tensors per parameter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def init_optimizer(params: Params, learning_rate: float) -> OptimizerState:
    return OptimizerState(
        m={path: np.zeros_like(values) for path, values in params.items()},
        v={path: np.zeros_like(values) for path, values in params.items()},
        t=0,
        learning_rate=learning_rate,
    )


def adam_step(params: Params, grads: Grads, state: OptimizerState) -> tuple[Params, OptimizerState]:
    """One Adam update: p -= lr * m_hat / (sqrt(v_hat) + eps)."""
    t = state.t + 1
    new_params: Params = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    bias1 = 1.0 - state.beta1**t
    bias2 = 1.0 - state.beta2**t
    for path in params:
        g = grads[path]
        m = state.beta1 * state.m[path] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[path] + (1.0 - state.beta2) * g * g
        m_hat = m / bias1
        v_hat = v / bias2
        new_params[path] = params[path] - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
        new_m[path] = m
        new_v[path] = v
    return new_params, OptimizerState(
        m=new_m,
        v=new_v,
        t=t,
        learning_rate=state.learning_rate,
        beta1=state.beta1,
        beta2=state.beta2,
        epsilon=state.epsilon,
    )


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------


@dataclass
class FdCheckReport:
    max_rel_error: float
    worst_path: str
    worst_index: int
    n_coordinates: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def finite_difference_check(
    spec: ModelSpec,
    params: Params,
    channels: Mapping[str, np.ndarray],
    target: np.ndarray,
    h: float = 1e-5,
    tol: float = 1e-4,
    max_coordinates: int = 200,
    seed: int = 0,
) -> FdCheckReport:
    """Central-difference check of the analytic loss gradient.

    Samples up to ``max_coordinates`` parameter coordinates (seeded, without
    replacement over the path-sorted global index) and compares
    ``(f(p+h) - f(p-h)) / 2h`` against the analytic gradient using
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    _, analytic = loss_and_gradients(spec, params, channels, target)

    paths = sorted(params)
    sizes = [params[path].size for path in paths]
    total = sum(sizes)
    rng = np.random.default_rng(np.random.PCG64(seed))
    count = min(max_coordinates, total)
    chosen = np.sort(rng.choice(total, size=count, replace=False))

    bounds = np.cumsum([0] + sizes)
    worst = (0.0, paths[0], 0)
    for global_index in chosen:
        slot = int(np.searchsorted(bounds, global_index, side="right")) - 1
        path = paths[slot]
        flat_index = int(global_index - bounds[slot])

        original = params[path].flat[flat_index]
        params[path].flat[flat_index] = original + h
        f_plus = mse_loss(model_forward(spec, params, channels)[0], target)
        params[path].flat[flat_index] = original - h
        f_minus = mse_loss(model_forward(spec, params, channels)[0], target)
        params[path].flat[flat_index] = original

        numeric = (f_plus - f_minus) / (2.0 * h)
        a = float(analytic[path].flat[flat_index])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        if rel > worst[0]:
            worst = (rel, path, flat_index)

    return FdCheckReport(
        max_rel_error=worst[0],
        worst_path=worst[1],
        worst_index=worst[2],
        n_coordinates=count,
        tol=tol,
    )


# ---------------------------------------------------------------------------
# Model file format
# ---------------------------------------------------------------------------


def save_model_bytes(
    spec: ModelSpec,
    params: Params,
    stats: NormStats | None = None,
    trained_through: date | None = None,
) -> bytes:
    """Serialize spec + params (+ normalization stats) to the versioned format."""
    header = {
        "format_version": MODEL_FORMAT_VERSION,
        "spec": spec.to_dict(),
        "norm_stats": None if stats is None else stats.to_dict(),
        "trained_through": None if trained_through is None else trained_through.isoformat(),
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [MAGIC, struct.pack("<I", len(header_bytes)), header_bytes]
    for path in sorted(params):
        chunks.append(np.ascontiguousarray(params[path], dtype="<f8").tobytes())
    return b"".join(chunks)


def load_model_bytes(data: bytes) -> tuple[ModelSpec, Params, NormStats | None, date | None]:
    """Inverse of ``save_model_bytes``; restores bit-identical parameters."""
    if len(data) < len(MAGIC) + 4 or data[: len(MAGIC)] != MAGIC:
        raise DataError("not a model file: bad magic")
    header_len = struct.unpack("<I", data[len(MAGIC) : len(MAGIC) + 4])[0]
    header_start = len(MAGIC) + 4
    try:
        header = json.loads(data[header_start : header_start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"model header is not valid JSON: {exc}") from exc
    if header.get("format_version") != MODEL_FORMAT_VERSION:
        raise DataError(f"unsupported model format version: {header.get('format_version')!r}")

    spec = ModelSpec.from_dict(header["spec"])
    spec.validate()
    shapes = spec.param_shapes()
    params: Params = {}
    offset = header_start + header_len
    for path in sorted(shapes):
        shape = shapes[path]
        nbytes = int(np.prod(shape)) * 8
        if offset + nbytes > len(data):
            raise DataError(f"model file truncated at parameter {path}")
        params[path] = np.frombuffer(data[offset : offset + nbytes], dtype="<f8").reshape(shape).copy()
        offset += nbytes
    if offset != len(data):
        raise DataError("model file has trailing bytes")

    stats = None if header["norm_stats"] is None else NormStats.from_dict(header["norm_stats"])
    trained = (
        None if header["trained_through"] is None else date.fromisoformat(header["trained_through"])
    )
    return spec, params, stats, trained
