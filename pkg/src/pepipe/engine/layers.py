"""Layer catalog and a sequential network built from it."""

from dataclasses import asdict, dataclass

import numpy as np

from ..errors import ConfigError, LoadError
from . import ops
from .tensor import Tensor

KINDS = ("conv2d", "dense", "relu", "maxpool2", "global_avg_pool", "dropout", "softmax")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    units: int = 0  # conv filters or dense neurons
    kernel_size: int = 3
    stride: int = 1
    padding: int = -1  # -1 means "same" padding, kernel_size // 2
    ratio: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv2d", "dense") and self.units < 1:
            raise ConfigError(f"{self.kind} needs units >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel size must be odd and >= 1, got {self.kernel_size}")
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        if not 0.0 <= self.ratio < 1.0:
            raise ConfigError(f"dropout ratio must be in [0, 1), got {self.ratio}")

    @property
    def pad(self):
        return self.kernel_size // 2 if self.padding < 0 else self.padding

    def to_dict(self):
        return asdict(self)


def conv(units, kernel_size=3, stride=1, padding=-1):
    return LayerSpec("conv2d", units=units, kernel_size=kernel_size, stride=stride, padding=padding)


def fc(units):
    return LayerSpec("dense", units=units)


RELU = LayerSpec("relu")
MAXPOOL2 = LayerSpec("maxpool2")
GAP = LayerSpec("global_avg_pool")
SOFTMAX = LayerSpec("softmax")


def dropout(ratio):
    return LayerSpec("dropout", ratio=ratio)


def he_uniform(rng, shape, fan_in, dtype):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Network:
    """Sequential stack of :class:`LayerSpec` layers with owned parameters.

    ``input_shape`` excludes the batch axis: ``(H, W, C)`` for image inputs,
    ``(N,)`` for vector inputs.
    """

    def __init__(self, specs, input_shape, rng=None, dtype=np.float32, prefix=""):
        self.specs = list(specs)
        self.input_shape = tuple(input_shape)
        self.dtype = np.dtype(dtype)
        self.prefix = prefix
        self.params = {}
        rng = rng if rng is not None else np.random.default_rng(0)
        shape = self.input_shape
        self.shapes = [shape]
        for i, spec in enumerate(self.specs):
            shape = self._build_layer(i, spec, shape, rng)
            self.shapes.append(shape)
        self.output_shape = shape

    def _name(self, i, what):
        return f"{self.prefix}layer{i}.{what}"

    def _build_layer(self, i, spec, shape, rng):
        kind = spec.kind
        if kind == "conv2d":
            if len(shape) != 3:
                raise ConfigError(f"layer {i}: conv2d needs (H, W, C) input, got {shape}")
            h, w, c = shape
            k, p, s = spec.kernel_size, spec.pad, spec.stride
            if h + 2 * p < k or w + 2 * p < k:
                raise ConfigError(f"layer {i}: input {h}x{w} too small for kernel {k}")
            self._add(i, "weight", he_uniform(rng, (k, k, c, spec.units), k * k * c, self.dtype))
            self._add(i, "bias", np.zeros(spec.units, self.dtype))
            return ((h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1, spec.units)
        if kind == "dense":
            if len(shape) != 1:
                raise ConfigError(f"layer {i}: dense needs a vector input, got {shape}")
            self._add(i, "weight", he_uniform(rng, (spec.units, shape[0]), shape[0], self.dtype))
            self._add(i, "bias", np.zeros(spec.units, self.dtype))
            return (spec.units,)
        if kind == "maxpool2":
            if len(shape) != 3 or shape[0] % 2 or shape[1] % 2:
                raise ConfigError(f"layer {i}: maxpool2 needs even spatial dims, got {shape}")
            return (shape[0] // 2, shape[1] // 2, shape[2])
        if kind == "global_avg_pool":
            if len(shape) != 3:
                raise ConfigError(f"layer {i}: global_avg_pool needs (H, W, C), got {shape}")
            return (shape[2],)
        return shape

    def _add(self, i, what, value):
        self.params[self._name(i, what)] = Tensor(value, requires_grad=True, name=self._name(i, what))

    def parameters(self):
        return list(self.params.values())

    @property
    def param_count(self):
        return int(sum(p.size for p in self.params.values()))

    def forward(self, x, train=False, rng=None):
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        for i, spec in enumerate(self.specs):
            kind = spec.kind
            if kind == "conv2d":
                x = ops.conv2d(x, self.params[self._name(i, "weight")], self.params[self._name(i, "bias")],
                               stride=spec.stride, padding=spec.pad)
            elif kind == "dense":
                x = ops.dense(x, self.params[self._name(i, "weight")], self.params[self._name(i, "bias")])
            elif kind == "relu":
                x = ops.relu(x)
            elif kind == "maxpool2":
                x = ops.maxpool2(x)
            elif kind == "global_avg_pool":
                x = ops.global_avg_pool(x)
            elif kind == "dropout":
                x = ops.dropout_apply(x, spec.ratio, "train" if train else "eval", rng)
            elif kind == "softmax":
                x = ops.softmax(x)
        return x

    __call__ = forward

    def state_dict(self):
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state, strict=True):
        missing = [k for k in self.params if k not in state]
        if strict and missing:
            raise LoadError(f"checkpoint is missing parameters: {missing}")
        for k, p in self.params.items():
            if k not in state:
                continue
            value = np.asarray(state[k])
            if value.shape != p.shape:
                raise LoadError(f"{k}: checkpoint shape {value.shape} != model shape {p.shape}")
            p.data = value.astype(p.dtype, copy=True)
