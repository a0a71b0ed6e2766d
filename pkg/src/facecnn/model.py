"""Layer-stack model specs, parameter initialization and the forward pass."""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from enum import Enum
from importlib import resources
from math import prod
from typing import Callable, Mapping, Optional, Union

import numpy as np

from . import tensor as T
from .errors import DimensionError, DomainError
from .tensor import Tensor


class Task(str, Enum):
    AGE = "age"
    GENDER = "gender"

    @classmethod
    def parse(cls, value) -> "Task":
        if isinstance(value, Task):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise DomainError(f"unknown task {value!r}; expected 'age' or 'gender'") from None


@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class MaxPool:
    kernel: int
    stride: int


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    units: int


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Softmax:
    pass


Layer = Union[Conv, MaxPool, Flatten, Dense, ReLU, Softmax]

_KINDS = {"conv": Conv, "maxpool": MaxPool, "flatten": Flatten, "dense": Dense, "relu": ReLU, "softmax": Softmax}
_KIND_NAMES = {cls: name for name, cls in _KINDS.items()}


def layer_to_dict(layer: Layer) -> dict:
    out = {"kind": _KIND_NAMES[type(layer)]}
    out.update({f.name: getattr(layer, f.name) for f in fields(layer)})
    return out


def layer_from_dict(obj: Mapping) -> Layer:
    obj = dict(obj)
    kind = obj.pop("kind", None)
    cls = _KINDS.get(str(kind).lower())
    if cls is None:
        raise DomainError(f"unknown layer kind {kind!r}")
    try:
        return cls(**{k: int(v) for k, v in obj.items()})
    except TypeError as exc:
        raise DomainError(f"bad parameters for {kind} layer: {exc}") from None


class ModelSpecError(DimensionError):
    def __init__(self, index: int, layer, reason: str):
        super().__init__(f"layer {index} ({layer}): {reason}")
        self.index = index


def _propagate(shape: tuple[int, ...], layer: Layer, index: int) -> tuple[int, ...]:
    if isinstance(layer, Conv):
        if layer.out_channels < 1 or layer.kernel < 1 or layer.stride < 1 or layer.padding < 0:
            raise ModelSpecError(index, layer, "needs positive sizes and padding >= 0")
        if len(shape) != 3:
            raise ModelSpecError(index, layer, f"expects C×H×W input, got {shape}")
        _, h, w = shape
        if layer.kernel > h + 2 * layer.padding or layer.kernel > w + 2 * layer.padding:
            raise ModelSpecError(index, layer, f"kernel larger than padded input {shape}")
        return (
            layer.out_channels,
            T.conv_output_size(h, layer.kernel, layer.stride, layer.padding),
            T.conv_output_size(w, layer.kernel, layer.stride, layer.padding),
        )
    if isinstance(layer, MaxPool):
        if layer.kernel < 1 or layer.stride < 1:
            raise ModelSpecError(index, layer, "needs positive kernel and stride")
        if len(shape) != 3:
            raise ModelSpecError(index, layer, f"expects C×H×W input, got {shape}")
        c, h, w = shape
        if layer.kernel > h or layer.kernel > w:
            raise ModelSpecError(index, layer, f"window larger than input {shape}")
        return (c, T.pool_output_size(h, layer.kernel, layer.stride), T.pool_output_size(w, layer.kernel, layer.stride))
    if isinstance(layer, Flatten):
        return (prod(shape),)
    if isinstance(layer, Dense):
        if layer.units < 1:
            raise ModelSpecError(index, layer, "needs at least one unit")
        if len(shape) != 1:
            raise ModelSpecError(index, layer, f"expects a flat input, got {shape}; add Flatten first")
        return (layer.units,)
    if isinstance(layer, (ReLU, Softmax)):
        return shape
    raise ModelSpecError(index, layer, "unknown layer type")


_HEADS = {
    Task.AGE: (Dense(1), ReLU()),
    Task.GENDER: (Dense(2), Softmax()),
}


@dataclass(frozen=True)
class ModelSpec:
    """Input shape, ordered layers and (optionally) the task the head serves.

    Construction propagates shapes through every layer and rejects the
    stack at the first layer that cannot accept its input.
    """

    input_shape: tuple[int, ...]
    layers: tuple[Layer, ...]
    task: Optional[Task] = None

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.task is not None:
            object.__setattr__(self, "task", Task.parse(self.task))
        if any(d < 1 for d in self.input_shape):
            raise DimensionError(f"input shape must be positive, got {self.input_shape}")
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            shape = _propagate(shape, layer, i)
        if self.task is not None:
            head = _HEADS[self.task]
            if self.layers[-2:] != head:
                raise ModelSpecError(
                    len(self.layers) - 1,
                    self.layers[-1] if self.layers else None,
                    f"{self.task.value} model must end with {head[0]} -> {type(head[1]).__name__}",
                )

    def shapes(self) -> list[tuple[int, ...]]:
        """Output shape after each layer, preceded by the input shape."""
        out = [self.input_shape]
        for i, layer in enumerate(self.layers):
            out.append(_propagate(out[-1], layer, i))
        return out

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes()[-1]

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "task": self.task.value if self.task else None,
            "layers": [layer_to_dict(layer) for layer in self.layers],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, obj: Mapping) -> "ModelSpec":
        try:
            return cls(
                input_shape=tuple(obj["input_shape"]),
                layers=tuple(layer_from_dict(layer) for layer in obj["layers"]),
                task=obj.get("task"),
            )
        except (KeyError, TypeError) as exc:
            raise DomainError(f"malformed model spec: {exc}") from None


def load_spec(path) -> ModelSpec:
    with open(path, encoding="utf-8") as fh:
        return ModelSpec.from_dict(json.load(fh))


def bundled_spec(task) -> ModelSpec:
    task = Task.parse(task)
    text = resources.files("facecnn.specs").joinpath(f"{task.value}_default.json").read_text(encoding="utf-8")
    return ModelSpec.from_dict(json.loads(text))


INPUT_SHAPE = (3, 200, 200)


def default_trunk() -> tuple[Layer, ...]:
    layers: list[Layer] = []
    for channels in (16, 32, 64, 64):
        layers += [Conv(channels, 3, 1, 1), ReLU(), MaxPool(2, 2)]
    layers += [Flatten(), Dense(128), ReLU()]
    return tuple(layers)


def build_default_age_model() -> ModelSpec:
    return ModelSpec(INPUT_SHAPE, default_trunk() + _HEADS[Task.AGE], Task.AGE)


def build_default_gender_model() -> ModelSpec:
    return ModelSpec(INPUT_SHAPE, default_trunk() + _HEADS[Task.GENDER], Task.GENDER)


def build_default_model(task) -> ModelSpec:
    return build_default_age_model() if Task.parse(task) is Task.AGE else build_default_gender_model()


# -- parameters ----------------------------------------------------------------

Params = dict  # "<layer index>.weight" / "<layer index>.bias" -> float32 array


def param_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    shapes = spec.shapes()
    out: dict[str, tuple[int, ...]] = {}
    for i, layer in enumerate(spec.layers):
        in_shape = shapes[i]
        if isinstance(layer, Conv):
            out[f"{i}.weight"] = (layer.out_channels, in_shape[0], layer.kernel, layer.kernel)
            out[f"{i}.bias"] = (layer.out_channels,)
        elif isinstance(layer, Dense):
            out[f"{i}.weight"] = (in_shape[0], layer.units)
            out[f"{i}.bias"] = (layer.units,)
    return out


def param_count(spec: ModelSpec) -> int:
    return sum(prod(s) for s in param_shapes(spec).values())


def init_params(spec: ModelSpec, seed: int = 0) -> Params:
    """He-normal weights (std sqrt(2 / fan_in)), zero biases."""
    rng = np.random.Generator(np.random.PCG64(seed))
    params: Params = {}
    for name, shape in param_shapes(spec).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = prod(shape[1:]) if len(shape) == 4 else shape[0]
            std = np.sqrt(2.0 / fan_in)
            params[name] = (rng.standard_normal(shape) * std).astype(np.float32)
    return params


def zero_params(spec: ModelSpec) -> Params:
    return {name: np.zeros(shape, dtype=np.float32) for name, shape in param_shapes(spec).items()}


def check_params(spec: ModelSpec, params: Mapping) -> None:
    expected = param_shapes(spec)
    if set(expected) != set(params):
        raise DimensionError(f"parameter names {sorted(params)} do not match spec {sorted(expected)}")
    for name, shape in expected.items():
        got = tuple(np.shape(params[name].data if isinstance(params[name], Tensor) else params[name]))
        if got != shape:
            raise DimensionError(f"parameter {name} has shape {got}, spec needs {shape}")


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def forward(spec: ModelSpec, params: Mapping, batch, trace: Optional[Callable] = None) -> Tensor:
    """Apply the layer stack to a batch shaped ``(B,) + spec.input_shape``.

    ``params`` values may be arrays (treated as constants) or Tensors
    (gradients flow to them).  ``trace(index, layer, x_in, x_out)`` is
    called after every layer when given.
    """
    x = _as_tensor(batch)
    if x.data.ndim != len(spec.input_shape) + 1 or x.shape[1:] != spec.input_shape:
        raise DimensionError(f"batch shape {x.shape} does not match model input (B,)+{spec.input_shape}")
    for i, layer in enumerate(spec.layers):
        x_in = x
        if isinstance(layer, Conv):
            x = T.conv2d(x, _as_tensor(params[f"{i}.weight"]), _as_tensor(params[f"{i}.bias"]), layer.stride, layer.padding)
        elif isinstance(layer, MaxPool):
            x = T.maxpool2d(x, layer.kernel, layer.stride)
        elif isinstance(layer, Flatten):
            x = T.flatten(x)
        elif isinstance(layer, Dense):
            x = T.dense(x, _as_tensor(params[f"{i}.weight"]), _as_tensor(params[f"{i}.bias"]))
        elif isinstance(layer, ReLU):
            x = T.relu(x)
        elif isinstance(layer, Softmax):
            x = T.softmax(x)
        if trace is not None:
            trace(i, layer, x_in, x)
    return x


def predict(spec: ModelSpec, params: Mapping, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Forward in chunks without recording a graph."""
    outs = [forward(spec, params, images[i : i + batch_size]).data for i in range(0, len(images), batch_size)]
    return np.concatenate(outs, axis=0)
