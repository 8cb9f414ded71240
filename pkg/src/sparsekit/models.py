"""Model descriptions and the runtime network built from them.

A :class:`ModelSpec` is a validated, serializable list of layer
descriptors. :func:`build_model` turns it into a :class:`Model` whose
weight layers are masked, variational or gated depending on the
sparsification method.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Protocol

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from sparsekit import tensor as T
from sparsekit.errors import ShapeError
from sparsekit.l0 import DEFAULT_DROP_RATE, GatedLayer, GateShape
from sparsekit.layers import Mode, WeightGeometry
from sparsekit.masks import GradMode, MaskedLayer, SparsityMask
from sparsekit.tensor import Tensor
from sparsekit.variational import DEFAULT_THRESHOLD, VDLayerParams

Method = Literal["none", "magnitude", "random", "vd", "l0"]
LayerKind = Literal["dense", "conv", "maxpool", "flatten"]

PRUNING_METHODS: frozenset[str] = frozenset({"none", "magnitude", "random"})


# ---------------------------------------------------------------------------
# Specs
# ---------------------------------------------------------------------------


class LayerSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str
    kind: LayerKind
    shape: tuple[int, ...] = ()
    stride: int = Field(default=1, ge=1)
    padding: int = Field(default=0, ge=0)
    pool: int = Field(default=2, ge=1)
    activation: Literal["relu", "none"] = "none"

    @model_validator(mode="after")
    def _check_shape(self) -> LayerSpec:
        rank = {"dense": 2, "conv": 4}.get(self.kind)
        if rank is not None and (len(self.shape) != rank or min(self.shape) <= 0):
            raise ValueError(f"{self.name}: {self.kind} layer needs {rank} positive dims")
        return self

    @property
    def has_weights(self) -> bool:
        return self.kind in ("dense", "conv")

    @property
    def geometry(self) -> WeightGeometry:
        if self.kind not in ("dense", "conv"):
            raise ShapeError(f"{self.name}: {self.kind} layer has no weights")
        return WeightGeometry(
            kind=self.kind, shape=self.shape, stride=self.stride, padding=self.padding
        )


class ModelSpec(BaseModel):
    """Ordered layers plus the sparsification method applied to every weight layer."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str
    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]
    method: Method = "none"

    @model_validator(mode="after")
    def _check_chain(self) -> ModelSpec:
        names = [layer.name for layer in self.layers]
        if len(names) != len(set(names)):
            raise ValueError("layer names must be unique")
        self.activation_shapes()
        return self

    def activation_shapes(self) -> dict[str, tuple[int, ...]]:
        """Per-sample output shape of every layer; raises on incompatible neighbours."""
        current = self.input_shape
        shapes: dict[str, tuple[int, ...]] = {}
        for layer in self.layers:
            current = _propagate(layer, current)
            shapes[layer.name] = current
        return shapes

    def weight_layers(self) -> list[LayerSpec]:
        return [layer for layer in self.layers if layer.has_weights]

    def weight_sizes(self) -> list[tuple[str, int]]:
        return [(layer.name, math.prod(layer.shape)) for layer in self.weight_layers()]

    @property
    def weight_count(self) -> int:
        return sum(size for _, size in self.weight_sizes())

    @property
    def num_classes(self) -> int:
        return math.prod(list(self.activation_shapes().values())[-1])

    def with_method(self, method: Method) -> ModelSpec:
        return self.model_copy(update={"method": method})


def _propagate(layer: LayerSpec, current: tuple[int, ...]) -> tuple[int, ...]:
    if layer.kind == "flatten":
        return (math.prod(current),)
    if layer.kind == "dense":
        if current != (layer.shape[0],):
            raise ValueError(f"{layer.name}: expects input ({layer.shape[0]},), got {current}")
        return (layer.shape[1],)
    if len(current) != 3:
        raise ValueError(f"{layer.name}: expects a (C, H, W) input, got {current}")
    c, h, w = current
    if layer.kind == "maxpool":
        if h % layer.pool or w % layer.pool:
            raise ValueError(f"{layer.name}: pool {layer.pool} does not tile {h}x{w}")
        return (c, h // layer.pool, w // layer.pool)
    f, kc, kh, kw = layer.shape
    if kc != c:
        raise ValueError(f"{layer.name}: expects {kc} channels, got {c}")
    hp, wp = h + 2 * layer.padding, w + 2 * layer.padding
    if kh > hp or kw > wp:
        raise ValueError(f"{layer.name}: kernel {kh}x{kw} exceeds padded input {hp}x{wp}")
    return (f, (hp - kh) // layer.stride + 1, (wp - kw) // layer.stride + 1)


def build_lenet300(method: Method = "none") -> ModelSpec:
    """784-300-100-10 fully connected network with ReLU hidden units."""
    return ModelSpec(
        name="lenet300",
        input_shape=(1, 28, 28),
        method=method,
        layers=(
            LayerSpec(name="flatten", kind="flatten"),
            LayerSpec(name="fc1", kind="dense", shape=(784, 300), activation="relu"),
            LayerSpec(name="fc2", kind="dense", shape=(300, 100), activation="relu"),
            LayerSpec(name="fc3", kind="dense", shape=(100, 10)),
        ),
    )


def build_lenet5(method: Method = "none") -> ModelSpec:
    """Caffe LeNet-5: conv20-pool-conv50-pool-fc500-fc10, ReLU after fc1 only."""
    return ModelSpec(
        name="lenet5",
        input_shape=(1, 28, 28),
        method=method,
        layers=(
            LayerSpec(name="conv1", kind="conv", shape=(20, 1, 5, 5)),
            LayerSpec(name="pool1", kind="maxpool"),
            LayerSpec(name="conv2", kind="conv", shape=(50, 20, 5, 5)),
            LayerSpec(name="pool2", kind="maxpool"),
            LayerSpec(name="flatten", kind="flatten"),
            LayerSpec(name="fc1", kind="dense", shape=(800, 500), activation="relu"),
            LayerSpec(name="fc2", kind="dense", shape=(500, 10)),
        ),
    )


ARCHITECTURES = {"lenet300": build_lenet300, "lenet5": build_lenet5}


# ---------------------------------------------------------------------------
# Runtime
# ---------------------------------------------------------------------------


class WeightLayer(Protocol):
    name: str
    geometry: WeightGeometry
    bias: Tensor

    @property
    def size(self) -> int: ...

    def parameters(self) -> dict[str, Tensor]: ...

    def forward(self, x: Tensor, mode: Mode, gen: np.random.Generator | None) -> Tensor: ...

    def regularizer(self) -> Tensor | None: ...

    def test_keep(self) -> np.ndarray: ...

    def expected_nonzero(self) -> float: ...

    def enforce(self) -> None: ...


@dataclass(frozen=True)
class LayerOptions:
    """Method-specific construction knobs, usually filled from the config."""

    grad_mode: GradMode = "dense"
    log_sigma2_init: float = -10.0
    vd_threshold: float = DEFAULT_THRESHOLD
    gate_shape: GateShape = field(default_factory=GateShape)
    initial_drop_rate: float = DEFAULT_DROP_RATE
    l0_weight_decay: float = 0.0


@dataclass
class Model:
    spec: ModelSpec
    layers: dict[str, WeightLayer]

    def forward(self, x: Tensor, mode: Mode, gen: np.random.Generator | None = None) -> Tensor:
        expected = (x.shape[0], *self.spec.input_shape)
        if x.shape != expected:
            raise ShapeError(f"{self.spec.name}: input {x.shape} != expected {expected}")
        out = x
        for layer in self.spec.layers:
            if layer.kind == "flatten":
                out = T.flatten(out)
            elif layer.kind == "maxpool":
                out = T.max_pool2d(out, layer.pool)
            else:
                out = self.layers[layer.name].forward(out, mode, gen)
                if layer.activation == "relu":
                    out = T.relu(out)
        return out

    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for layer in self.layers.values():
            params.update(layer.parameters())
        return params

    def regularizer(self) -> Tensor | None:
        """Sum of per-layer regularizers (KL or expected L0); ``None`` for pruning methods."""
        terms = [
            term for layer in self.layers.values() if (term := layer.regularizer()) is not None
        ]
        if not terms:
            return None
        total = terms[0]
        for term in terms[1:]:
            total = total + term
        return total

    def decay_penalty(self) -> Tensor | None:
        terms = [
            term
            for layer in self.layers.values()
            if isinstance(layer, GatedLayer) and (term := layer.decay_penalty()) is not None
        ]
        if not terms:
            return None
        total = terms[0]
        for term in terms[1:]:
            total = total + term
        return total

    def enforce(self) -> None:
        for layer in self.layers.values():
            layer.enforce()

    @property
    def weight_count(self) -> int:
        return sum(layer.size for layer in self.layers.values())

    # -- sparsity ----------------------------------------------------------

    def masks(self) -> dict[str, SparsityMask]:
        return {
            name: layer.mask
            for name, layer in self.layers.items()
            if isinstance(layer, MaskedLayer)
        }

    def set_masks(self, masks: dict[str, SparsityMask], *, freeze: bool = False) -> None:
        for name, mask in masks.items():
            layer = self.layers.get(name)
            if not isinstance(layer, MaskedLayer):
                raise ShapeError(f"no masked layer named {name!r}")
            layer.set_mask(mask)
            if freeze:
                layer.grad_mode = "masked"
                layer.frozen = True
                layer.enforce()

    def expected_nonzero(self) -> dict[str, float]:
        """Training-time nonzero counts: mask popcount or expected L0."""
        return {name: layer.expected_nonzero() for name, layer in self.layers.items()}

    def test_nonzero(self) -> dict[str, int]:
        return {name: int(layer.test_keep().sum()) for name, layer in self.layers.items()}

    def train_sparsity(self) -> float:
        return 1.0 - sum(self.expected_nonzero().values()) / self.weight_count

    def test_sparsity(self) -> float:
        return 1.0 - sum(self.test_nonzero().values()) / self.weight_count

    # -- state ---------------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.parameters().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        if missing:
            raise ShapeError(f"state is missing parameters: {sorted(missing)}")
        for name, param in params.items():
            value = state[name]
            if value.shape != param.shape:
                raise ShapeError(f"{name}: state {value.shape} != parameter {param.shape}")
            param.data = np.array(value, dtype=param.data.dtype, copy=True)


def _make_layer(
    spec: LayerSpec,
    method: Method,
    gen: np.random.Generator,
    options: LayerOptions,
) -> WeightLayer:
    geometry = spec.geometry
    if method == "vd":
        return VDLayerParams.create(
            spec.name,
            geometry,
            gen,
            log_sigma2_init=options.log_sigma2_init,
            threshold=options.vd_threshold,
        )
    if method == "l0":
        return GatedLayer.create(
            spec.name,
            geometry,
            gen,
            shape=options.gate_shape,
            initial_drop_rate=options.initial_drop_rate,
            weight_decay=options.l0_weight_decay,
        )
    grad_mode: GradMode = "masked" if method == "random" else options.grad_mode
    return MaskedLayer.create(spec.name, geometry, gen, grad_mode=grad_mode)


def build_model(
    spec: ModelSpec,
    gen: np.random.Generator,
    options: LayerOptions | None = None,
) -> Model:
    """Initialize every weight layer in declaration order from ``gen``."""
    options = options or LayerOptions()
    layers = {
        layer.name: _make_layer(layer, spec.method, gen, options) for layer in spec.weight_layers()
    }
    return Model(spec, layers)
