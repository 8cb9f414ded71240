"""Geometry and initialization shared by every weight-carrying layer."""

from __future__ import annotations

import math
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from sparsekit import tensor as T
from sparsekit.errors import ShapeError
from sparsekit.tensor import Tensor

Mode = Literal["train", "eval"]


class WeightGeometry(BaseModel):
    """How a weight tensor is applied: dense ``[in, out]`` or conv ``[F, C, kh, kw]``."""

    model_config = ConfigDict(frozen=True)

    kind: Literal["dense", "conv"]
    shape: tuple[int, ...]
    stride: int = Field(default=1, ge=1)
    padding: int = Field(default=0, ge=0)

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    @property
    def fan_in(self) -> int:
        if self.kind == "dense":
            return self.shape[0]
        return self.shape[1] * self.shape[2] * self.shape[3]

    @property
    def fan_out(self) -> int:
        if self.kind == "dense":
            return self.shape[1]
        return self.shape[0] * self.shape[2] * self.shape[3]

    @property
    def bias_shape(self) -> tuple[int, ...]:
        if self.kind == "dense":
            return (self.shape[1],)
        return (1, self.shape[0], 1, 1)


def apply_weight(x: Tensor, weight: Tensor, geometry: WeightGeometry) -> Tensor:
    """Matmul or convolution of ``x`` with ``weight`` (no bias)."""
    if weight.shape != geometry.shape:
        raise ShapeError(f"weight shape {weight.shape} != declared {geometry.shape}")
    if geometry.kind == "dense":
        return T.matmul(x, weight)
    return T.conv2d(x, weight, stride=geometry.stride, padding=geometry.padding)


def glorot_variance(geometry: WeightGeometry) -> float:
    return 2.0 / (geometry.fan_in + geometry.fan_out)


def glorot_uniform(
    geometry: WeightGeometry,
    gen: np.random.Generator,
    *,
    variance_scale: float = 1.0,
) -> np.ndarray:
    """Glorot-uniform draw; ``variance_scale`` multiplies the target variance."""
    limit = math.sqrt(3.0 * glorot_variance(geometry) * variance_scale)
    return gen.uniform(-limit, limit, size=geometry.shape).astype(np.float32)


def zero_bias(geometry: WeightGeometry) -> Tensor:
    return Tensor(np.zeros(geometry.bias_shape), requires_grad=True)
