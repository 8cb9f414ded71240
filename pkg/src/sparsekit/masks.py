"""Bit-packed sparsity masks and the masked layer that magnitude and random
pruning operate on."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from sparsekit import tensor as T
from sparsekit.errors import ShapeError
from sparsekit.layers import Mode, WeightGeometry, apply_weight, glorot_uniform, zero_bias
from sparsekit.tensor import Tensor

GradMode = Literal["dense", "masked"]


class SparsityMask:
    """One bit per weight; a set bit means the weight is kept."""

    __slots__ = ("_bits", "shape")

    def __init__(self, bits: np.ndarray, shape: tuple[int, ...]) -> None:
        expected = (int(np.prod(shape)) + 7) // 8
        if bits.dtype != np.uint8 or bits.shape != (expected,):
            raise ShapeError(f"mask needs {expected} packed bytes for shape {shape}")
        self._bits = bits
        self.shape = tuple(shape)

    @classmethod
    def from_keep(cls, keep: np.ndarray) -> SparsityMask:
        flat = np.asarray(keep, dtype=bool).reshape(-1)
        return cls(np.packbits(flat, bitorder="little"), tuple(keep.shape))

    @classmethod
    def dense(cls, shape: tuple[int, ...]) -> SparsityMask:
        return cls.from_keep(np.ones(shape, dtype=bool))

    @property
    def length(self) -> int:
        return int(np.prod(self.shape))

    @property
    def packed(self) -> np.ndarray:
        return self._bits

    def keep(self) -> np.ndarray:
        """Boolean array of kept weights, shaped like the weight tensor."""
        flat = np.unpackbits(self._bits, count=self.length, bitorder="little")
        return flat.astype(bool).reshape(self.shape)

    def popcount(self) -> int:
        return int(np.unpackbits(self._bits, count=self.length, bitorder="little").sum())

    def sparsity(self) -> float:
        return 1.0 - self.popcount() / self.length if self.length else 0.0

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SparsityMask):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self._bits, other._bits)

    def __hash__(self) -> int:
        return hash((self.shape, self._bits.tobytes()))

    def __repr__(self) -> str:
        return f"SparsityMask(shape={self.shape}, sparsity={self.sparsity():.4f})"


@dataclass
class MaskedLayer:
    """Weights, bias and a mask; the forward pass uses ``weights * mask``.

    ``grad_mode="dense"`` lets masked weights keep training so they can
    regrow; ``"masked"`` zeroes their gradients. ``frozen`` forces masked
    weights to stay exactly zero after every update.
    """

    name: str
    geometry: WeightGeometry
    weights: Tensor
    bias: Tensor
    mask: SparsityMask
    target: float = 0.0
    grad_mode: GradMode = "dense"
    frozen: bool = False
    _keep: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.mask.shape != self.weights.shape:
            raise ShapeError(
                f"{self.name}: mask {self.mask.shape} != weights {self.weights.shape}"
            )
        self._keep = self.mask.keep()

    @classmethod
    def create(
        cls,
        name: str,
        geometry: WeightGeometry,
        gen: np.random.Generator,
        *,
        grad_mode: GradMode = "dense",
    ) -> MaskedLayer:
        weights = Tensor(glorot_uniform(geometry, gen), requires_grad=True, name=f"{name}.weight")
        return cls(
            name=name,
            geometry=geometry,
            weights=weights,
            bias=zero_bias(geometry),
            mask=SparsityMask.dense(geometry.shape),
            grad_mode=grad_mode,
        )

    def set_mask(self, mask: SparsityMask) -> None:
        if mask.shape != self.weights.shape:
            raise ShapeError(
                f"{self.name}: mask {mask.shape} != weights {self.weights.shape}"
            )
        self.mask = mask
        self._keep = mask.keep()

    @property
    def keep(self) -> np.ndarray:
        return self._keep

    @property
    def size(self) -> int:
        return self.weights.size

    def parameters(self) -> dict[str, Tensor]:
        return {f"{self.name}.weight": self.weights, f"{self.name}.bias": self.bias}

    def forward(self, x: Tensor, mode: Mode, gen: np.random.Generator | None) -> Tensor:
        return masked_forward(self, x)

    def regularizer(self) -> Tensor | None:
        return None

    def expected_nonzero(self) -> float:
        return float(self._keep.sum())

    def test_keep(self) -> np.ndarray:
        return self._keep

    def enforce(self) -> None:
        """Zero masked weights when the mask is frozen."""
        if self.frozen:
            self.weights.data *= self._keep


def masked_forward(layer: MaskedLayer, x: Tensor) -> Tensor:
    """Dense forward with ``weights * mask``; gradients pass straight through."""
    effective = T.straight_through_mask(layer.weights, layer.keep)
    return apply_weight(x, effective, layer.geometry) + layer.bias


def route_gradients(layer: MaskedLayer) -> None:
    """Apply the layer's gradient mode to the weight gradient after backward.

    Dense mode leaves the full gradient on the underlying weights so masked
    entries can regrow; masked mode zeroes it under the mask.
    """
    grad = layer.weights.grad
    if grad is None or layer.grad_mode == "dense":
        return
    layer.weights.grad = grad * layer.keep
