"""Forward-pass FLOP accounting.

One multiply-accumulate counts as two FLOPs. Biases and activations are
not counted. A convolution weight is applied once per output position.
"""

from __future__ import annotations

import math
from collections.abc import Mapping

from sparsekit.models import Model, ModelSpec

MAC_FLOPS = 2
FLOPS_CONVENTION = "flops: forward pass; multiply-accumulate = 2 FLOPs; biases excluded"


def output_positions(spec: ModelSpec) -> dict[str, int]:
    """How many times each weight layer's kernel is applied per sample."""
    shapes = spec.activation_shapes()
    positions: dict[str, int] = {}
    for layer in spec.weight_layers():
        out = shapes[layer.name]
        positions[layer.name] = math.prod(out[1:]) if layer.kind == "conv" else 1
    return positions


def count_flops(spec: ModelSpec, nonzero: Mapping[str, float]) -> int:
    """``sum 2 * nonzero * positions`` over weight layers, rounded to an integer.

    ``nonzero`` holds mask popcounts or, for gated layers during training,
    the expected L0 norm. Missing layers count as dense.
    """
    sizes = dict(spec.weight_sizes())
    unknown = set(nonzero) - set(sizes)
    if unknown:
        raise ValueError(f"nonzero counts for unknown layers: {sorted(unknown)}")
    total = 0.0
    for name, positions in output_positions(spec).items():
        count = nonzero.get(name, sizes[name])
        if not 0.0 <= count <= sizes[name]:
            raise ValueError(f"{name}: nonzero count {count} outside [0, {sizes[name]}]")
        total += MAC_FLOPS * count * positions
    return round(total)


def dense_flops(spec: ModelSpec) -> int:
    return count_flops(spec, {})


def model_flops(model: Model, *, expected: bool = True) -> int:
    """FLOPs at training time (``expected``) or under the test-time masks."""
    counts: Mapping[str, float] = model.expected_nonzero() if expected else model.test_nonzero()
    return count_flops(model.spec, counts)
