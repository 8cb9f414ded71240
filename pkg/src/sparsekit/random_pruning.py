"""Random pruning baseline.

Weights are picked uniformly at random from the currently kept set and
never return: the mask only ever loses bits, pruned weights are zeroed,
and their gradients are masked.
"""

from __future__ import annotations

import numpy as np
from loguru import logger

from sparsekit.errors import PruningError
from sparsekit.masks import MaskedLayer, SparsityMask
from sparsekit.schedule import zero_count


def random_prune_step(layer: MaskedLayer, target: float, gen: np.random.Generator) -> None:
    """Mask additional random weights until ``floor(target * n)`` are masked."""
    if not 0.0 <= target <= 1.0:
        raise PruningError(f"target sparsity {target} outside [0, 1]")
    keep = layer.keep.reshape(-1).copy()
    masked = keep.size - int(keep.sum())
    wanted = zero_count(target, keep.size)
    if wanted < masked:
        raise PruningError(
            f"{layer.name}: target {target} below current sparsity {masked / keep.size:.4f}"
        )
    extra = wanted - masked
    if extra:
        kept_indices = np.flatnonzero(keep)
        chosen = gen.choice(kept_indices, size=extra, replace=False)
        keep[chosen] = False
        layer.set_mask(SparsityMask.from_keep(keep.reshape(layer.weights.shape)))
    layer.grad_mode = "masked"
    layer.frozen = True
    layer.enforce()
    layer.target = target
    logger.debug(f"random prune {layer.name}: target={target:.4f} newly_masked={extra}")
