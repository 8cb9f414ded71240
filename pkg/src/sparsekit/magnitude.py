"""Magnitude pruning with sorting-based thresholding.

Every prune event ranks all underlying weights of a layer by absolute
value, masked ones included, so a masked weight whose magnitude grew under
dense gradients can re-enter the kept set.
"""

from __future__ import annotations

import numpy as np
from loguru import logger

from sparsekit.errors import PruningError
from sparsekit.masks import MaskedLayer, SparsityMask
from sparsekit.schedule import zero_count


def magnitude_keep(weights: np.ndarray, target: float) -> np.ndarray:
    """Keep-mask pruning the ``floor(target * n)`` smallest ``|w|``.

    Ties are broken by flat index: the lower index is pruned first.
    """
    if not 0.0 <= target <= 1.0:
        raise PruningError(f"target sparsity {target} outside [0, 1]")
    flat = np.abs(weights.reshape(-1))
    n_prune = zero_count(target, flat.size)
    order = np.argsort(flat, kind="stable")
    keep = np.ones(flat.size, dtype=bool)
    keep[order[:n_prune]] = False
    return keep.reshape(weights.shape)


def magnitude_prune_step(layer: MaskedLayer, target: float) -> None:
    """Re-threshold ``layer`` so exactly ``floor(target * n)`` weights are masked."""
    keep = magnitude_keep(layer.weights.data, target)
    regrown = int((keep & ~layer.keep).sum())
    layer.set_mask(SparsityMask.from_keep(keep))
    layer.target = target
    logger.debug(
        f"magnitude prune {layer.name}: target={target:.4f} "
        f"sparsity={layer.mask.sparsity():.4f} regrown={regrown}"
    )
