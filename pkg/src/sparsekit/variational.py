"""Sparse variational dropout layers.

Weights carry a factorized Gaussian posterior ``N(theta, sigma^2)`` with
``sigma^2 = alpha * theta^2``; the layer stores ``theta`` and
``log sigma^2`` directly (additive noise reparameterization). Training
samples pre-activations from their closed-form Gaussian (local
reparameterization); evaluation drops weights whose ``log alpha`` exceeds a
threshold and runs the mean weights deterministically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from sparsekit import tensor as T
from sparsekit.errors import NonFiniteError, ShapeError
from sparsekit.layers import Mode, WeightGeometry, apply_weight, glorot_uniform, zero_bias
from sparsekit.masks import SparsityMask
from sparsekit.tensor import Tensor

EPS_NUM = 1e-8
DEFAULT_THRESHOLD = 3.0


@dataclass(frozen=True)
class KLConstants:
    k1: float = 0.63576
    k2: float = 1.87320
    k3: float = 1.48695


KL = KLConstants()


@dataclass
class VDLayerParams:
    """Posterior means ``theta`` and log-variances ``log_sigma2`` plus a deterministic bias."""

    name: str
    geometry: WeightGeometry
    theta: Tensor
    log_sigma2: Tensor
    bias: Tensor
    threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self) -> None:
        if self.theta.shape != self.log_sigma2.shape:
            raise ShapeError(
                f"{self.name}: theta {self.theta.shape} != log_sigma2 {self.log_sigma2.shape}"
            )

    @classmethod
    def create(
        cls,
        name: str,
        geometry: WeightGeometry,
        gen: np.random.Generator,
        *,
        log_sigma2_init: float = -10.0,
        threshold: float = DEFAULT_THRESHOLD,
    ) -> VDLayerParams:
        theta = Tensor(glorot_uniform(geometry, gen), requires_grad=True, name=f"{name}.theta")
        log_sigma2 = Tensor(
            np.full(geometry.shape, log_sigma2_init),
            requires_grad=True,
            name=f"{name}.log_sigma2",
        )
        return cls(name, geometry, theta, log_sigma2, zero_bias(geometry), threshold)

    @property
    def size(self) -> int:
        return self.theta.size

    def parameters(self) -> dict[str, Tensor]:
        return {
            f"{self.name}.theta": self.theta,
            f"{self.name}.log_sigma2": self.log_sigma2,
            f"{self.name}.bias": self.bias,
        }

    def forward(self, x: Tensor, mode: Mode, gen: np.random.Generator | None) -> Tensor:
        if mode == "train":
            if gen is None:
                raise ValueError(f"{self.name}: training forward needs a noise generator")
            return vd_forward_train(self, x, gen)
        return vd_forward_eval(self, vd_prune(self, self.threshold), x)

    def regularizer(self) -> Tensor:
        return vd_kl(self)

    def test_keep(self) -> np.ndarray:
        return vd_prune(self, self.threshold).keep()

    def expected_nonzero(self) -> float:
        return float(self.test_keep().sum())

    def enforce(self) -> None:
        return None


def _log_alpha(layer: VDLayerParams) -> Tensor:
    return layer.log_sigma2 - T.log(T.square(layer.theta) + EPS_NUM)


def vd_log_alpha(layer: VDLayerParams) -> np.ndarray:
    """``log sigma^2 - log(theta^2 + eps)`` elementwise."""
    theta = layer.theta.data.astype(np.float64)
    return layer.log_sigma2.data.astype(np.float64) - np.log(theta * theta + EPS_NUM)


def vd_dropout_rate(log_alpha: np.ndarray | float) -> np.ndarray:
    """Equivalent Bernoulli dropout rate ``alpha / (1 + alpha)``."""
    return 1.0 / (1.0 + np.exp(-np.asarray(log_alpha, dtype=np.float64)))


def kl_from_log_alpha(log_alpha: Tensor) -> Tensor:
    """Sum of the approximate ``D_KL`` against the log-uniform prior.

    ``-D_KL = k1 * sigmoid(k2 + k3 * log alpha) - 0.5 * log(1 + 1/alpha) - k1``.
    """
    sig = T.sigmoid(KL.k2 + KL.k3 * log_alpha)
    per_weight = KL.k1 - KL.k1 * sig + 0.5 * T.softplus(-log_alpha)
    return T.sum_all(per_weight)


def vd_kl(layer: VDLayerParams) -> Tensor:
    if (layer.theta.data == 0).any():
        raise NonFiniteError(f"{layer.name}: log alpha undefined where theta is exactly zero")
    return kl_from_log_alpha(_log_alpha(layer))


def vd_kl_values(log_alpha: np.ndarray) -> np.ndarray:
    """Per-weight ``D_KL`` for an array of ``log alpha`` values, in float64."""
    la = np.asarray(log_alpha, dtype=np.float64)
    sig = 1.0 / (1.0 + np.exp(-(KL.k2 + KL.k3 * la)))
    return KL.k1 - KL.k1 * sig + 0.5 * np.logaddexp(0.0, -la)


def vd_forward_train(
    layer: VDLayerParams,
    x: Tensor,
    gen: np.random.Generator,
    *,
    noise: np.ndarray | None = None,
) -> Tensor:
    """Sample pre-activations ``gamma + sqrt(delta + eps) * N(0, 1)``.

    ``gamma`` applies the means; ``delta`` applies ``sigma^2`` to the squared
    inputs, by matmul or convolution depending on the layer geometry.
    ``noise`` pins the standard-normal draw.
    """
    gamma = apply_weight(x, layer.theta, layer.geometry)
    delta = apply_weight(T.square(x), T.exp(layer.log_sigma2), layer.geometry)
    if noise is None:
        noise = gen.standard_normal(gamma.shape)
    elif noise.shape != gamma.shape:
        raise ShapeError(f"pinned noise {noise.shape} != activations {gamma.shape}")
    return gamma + T.sqrt(delta + EPS_NUM) * noise + layer.bias


def vd_prune(layer: VDLayerParams, threshold: float = DEFAULT_THRESHOLD) -> SparsityMask:
    """Keep weights whose ``log alpha`` is at most ``threshold``."""
    if math.isinf(threshold) and threshold > 0:
        return SparsityMask.dense(layer.theta.shape)
    return SparsityMask.from_keep(vd_log_alpha(layer) <= threshold)


def vd_forward_eval(layer: VDLayerParams, mask: SparsityMask, x: Tensor) -> Tensor:
    """Deterministic forward with ``theta * mask``."""
    if mask.shape != layer.theta.shape:
        raise ShapeError(f"{layer.name}: mask {mask.shape} != theta {layer.theta.shape}")
    weights = Tensor(layer.theta.data * mask.keep())
    return apply_weight(x, weights, layer.geometry) + layer.bias
