"""L0 regularization with hard-concrete gates.

Each weight is the product of a free weight and a stochastic gate drawn
from a stretched, clamped binary-concrete distribution. The gate
distribution has point masses at 0 and 1, so the expected number of
nonzero gates is differentiable in the gate locations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from sparsekit import tensor as T
from sparsekit.errors import ShapeError
from sparsekit.layers import Mode, WeightGeometry, apply_weight, glorot_uniform, zero_bias
from sparsekit.tensor import Tensor

DEFAULT_DROP_RATE = 0.1


class GateShape(BaseModel):
    """Stretch and temperature constants shared by every gate of a layer."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    beta: float = Field(default=2.0 / 3.0, gt=0.0, le=1.0)
    gamma: float = Field(default=-0.1, lt=0.0)
    zeta: float = Field(default=1.1, gt=1.0)

    @model_validator(mode="after")
    def _check(self) -> GateShape:
        if not self.gamma < 0.0 < 1.0 < self.zeta:
            raise ValueError("gate stretch needs gamma < 0 < 1 < zeta")
        return self

    @property
    def l0_shift(self) -> float:
        """``beta * log(-gamma / zeta)``; negative for valid constants."""
        return self.beta * math.log(-self.gamma / self.zeta)

    @property
    def zero_threshold(self) -> float:
        """``log alpha`` at or below which the test-time gate is exactly zero."""
        p = -self.gamma / (self.zeta - self.gamma)
        return math.log(p / (1.0 - p))


@dataclass
class HardConcreteParams:
    log_alpha: Tensor
    shape: GateShape

    @property
    def beta(self) -> float:
        return self.shape.beta

    @property
    def gamma(self) -> float:
        return self.shape.gamma

    @property
    def zeta(self) -> float:
        return self.shape.zeta


def log_alpha_for_drop_rate(rate: float) -> float:
    """Gate location whose sigmoid keeps ``1 - rate`` of the mass: ``logit(1 - rate)``."""
    if not 0.0 < rate < 1.0:
        raise ValueError(f"drop rate must be in (0, 1), got {rate}")
    keep = 1.0 - rate
    return math.log(keep / (1.0 - keep))


def draw_uniform(gen: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Uniform draws on the open interval ``(0, 1)``."""
    tiny = np.finfo(np.float64).eps
    return np.clip(gen.random(shape), tiny, 1.0 - tiny)


def hc_sample(
    g: HardConcreteParams,
    gen: np.random.Generator | None,
    *,
    u: np.ndarray | None = None,
) -> Tensor:
    """Reparameterized gate sample ``clamp(s * (zeta - gamma) + gamma, 0, 1)``.

    ``s = sigmoid((log u - log(1 - u) + log alpha) / beta)``; pass ``u`` to pin
    the noise. Gradients flow to ``log alpha`` where the stretched sample lies
    strictly inside ``(0, 1)``.
    """
    if u is None:
        if gen is None:
            raise ValueError("hc_sample needs a generator or pinned noise")
        u = draw_uniform(gen, g.log_alpha.shape)
    elif u.shape != g.log_alpha.shape:
        raise ShapeError(f"pinned noise {u.shape} != gates {g.log_alpha.shape}")
    elif ((u <= 0.0) | (u >= 1.0)).any():
        raise ValueError("pinned uniform noise must lie strictly inside (0, 1)")
    logistic = np.log(u) - np.log1p(-u)
    s = T.sigmoid((g.log_alpha + logistic) * (1.0 / g.beta))
    stretched = s * (g.zeta - g.gamma) + g.gamma
    return T.clamp(stretched, 0.0, 1.0)


def hc_nonzero_probability(g: HardConcreteParams) -> Tensor:
    """Per-gate ``P(z != 0) = sigmoid(log alpha - beta * log(-gamma / zeta))``."""
    return T.sigmoid(g.log_alpha - g.shape.l0_shift)


def hc_expected_l0(g: HardConcreteParams) -> Tensor:
    return T.sum_all(hc_nonzero_probability(g))


def hc_test_gate(g: HardConcreteParams) -> Tensor:
    """Deterministic ``clamp(sigmoid(log alpha) * (zeta - gamma) + gamma, 0, 1)``."""
    stretched = T.sigmoid(g.log_alpha) * (g.zeta - g.gamma) + g.gamma
    return T.clamp(stretched, 0.0, 1.0)


def hc_atom_probabilities(log_alpha: float, shape: GateShape | None = None) -> tuple[float, float]:
    """Closed-form ``(P(z = 0), P(z = 1))`` for a single gate."""
    shape = shape or GateShape()
    width = shape.zeta - shape.gamma

    def _cdf_of_s(level: float) -> float:
        # P(s <= level) for the binary-concrete s.
        logit = math.log(level / (1.0 - level))
        return 1.0 / (1.0 + math.exp(-(shape.beta * logit - log_alpha)))

    p_zero = _cdf_of_s(-shape.gamma / width)
    p_one = 1.0 - _cdf_of_s((1.0 - shape.gamma) / width)
    return p_zero, p_one


@dataclass
class GatedLayer:
    """Free weights ``theta_tilde`` multiplied elementwise by hard-concrete gates."""

    name: str
    geometry: WeightGeometry
    theta: Tensor
    gates: HardConcreteParams
    bias: Tensor
    weight_decay: float = 0.0
    initial_drop_rate: float = DEFAULT_DROP_RATE

    def __post_init__(self) -> None:
        if self.theta.shape != self.gates.log_alpha.shape:
            raise ShapeError(
                f"{self.name}: weights {self.theta.shape} != gates {self.gates.log_alpha.shape}"
            )

    @classmethod
    def create(
        cls,
        name: str,
        geometry: WeightGeometry,
        gen: np.random.Generator,
        *,
        shape: GateShape | None = None,
        initial_drop_rate: float = DEFAULT_DROP_RATE,
        weight_decay: float = 0.0,
    ) -> GatedLayer:
        theta = Tensor(glorot_uniform(geometry, gen), requires_grad=True, name=f"{name}.theta")
        log_alpha = Tensor(
            np.full(geometry.shape, log_alpha_for_drop_rate(initial_drop_rate)),
            requires_grad=True,
            name=f"{name}.log_alpha",
        )
        return cls(
            name=name,
            geometry=geometry,
            theta=theta,
            gates=HardConcreteParams(log_alpha, shape or GateShape()),
            bias=zero_bias(geometry),
            weight_decay=weight_decay,
            initial_drop_rate=initial_drop_rate,
        )

    @property
    def size(self) -> int:
        return self.theta.size

    def parameters(self) -> dict[str, Tensor]:
        return {
            f"{self.name}.theta": self.theta,
            f"{self.name}.log_alpha": self.gates.log_alpha,
            f"{self.name}.bias": self.bias,
        }

    def forward(self, x: Tensor, mode: Mode, gen: np.random.Generator | None) -> Tensor:
        return l0_forward(self, x, mode, gen)

    def regularizer(self) -> Tensor:
        return hc_expected_l0(self.gates)

    def decay_penalty(self) -> Tensor | None:
        """``sum (lambda' / 2) * theta^2 * P(z != 0)`` with ``lambda' = lambda / (1 - p0)``."""
        if self.weight_decay <= 0.0:
            return None
        scaled = self.weight_decay / (1.0 - self.initial_drop_rate)
        per_weight = T.square(self.theta) * hc_nonzero_probability(self.gates)
        return (0.5 * scaled) * T.sum_all(per_weight)

    def test_keep(self) -> np.ndarray:
        with T.no_grad():
            return hc_test_gate(self.gates).data > 0.0

    def expected_nonzero(self) -> float:
        with T.no_grad():
            return hc_expected_l0(self.gates).item()

    def enforce(self) -> None:
        return None


def l0_forward(
    layer: GatedLayer,
    x: Tensor,
    mode: Mode,
    gen: np.random.Generator | None,
    *,
    u: np.ndarray | None = None,
) -> Tensor:
    """Train mode gates with a fresh sample; eval mode with the test-time gate."""
    gate = hc_sample(layer.gates, gen, u=u) if mode == "train" else hc_test_gate(layer.gates)
    if gate.shape != layer.theta.shape:
        raise ShapeError(f"{layer.name}: gate {gate.shape} != weights {layer.theta.shape}")
    return apply_weight(x, layer.theta * gate, layer.geometry) + layer.bias
