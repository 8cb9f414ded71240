"""First-order optimizers: SGD with momentum and Adam."""

from __future__ import annotations

import math
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from sparsekit.errors import ShapeError
from sparsekit.tensor import Tensor

OptimizerKind = Literal["sgd-momentum", "adam"]


@dataclass
class OptimizerState:
    """Hyperparameters plus per-parameter slot arrays.

    For ``sgd-momentum`` the slot ``velocity`` holds the momentum buffer; for
    ``adam`` the slots ``m`` and ``v`` hold the first and second moments.
    """

    kind: OptimizerKind
    lr: float
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    slots: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in ("sgd-momentum", "adam"):
            raise ValueError(f"unknown optimizer kind: {self.kind!r}")
        if not (math.isfinite(self.lr) and self.lr > 0):
            raise ValueError(f"learning rate must be finite and > 0, got {self.lr}")


def optimizer_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
) -> None:
    """Update ``params`` in place from ``grads`` and advance ``state.step``.

    Parameters without an entry in ``grads`` are left untouched but keep
    their slots.
    """
    if not math.isfinite(state.lr):
        raise ValueError(f"learning rate must be finite, got {state.lr}")
    for name, grad in grads.items():
        param = params[name]
        if grad.shape != param.shape:
            raise ShapeError(f"{name}: gradient {grad.shape} != parameter {param.shape}")

    state.step += 1
    t = state.step
    for name, grad in grads.items():
        param = params[name]
        g = grad.astype(np.float64)
        slots = state.slots.setdefault(name, {})
        if state.kind == "sgd-momentum":
            velocity = slots.setdefault("velocity", np.zeros(param.shape))
            velocity *= state.momentum
            velocity += g
            update = state.lr * velocity
        else:
            m = slots.setdefault("m", np.zeros(param.shape))
            v = slots.setdefault("v", np.zeros(param.shape))
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * g * g
            m_hat = m / (1.0 - state.beta1**t)
            v_hat = v / (1.0 - state.beta2**t)
            update = state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        param.data -= update.astype(param.data.dtype)


def collect_grads(params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients of every parameter that received one."""
    return {name: p.grad for name, p in params.items() if p.grad is not None}


def zero_grads(params: Mapping[str, Tensor]) -> None:
    for p in params.values():
        p.zero_grad()
