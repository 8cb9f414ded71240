"""Sparsity schedules, regularizer ramps, per-layer allocation and learning rates.

All functions here are pure and safe to call from any thread.
"""

from __future__ import annotations

import math
from collections.abc import Mapping, Sequence
from typing import Literal

from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from sparsekit.errors import InfeasibleAllocationError

RampShape = Literal["constant", "linear", "cubic"]
LrScheme = Literal[
    "standard",
    "scaled-regions",
    "extended-final",
    "repeated-decay",
    "repeated-decay-no-warmup",
]


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class PruningSchedule(_Frozen):
    """Gradual sparsification from ``initial_sparsity`` to ``final_sparsity``."""

    start_step: int = Field(ge=0)
    end_step: int
    frequency: int = Field(ge=1)
    initial_sparsity: float = Field(default=0.0, ge=0.0, lt=1.0)
    final_sparsity: float = Field(gt=0.0, le=1.0)

    @model_validator(mode="after")
    def _check_order(self) -> PruningSchedule:
        if self.end_step <= self.start_step:
            raise ValueError(f"end_step {self.end_step} must exceed start_step {self.start_step}")
        if self.final_sparsity < self.initial_sparsity:
            raise ValueError("final_sparsity must be >= initial_sparsity")
        return self


class RampSchedule(_Frozen):
    """Regularizer coefficient ramp toward ``final_coefficient``."""

    shape: RampShape = "constant"
    start_step: int = Field(default=0, ge=0)
    end_step: int = Field(default=0, ge=0)
    final_coefficient: float = Field(default=1.0, ge=0.0)

    @model_validator(mode="after")
    def _check_order(self) -> RampSchedule:
        if self.shape != "constant" and self.end_step < self.start_step:
            raise ValueError("ramp end_step must not precede start_step")
        return self


LayerOverride = Literal["uniform", "keep-dense"] | float


class LayerPolicy(_Frozen):
    """Per-layer overrides: ``keep-dense`` or a fixed sparsity fraction.

    Layers not named here share the uniform fraction.
    """

    overrides: dict[str, LayerOverride] = Field(default_factory=dict)

    @field_validator("overrides")
    @classmethod
    def _check_fractions(cls, value: dict[str, LayerOverride]) -> dict[str, LayerOverride]:
        for name, override in value.items():
            if isinstance(override, float) and not 0.0 <= override <= 1.0:
                raise ValueError(f"{name}: fixed fraction {override} outside [0, 1]")
        return value

    @classmethod
    def parse(cls, text: str) -> LayerPolicy:
        """Build from ``"fc1:keep-dense fc3:0.8"`` style text."""
        overrides: dict[str, LayerOverride] = {}
        for entry in text.split():
            name, sep, rule = entry.partition(":")
            if not sep or not name:
                raise ValueError(f"malformed layer override {entry!r}")
            if rule in ("uniform", "keep-dense"):
                overrides[name] = rule  # type: ignore[assignment]
            else:
                overrides[name] = float(rule)
        return cls(overrides=overrides)


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------


def _progress(t: int, start: int, end: int) -> float:
    if t <= start:
        return 0.0
    if t >= end:
        return 1.0
    return (t - start) / (end - start)


def sparsity_at(sched: PruningSchedule, t: int) -> float:
    """Cubic schedule ``s_f + (s_i - s_f)(1 - progress)^3``, clamped outside."""
    if t < 0:
        raise ValueError(f"step must be >= 0, got {t}")
    remaining = 1.0 - _progress(t, sched.start_step, sched.end_step)
    s_i, s_f = sched.initial_sparsity, sched.final_sparsity
    return s_f + (s_i - s_f) * remaining**3


def is_prune_event(sched: PruningSchedule, t: int) -> bool:
    """Events fire at ``start + k * frequency`` inside the window and at ``end``."""
    if t < sched.start_step or t > sched.end_step:
        return False
    return t == sched.end_step or (t - sched.start_step) % sched.frequency == 0


def last_event_step(sched: PruningSchedule, t: int) -> int | None:
    """Most recent event step at or before ``t``, if any."""
    if t < sched.start_step:
        return None
    if t >= sched.end_step:
        return sched.end_step
    return sched.start_step + ((t - sched.start_step) // sched.frequency) * sched.frequency


def target_at(sched: PruningSchedule, t: int) -> float:
    """Target sparsity frozen at the last event's value (0 before the first event)."""
    step = last_event_step(sched, t)
    return 0.0 if step is None else sparsity_at(sched, step)


def ramp_at(ramp: RampSchedule, t: int) -> float:
    if t < 0:
        raise ValueError(f"step must be >= 0, got {t}")
    if ramp.shape == "constant":
        return ramp.final_coefficient
    if ramp.end_step == ramp.start_step:
        return ramp.final_coefficient if t >= ramp.end_step else 0.0
    progress = _progress(t, ramp.start_step, ramp.end_step)
    if ramp.shape == "linear":
        return ramp.final_coefficient * progress
    return ramp.final_coefficient * (1.0 - (1.0 - progress) ** 3)


# ---------------------------------------------------------------------------
# Allocation
# ---------------------------------------------------------------------------


def zero_count(fraction: float, size: int) -> int:
    """``floor(fraction * size)`` tolerant of float noise just below an integer."""
    return min(size, max(0, math.floor(fraction * size + 1e-9)))


def allocate_layer_targets(
    layers: Sequence[tuple[str, int]],
    global_sparsity: float,
    policy: LayerPolicy | None = None,
) -> dict[str, float]:
    """Per-layer sparsity fractions whose zeros add up to the global budget.

    Overridden layers keep their fixed fraction (or stay dense); the rest
    share one uniform fraction. Zero counts are floored per layer and the
    leftover budget goes to the largest uniform layer.
    """
    if not 0.0 <= global_sparsity <= 1.0:
        raise ValueError(f"global sparsity {global_sparsity} outside [0, 1]")
    policy = policy or LayerPolicy()
    for name, size in layers:
        if size <= 0:
            raise ValueError(f"layer {name} has non-positive size {size}")
    unknown = set(policy.overrides) - {name for name, _ in layers}
    if unknown:
        raise ValueError(f"overrides for unknown layers: {sorted(unknown)}")

    total = sum(size for _, size in layers)
    budget = zero_count(global_sparsity, total)
    zeros: dict[str, int] = {}
    uniform: list[tuple[str, int]] = []
    for name, size in layers:
        rule = policy.overrides.get(name, "uniform")
        if rule == "keep-dense":
            zeros[name] = 0
        elif isinstance(rule, float):
            zeros[name] = zero_count(rule, size)
        else:
            uniform.append((name, size))

    fixed_zeros = sum(zeros.values())
    uniform_size = sum(size for _, size in uniform)
    if uniform:
        fraction = (global_sparsity * total - fixed_zeros) / uniform_size
        if fraction > 1.0 + 1e-12:
            raise InfeasibleAllocationError(
                f"uniform layers would need sparsity {fraction:.4f} > 1 "
                f"to reach global {global_sparsity}"
            )
        if fraction < 0.0:
            logger.warning(
                f"Overrides alone exceed global sparsity {global_sparsity}; "
                "uniform layers stay dense"
            )
            fraction = 0.0
        fraction = min(fraction, 1.0)
        for name, size in uniform:
            zeros[name] = zero_count(fraction, size)
        residual = budget - sum(zeros.values())
        if residual > 0:
            largest, largest_size = max(uniform, key=lambda item: item[1])
            zeros[largest] = min(largest_size, zeros[largest] + residual)

    sizes = dict(layers)
    return {name: zeros[name] / sizes[name] for name, _ in layers}


def layer_target_at(
    sched: PruningSchedule,
    t: int,
    final_targets: Mapping[str, float],
) -> dict[str, float]:
    """Per-layer targets following the global schedule's cubic progress.

    Each layer starts at ``min(initial_sparsity, final_layer)`` and moves to
    its final allocation in lockstep with the frozen global target.
    """
    global_target = target_at(sched, t)
    step = last_event_step(sched, t)
    if step is None:
        return {name: 0.0 for name in final_targets}
    span = sched.final_sparsity - sched.initial_sparsity
    share = 1.0 if span <= 0 else (global_target - sched.initial_sparsity) / span
    targets: dict[str, float] = {}
    for name, final in final_targets.items():
        start = min(sched.initial_sparsity, final)
        targets[name] = start + (final - start) * share
    return targets


# ---------------------------------------------------------------------------
# Learning rate
# ---------------------------------------------------------------------------


class LearningRateSchedule(_Frozen):
    """Linear warm-up to ``base_lr`` then step decays at epoch boundaries."""

    base_lr: float = Field(gt=0.0)
    warmup_epochs: float = Field(default=0.0, ge=0.0)
    boundaries: tuple[float, ...] = ()
    decay_factor: float = Field(default=0.1, gt=0.0)
    total_epochs: float = Field(gt=0.0)

    @field_validator("boundaries")
    @classmethod
    def _sorted(cls, value: tuple[float, ...]) -> tuple[float, ...]:
        if list(value) != sorted(value):
            raise ValueError("lr boundaries must be ascending")
        return value


def lr_at(sched: LearningRateSchedule, epoch: float) -> float:
    if sched.warmup_epochs > 0 and epoch < sched.warmup_epochs:
        return sched.base_lr * max(epoch, 1e-12) / sched.warmup_epochs
    drops = sum(1 for boundary in sched.boundaries if epoch >= boundary)
    return sched.base_lr * sched.decay_factor**drops


def extend_lr_schedule(
    sched: LearningRateSchedule,
    scheme: LrScheme,
    *,
    factor: float = 2.0,
    repeat_every: float = 30.0,
) -> LearningRateSchedule:
    """Stretch a schedule to ``factor`` times the epochs under one scheme."""
    total = sched.total_epochs * factor
    if scheme == "standard":
        return sched.model_copy(update={"total_epochs": total})
    if scheme == "scaled-regions":
        return sched.model_copy(
            update={
                "warmup_epochs": sched.warmup_epochs * factor,
                "boundaries": tuple(b * factor for b in sched.boundaries),
                "total_epochs": total,
            }
        )
    if scheme == "extended-final":
        return sched.model_copy(update={"total_epochs": total})
    if repeat_every <= 0:
        raise ValueError(f"repeat_every must be > 0, got {repeat_every}")
    count = math.ceil(total / repeat_every)
    boundaries = tuple(k * repeat_every for k in range(1, count) if k * repeat_every < total)
    warmup = 0.0 if scheme == "repeated-decay-no-warmup" else sched.warmup_epochs
    return sched.model_copy(
        update={"warmup_epochs": warmup, "boundaries": boundaries, "total_epochs": total}
    )
