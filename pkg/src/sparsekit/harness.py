"""Lottery-ticket and scratch retraining over learned sparse masks.

A pruned base run provides its initial weights and final masks. Each
variant retrains the fixed mask from either that initialization (lottery)
or a fresh one (scratch-e with the base budget, scratch-b with twice the
steps and a stretched learning-rate schedule), and :func:`compare` sets
the results against the pruned-during-training baseline.
"""

from __future__ import annotations

import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path
from types import MappingProxyType
from typing import Literal, TypedDict

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, model_validator

from sparsekit.checkpoint import Checkpoint, load_checkpoint
from sparsekit.config import SparseKitConfig
from sparsekit.data import Dataset
from sparsekit.errors import CaptureError, MaskViolationError, PruningError, TrainingDivergedError
from sparsekit.layers import glorot_uniform
from sparsekit.masks import MaskedLayer, SparsityMask
from sparsekit.models import Model, ModelSpec, build_model
from sparsekit.rng import STREAM_INIT, RngState
from sparsekit.schedule import LrScheme, extend_lr_schedule
from sparsekit.training import (
    TrainingRecord,
    TrainingRun,
    lr_schedule,
    total_steps,
    train,
)

Variant = Literal["lottery", "scratch-e", "scratch-b"]
Reinit = Literal["original-init", "fresh-standard", "fresh-nnz-scaled"]

SCRATCH_B_FACTOR = 2


class ExperimentPlan(BaseModel):
    """One retraining protocol applied to one base run."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    base_run: str = "in-memory"
    variant: Variant
    reinit: Reinit = "original-init"
    lr_scheme: LrScheme = "standard"
    replicas: int = Field(default=1, ge=1)
    seeds: tuple[int, ...] = ()
    repeat_decay_epochs: float = Field(default=30.0, gt=0.0)
    check_every: int = Field(default=100, ge=1)

    @model_validator(mode="after")
    def _check(self) -> ExperimentPlan:
        if self.variant == "lottery" and self.reinit != "original-init":
            raise ValueError("lottery variant requires reinit = original-init")
        if self.lr_scheme != "standard" and self.variant != "scratch-b":
            raise ValueError(f"lr scheme {self.lr_scheme!r} only applies to scratch-b")
        if self.seeds and len(self.seeds) != self.replicas:
            raise ValueError(f"{len(self.seeds)} seeds given for {self.replicas} replicas")
        return self

    def replica_seeds(self, base_seed: int) -> tuple[int, ...]:
        return self.seeds or tuple(base_seed + k for k in range(self.replicas))

    @classmethod
    def from_config(
        cls, config: SparseKitConfig, *, base_run: str = "in-memory"
    ) -> ExperimentPlan:
        h = config.harness
        return cls(
            base_run=base_run,
            variant=h.variant,
            reinit=h.reinit,
            lr_scheme=h.lr_scheme,
            replicas=h.replicas_inner,
            repeat_decay_epochs=h.repeat_decay_epochs,
            check_every=h.check_every,
        )


# ---------------------------------------------------------------------------
# Snapshots
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MaskSnapshot:
    masks: Mapping[str, SparsityMask]
    source: str
    sparsity: float


@dataclass(frozen=True)
class InitSnapshot:
    weights: Mapping[str, np.ndarray]
    source: str


def _frozen_arrays(state: Mapping[str, np.ndarray]) -> Mapping[str, np.ndarray]:
    copies: dict[str, np.ndarray] = {}
    for name, array in state.items():
        copy = np.array(array, copy=True)
        copy.flags.writeable = False
        copies[name] = copy
    return MappingProxyType(copies)


def _global_sparsity(masks: Mapping[str, SparsityMask]) -> float:
    total = sum(mask.length for mask in masks.values())
    kept = sum(mask.popcount() for mask in masks.values())
    return 1.0 - kept / total if total else 0.0


def _snapshots(
    init: Mapping[str, np.ndarray],
    masks: Mapping[str, SparsityMask],
    source: str,
) -> tuple[InitSnapshot, MaskSnapshot]:
    mask_copy = {
        name: SparsityMask(mask.packed.copy(), mask.shape) for name, mask in masks.items()
    }
    return (
        InitSnapshot(_frozen_arrays(init), source),
        MaskSnapshot(MappingProxyType(mask_copy), source, _global_sparsity(mask_copy)),
    )


def capture(run: TrainingRun, *, source: str = "in-memory") -> tuple[InitSnapshot, MaskSnapshot]:
    """Initial weights (before step 0) and final masks of a pruning run."""
    method = run.model.spec.method
    if method not in ("magnitude", "random"):
        raise CaptureError(f"{method} runs carry no pruning masks to capture")
    masks = run.model.masks()
    if not masks:
        raise CaptureError("run lacks masks")
    return _snapshots(run.init_state, masks, source)


def capture_checkpoint(ckpt: Checkpoint, *, source: str) -> tuple[InitSnapshot, MaskSnapshot]:
    """Same as :func:`capture` for a run saved to disk."""
    method = ckpt.metadata.get("method")
    if method not in ("magnitude", "random"):
        raise CaptureError(f"{source}: {method} checkpoint carries no pruning masks")
    init = ckpt.init_weights()
    if not ckpt.masks or not init:
        raise CaptureError(f"{source}: checkpoint lacks masks or initial weights")
    return _snapshots(init, ckpt.masks, source)


# ---------------------------------------------------------------------------
# Re-initialization
# ---------------------------------------------------------------------------


def nnz_variance_scale(mask: SparsityMask) -> float:
    """``total / nonzero`` for one layer."""
    nnz = mask.popcount()
    if nnz == 0:
        raise PruningError(f"mask of shape {mask.shape} keeps no weights")
    return mask.length / nnz


def reinit_nnz_scaled(
    spec: ModelSpec,
    masks: MaskSnapshot,
    rng: RngState,
) -> dict[str, np.ndarray]:
    """Fresh initialization with each layer's variance scaled by ``total / nonzero``.

    Returns a full parameter state (biases zero) for :func:`train`.
    """
    gen = rng.child(STREAM_INIT).generator()
    state = build_model(spec, gen).state_dict()
    for layer in spec.weight_layers():
        mask = masks.masks.get(layer.name)
        if mask is None or mask.shape != layer.shape:
            raise CaptureError(f"{layer.name}: no mask matching shape {layer.shape}")
        scale = nnz_variance_scale(mask)
        state[f"{layer.name}.weight"] = glorot_uniform(layer.geometry, gen, variance_scale=scale)
    return state


# ---------------------------------------------------------------------------
# Running variants
# ---------------------------------------------------------------------------


class MaskGuard:
    """Step hook asserting that frozen masks and their zeros never change."""

    def __init__(self, masks: MaskSnapshot, check_every: int) -> None:
        self.masks = masks
        self.check_every = check_every
        self.checks = 0

    def __call__(self, step: int, model: Model) -> None:
        if step % self.check_every == 0:
            self.check(model, step)

    def check(self, model: Model, step: int) -> None:
        for name, expected in self.masks.masks.items():
            layer = model.layers[name]
            if not isinstance(layer, MaskedLayer) or layer.mask != expected:
                raise MaskViolationError(f"step {step}: mask of {name} changed")
            if np.any(layer.weights.data[~layer.keep] != 0.0):
                raise MaskViolationError(f"step {step}: masked weight of {name} is non-zero")
        self.checks += 1


class VariantResult(TypedDict):
    """Outcome of one retraining replica."""

    variant: str
    reinit: str
    lr_scheme: str
    sparsity: float
    seed: int
    steps: int
    status: str
    test_accuracy: float
    record: TrainingRecord


def run_variant(
    plan: ExperimentPlan,
    spec: ModelSpec,
    masks: MaskSnapshot,
    init: InitSnapshot | None,
    config: SparseKitConfig,
    train_data: Dataset,
    test_data: Dataset,
    *,
    seed: int,
    out_dir: Path | None = None,
) -> VariantResult:
    """Retrain ``masks`` from scratch under one plan and one replica seed.

    A diverged run is returned with ``status="failed"`` instead of raising.
    """
    if plan.reinit == "original-init":
        if init is None:
            raise CaptureError(f"{plan.variant} with original-init needs captured weights")
        init_state: dict[str, np.ndarray] | None = dict(init.weights)
    elif plan.reinit == "fresh-nnz-scaled":
        init_state = reinit_nnz_scaled(spec, masks, RngState(seed))
    else:
        init_state = None

    steps = total_steps(config, len(train_data))
    schedule = lr_schedule(config)
    if plan.variant == "scratch-b":
        steps *= SCRATCH_B_FACTOR
        schedule = extend_lr_schedule(
            schedule,
            plan.lr_scheme,
            factor=SCRATCH_B_FACTOR,
            repeat_every=plan.repeat_decay_epochs,
        )

    guard = MaskGuard(masks, plan.check_every)
    logger.info(
        f"{plan.variant} ({plan.reinit}, {plan.lr_scheme}) seed={seed} "
        f"sparsity={masks.sparsity:.4f} steps={steps}"
    )
    try:
        run = train(
            spec,
            config,
            train_data,
            test_data,
            rng=RngState(seed),
            masks=dict(masks.masks),
            init_state=init_state,
            schedule=schedule,
            steps=steps,
            hooks=(guard,),
            out_dir=out_dir,
        )
    except TrainingDivergedError as e:
        logger.warning(f"{plan.variant} replica seed={seed} failed: {e}")
        return _failed_result(plan, spec, masks, seed, e)
    guard.check(run.model, run.record["steps"])
    return {
        "variant": plan.variant,
        "reinit": plan.reinit,
        "lr_scheme": plan.lr_scheme,
        "sparsity": masks.sparsity,
        "seed": seed,
        "steps": run.record["steps"],
        "status": run.record["status"],
        "test_accuracy": run.record["test_accuracy"],
        "record": run.record,
    }


def _failed_result(
    plan: ExperimentPlan,
    spec: ModelSpec,
    masks: MaskSnapshot,
    seed: int,
    error: TrainingDivergedError,
) -> VariantResult:
    record: TrainingRecord = {
        "model": spec.name,
        "method": spec.method,
        "seed": seed,
        "config_hash": "",
        "steps": error.step,
        "target_sparsity": masks.sparsity,
        "train_sparsity": masks.sparsity,
        "test_sparsity": masks.sparsity,
        "test_accuracy": math.nan,
        "coefficient": 0.0,
        "wall_clock": 0.0,
        "status": "failed",
        "error": str(error),
        "checkpoint": None,
        "logs": [],
    }
    return {
        "variant": plan.variant,
        "reinit": plan.reinit,
        "lr_scheme": plan.lr_scheme,
        "sparsity": masks.sparsity,
        "seed": seed,
        "steps": error.step,
        "status": "failed",
        "test_accuracy": math.nan,
        "record": record,
    }


def run_plan(
    plan: ExperimentPlan,
    spec: ModelSpec,
    masks: MaskSnapshot,
    init: InitSnapshot | None,
    config: SparseKitConfig,
    train_data: Dataset,
    test_data: Dataset,
    *,
    out_dir: Path | None = None,
) -> list[VariantResult]:
    """Every replica of ``plan``; replica ``k`` writes under ``out_dir/replica-k``."""
    results = []
    for k, seed in enumerate(plan.replica_seeds(config.train.seed)):
        target = out_dir / f"replica-{k}" if out_dir is not None else None
        results.append(
            run_variant(
                plan, spec, masks, init, config, train_data, test_data, seed=seed, out_dir=target
            )
        )
    return results


def run_protocol(
    config: SparseKitConfig,
    spec: ModelSpec,
    train_data: Dataset,
    test_data: Dataset,
    *,
    plan: ExperimentPlan | None = None,
    out_dir: Path | None = None,
) -> tuple[list[VariantResult], list[TrainingRecord]]:
    """``replicas_outer`` pruned base runs, each retrained ``replicas_inner`` times."""
    plan = plan or ExperimentPlan.from_config(config)
    results: list[VariantResult] = []
    baselines: list[TrainingRecord] = []
    for outer in range(config.harness.replicas_outer):
        base_seed = config.train.seed + 1000 * outer
        base_dir = out_dir / f"base-{outer}" if out_dir is not None else None
        base_config = config.model_copy(
            update={"train": config.train.model_copy(update={"seed": base_seed})}
        )
        base = train(spec, base_config, train_data, test_data, out_dir=base_dir)
        baselines.append(base.record)
        init, masks = capture(base, source=str(base_dir or f"base-{outer}"))
        inner_plan = plan.model_copy(
            update={"seeds": tuple(base_seed + k for k in range(plan.replicas))}
        )
        results.extend(
            run_plan(
                inner_plan,
                spec,
                masks,
                init,
                base_config,
                train_data,
                test_data,
                out_dir=out_dir / f"{plan.variant}-{outer}" if out_dir is not None else None,
            )
        )
    return results, baselines


def run_from_checkpoint(
    config: SparseKitConfig,
    path: Path,
    train_data: Dataset,
    test_data: Dataset,
    *,
    plan: ExperimentPlan | None = None,
    out_dir: Path | None = None,
) -> tuple[list[VariantResult], list[TrainingRecord]]:
    """Retrain the masks of a saved pruning run; its metadata becomes the baseline."""
    ckpt = load_checkpoint(path)
    if "model" not in ckpt.metadata:
        raise CaptureError(f"{path}: checkpoint carries no model description")
    spec = ModelSpec.model_validate(ckpt.metadata["model"])
    init, masks = capture_checkpoint(ckpt, source=str(path))
    plan = plan or ExperimentPlan.from_config(config, base_run=str(path))
    results = run_plan(plan, spec, masks, init, config, train_data, test_data, out_dir=out_dir)
    baseline: TrainingRecord = {
        "model": spec.name,
        "method": spec.method,
        "seed": int(ckpt.metadata.get("seed", 0)),
        "config_hash": str(ckpt.metadata.get("config_hash", "")),
        "steps": int(ckpt.metadata.get("steps", 0)),
        "target_sparsity": ckpt.metadata.get("target_sparsity"),
        "train_sparsity": masks.sparsity,
        "test_sparsity": masks.sparsity,
        "test_accuracy": float(ckpt.metadata.get("test_accuracy", math.nan)),
        "coefficient": 0.0,
        "wall_clock": 0.0,
        "status": "completed",
        "error": None,
        "checkpoint": str(path),
        "logs": [],
    }
    return results, [baseline]


# ---------------------------------------------------------------------------
# Comparison
# ---------------------------------------------------------------------------


class ComparisonRow(TypedDict):
    variant: str
    sparsity: float
    n: int
    failed: int
    mean: float
    min: float
    max: float
    baseline: float | None
    gap: float | None


def _level(sparsity: float) -> float:
    return round(sparsity, 4)


def compare(
    results: Sequence[VariantResult],
    baseline: TrainingRecord | Sequence[TrainingRecord],
) -> list[ComparisonRow]:
    """Per (variant, sparsity) accuracy statistics against the pruned baseline.

    ``gap`` is baseline accuracy minus the variant mean; positive values
    favour pruning during training. Failed replicas are counted, not averaged.
    """
    base_records = [baseline] if isinstance(baseline, dict) else list(baseline)
    base_by_level: dict[float, list[float]] = {}
    for record in base_records:
        if record["status"] == "completed":
            level = _level(record["test_sparsity"])
            base_by_level.setdefault(level, []).append(record["test_accuracy"])

    groups: dict[tuple[str, float], list[VariantResult]] = {}
    for result in results:
        groups.setdefault((result["variant"], _level(result["sparsity"])), []).append(result)

    rows: list[ComparisonRow] = []
    for (variant, level), members in sorted(groups.items()):
        accuracies = [m["test_accuracy"] for m in members if m["status"] == "completed"]
        reference = base_by_level.get(level)
        base_mean = float(np.mean(reference)) if reference else None
        mean = float(np.mean(accuracies)) if accuracies else math.nan
        rows.append(
            {
                "variant": variant,
                "sparsity": level,
                "n": len(accuracies),
                "failed": len(members) - len(accuracies),
                "mean": mean,
                "min": min(accuracies) if accuracies else math.nan,
                "max": max(accuracies) if accuracies else math.nan,
                "baseline": base_mean,
                "gap": base_mean - mean if base_mean is not None and accuracies else None,
            }
        )
    return rows
