"""The training loop binding a model, its sparsification method and the schedules.

One call to :func:`train` runs a complete single-threaded training job:
prune events, forward, loss composition, backward, gradient routing,
optimizer step and mask enforcement, in that order, for a fixed number of
steps. Evaluation can shard batches across a thread pool.
"""

from __future__ import annotations

import json
import math
import time
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, TypedDict

import numpy as np
from loguru import logger
from pydantic import ValidationError

from sparsekit import tensor as T
from sparsekit.checkpoint import checkpoint_from_model, save_checkpoint
from sparsekit.config import L0Config, SparseKitConfig, VDConfig, config_hash
from sparsekit.data import (
    Dataset,
    batches,
    load_mnist,
    resolve_data_root,
    synthetic_classification,
)
from sparsekit.errors import ConfigError, NonFiniteError, TrainingDivergedError
from sparsekit.flops import count_flops
from sparsekit.l0 import GateShape
from sparsekit.magnitude import magnitude_prune_step
from sparsekit.masks import MaskedLayer, SparsityMask, route_gradients
from sparsekit.models import ARCHITECTURES, LayerOptions, Model, ModelSpec, build_model
from sparsekit.optim import OptimizerState, collect_grads, optimizer_step, zero_grads
from sparsekit.random_pruning import random_prune_step
from sparsekit.rng import STREAM_DATA, STREAM_INIT, STREAM_NOISE, STREAM_PRUNE, RngState
from sparsekit.schedule import (
    LayerPolicy,
    LearningRateSchedule,
    PruningSchedule,
    RampSchedule,
    allocate_layer_targets,
    is_prune_event,
    layer_target_at,
    lr_at,
    ramp_at,
)
from sparsekit.tensor import Tensor
from sparsekit.variational import VDLayerParams

RunStatus = Literal["completed", "failed"]
StepHook = Callable[[int, Model], None]

CHECKPOINT_NAME = "model.sprs"
RECORD_NAME = "record.json"


class StepLog(TypedDict):
    """One logged training step."""

    step: int
    epoch: float
    loss: float
    task_loss: float
    regularizer: float
    coefficient: float
    decay: float
    batch_accuracy: float
    train_sparsity: float
    layer_sparsity: dict[str, float]
    expected_flops: int
    lr: float
    wall_clock: float


class TrainingRecord(TypedDict):
    """Result of one training run."""

    model: str
    method: str
    seed: int
    config_hash: str
    steps: int
    target_sparsity: float | None
    train_sparsity: float
    test_sparsity: float
    test_accuracy: float
    coefficient: float
    wall_clock: float
    status: RunStatus
    error: str | None
    checkpoint: str | None
    logs: list[StepLog]


@dataclass
class TrainingRun:
    record: TrainingRecord
    model: Model
    init_state: dict[str, np.ndarray]
    options: LayerOptions


# ---------------------------------------------------------------------------
# Construction helpers
# ---------------------------------------------------------------------------


def layer_options(config: SparseKitConfig) -> LayerOptions:
    return LayerOptions(
        grad_mode=config.train.grad_mode,
        log_sigma2_init=config.vd.log_sigma2_init,
        vd_threshold=config.vd.threshold,
        gate_shape=GateShape(beta=config.l0.beta, gamma=config.l0.gamma, zeta=config.l0.zeta),
        initial_drop_rate=config.l0.initial_drop_rate,
        l0_weight_decay=config.l0.weight_decay,
    )


def model_spec(config: SparseKitConfig) -> ModelSpec:
    return ARCHITECTURES[config.train.model](config.train.method)


SYNTHETIC_TRAIN_SEED = 0
SYNTHETIC_TEST_SEED = 1


def load_datasets(config: SparseKitConfig) -> tuple[Dataset, Dataset]:
    """Train and test sets for ``config.data``.

    Synthetic sets use fixed seeds so every run of a sweep sees the same data.
    """
    data = config.data
    if data.dataset == "synthetic":
        train_set = synthetic_classification(
            data.synthetic_train, data.synthetic_classes, SYNTHETIC_TRAIN_SEED, split="train"
        )
        test_set = synthetic_classification(
            data.synthetic_test, data.synthetic_classes, SYNTHETIC_TEST_SEED, split="test"
        )
    else:
        root = resolve_data_root(data.root)
        train_set, test_set = load_mnist(root, "train"), load_mnist(root, "test")
    if data.train_limit is not None:
        train_set = train_set.subset(data.train_limit)
    return train_set, test_set


def steps_per_epoch(dataset_size: int, batch_size: int) -> int:
    return max(1, math.ceil(dataset_size / batch_size))


def total_steps(config: SparseKitConfig, dataset_size: int) -> int:
    if config.train.steps is not None:
        return config.train.steps
    per_epoch = steps_per_epoch(dataset_size, config.train.batch_size)
    return math.ceil(config.train.epochs * per_epoch)


def lr_schedule(config: SparseKitConfig) -> LearningRateSchedule:
    try:
        return LearningRateSchedule(
            base_lr=config.train.lr,
            warmup_epochs=config.train.lr_warmup_epochs,
            boundaries=config.train.lr_decay_epochs,
            decay_factor=config.train.lr_decay_factor,
            total_epochs=config.train.epochs,
        )
    except ValidationError as e:
        raise ConfigError(f"invalid learning-rate schedule: {e}") from e


def pruning_plan(
    spec: ModelSpec, config: SparseKitConfig
) -> tuple[PruningSchedule, dict[str, float]] | None:
    """Schedule plus final per-layer targets, or ``None`` when nothing is pruned."""
    if spec.method not in ("magnitude", "random") or config.prune.final_sparsity <= 0.0:
        return None
    try:
        schedule = PruningSchedule(
            start_step=config.prune.start_step,
            end_step=config.prune.end_step,
            frequency=config.prune.frequency,
            initial_sparsity=config.prune.initial_sparsity,
            final_sparsity=config.prune.final_sparsity,
        )
        policy = LayerPolicy.parse(config.prune.layer_overrides)
        finals = allocate_layer_targets(spec.weight_sizes(), schedule.final_sparsity, policy)
    except (ValidationError, ValueError) as e:
        raise ConfigError(f"invalid pruning configuration: {e}") from e
    return schedule, finals


def regularizer_ramp(spec: ModelSpec, config: SparseKitConfig) -> RampSchedule | None:
    section: VDConfig | L0Config
    if spec.method == "vd":
        section = config.vd
    elif spec.method == "l0":
        section = config.l0
    else:
        return None
    try:
        return RampSchedule(
            shape=section.ramp,
            start_step=section.ramp_start_step,
            end_step=section.ramp_end_step,
            final_coefficient=section.coefficient,
        )
    except ValidationError as e:
        raise ConfigError(f"invalid regularizer ramp: {e}") from e


def apply_prune_event(
    model: Model,
    method: str,
    targets: dict[str, float],
    gen: np.random.Generator,
) -> None:
    for name, layer in model.layers.items():
        if not isinstance(layer, MaskedLayer):
            continue
        target = targets[name]
        if method == "magnitude":
            magnitude_prune_step(layer, target)
        else:
            random_prune_step(layer, target, gen)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def _correct(model: Model, images: np.ndarray, labels: np.ndarray) -> int:
    logits = model.forward(Tensor(images), "eval")
    return int((logits.data.argmax(axis=1) == labels).sum())


def evaluate(
    model: Model,
    dataset: Dataset,
    *,
    batch_size: int = 1000,
    workers: int = 1,
) -> float:
    """Test accuracy with deterministic (eval-mode) forwards.

    Batches are scored independently, so ``workers > 1`` shards them over a
    thread pool; the model is only read.
    """
    if len(dataset) == 0:
        return 0.0
    chunks = list(batches(dataset, batch_size))
    with T.no_grad():
        if workers > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                correct = sum(pool.map(lambda c: _correct(model, *c), chunks))
        else:
            correct = sum(_correct(model, images, labels) for images, labels in chunks)
    return correct / len(dataset)


class ThresholdRow(TypedDict):
    threshold: float
    sparsity: float
    accuracy: float


def threshold_sweep(
    model: Model,
    dataset: Dataset,
    thresholds: Sequence[float],
    *,
    batch_size: int = 1000,
    workers: int = 1,
) -> list[ThresholdRow]:
    """Evaluate a variational-dropout model at each ``log alpha`` threshold."""
    layers = [layer for layer in model.layers.values() if isinstance(layer, VDLayerParams)]
    if not layers:
        raise ConfigError("threshold sweep needs a variational-dropout model")
    original = [layer.threshold for layer in layers]
    rows: list[ThresholdRow] = []
    try:
        for threshold in thresholds:
            for layer in layers:
                layer.threshold = threshold
            accuracy = evaluate(model, dataset, batch_size=batch_size, workers=workers)
            rows.append(
                {"threshold": threshold, "sparsity": model.test_sparsity(), "accuracy": accuracy}
            )
            logger.info(
                f"threshold {threshold:.2f}: sparsity={rows[-1]['sparsity']:.4f} "
                f"accuracy={accuracy:.4f}"
            )
    finally:
        for layer, value in zip(layers, original, strict=True):
            layer.threshold = value
    return rows


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _layer_sparsity(model: Model) -> dict[str, float]:
    return {
        name: 1.0 - count / model.layers[name].size
        for name, count in model.expected_nonzero().items()
    }


def train(
    spec: ModelSpec,
    config: SparseKitConfig,
    train_data: Dataset,
    test_data: Dataset,
    *,
    rng: RngState | None = None,
    masks: dict[str, SparsityMask] | None = None,
    init_state: dict[str, np.ndarray] | None = None,
    schedule: LearningRateSchedule | None = None,
    steps: int | None = None,
    hooks: Sequence[StepHook] = (),
    out_dir: Path | None = None,
) -> TrainingRun:
    """Train ``spec`` under ``config`` and evaluate it on ``test_data``.

    ``masks`` fixes sparse masks for the whole run (pruning disabled,
    masked weights frozen at zero); ``init_state`` replaces the fresh
    initialization; ``schedule`` and ``steps`` override the learning rate
    and the run length derived from the config.

    Raises:
        TrainingDivergedError: The loss or an activation became non-finite.
    """
    rng = rng or RngState(config.train.seed)
    options = layer_options(config)
    model = build_model(spec, rng.child(STREAM_INIT).generator(), options)
    if init_state is not None:
        model.load_state(init_state)
    init = model.state_dict()
    if masks is not None:
        model.set_masks(masks, freeze=True)

    data_gen = rng.child(STREAM_DATA).generator()
    noise_gen = rng.child(STREAM_NOISE).generator()
    prune_gen = rng.child(STREAM_PRUNE).generator()

    plan = None if masks is not None else pruning_plan(spec, config)
    ramp = regularizer_ramp(spec, config)
    lr_sched = schedule or lr_schedule(config)
    n_train = len(train_data)
    per_epoch = steps_per_epoch(n_train, config.train.batch_size)
    n_steps = steps if steps is not None else total_steps(config, n_train)
    optimizer = OptimizerState(
        kind=config.train.optimizer, lr=config.train.lr, momentum=config.train.momentum
    )
    params = model.parameters()

    logger.info(
        f"Training {spec.name}/{spec.method} for {n_steps} steps "
        f"({n_train} samples, seed={rng.seed})"
    )
    logs: list[StepLog] = []
    started = time.perf_counter()
    step = 0
    coefficient = 0.0
    while step < n_steps:
        for images, labels in batches(train_data, config.train.batch_size, data_gen):
            if step >= n_steps:
                break
            if plan is not None and is_prune_event(plan[0], step):
                targets = layer_target_at(plan[0], step, plan[1])
                apply_prune_event(model, spec.method, targets, prune_gen)

            epoch = step / per_epoch
            optimizer.lr = lr_at(lr_sched, epoch)
            coefficient = ramp_at(ramp, step) / n_train if ramp is not None else 0.0
            zero_grads(params)
            try:
                logits = model.forward(Tensor(images), "train", noise_gen)
                task = T.cross_entropy(logits, labels)
                loss = task
                reg = model.regularizer()
                if reg is not None:
                    loss = loss + coefficient * reg
                decay = model.decay_penalty()
                if decay is not None:
                    loss = loss + decay
                if not math.isfinite(loss.item()):
                    raise NonFiniteError("loss is not finite")
                T.backward(loss)
            except NonFiniteError as e:
                logger.warning(f"{spec.method} run diverged at step {step}: {e}")
                raise TrainingDivergedError(step, str(e)) from e

            for layer in model.layers.values():
                if isinstance(layer, MaskedLayer):
                    route_gradients(layer)
            optimizer_step(params, collect_grads(params), optimizer)
            model.enforce()
            step += 1

            for hook in hooks:
                hook(step, model)

            if step % config.train.log_every == 0 or step == n_steps:
                accuracy = float((logits.data.argmax(axis=1) == labels).mean())
                logs.append(
                    {
                        "step": step,
                        "epoch": step / per_epoch,
                        "loss": loss.item(),
                        "task_loss": task.item(),
                        "regularizer": reg.item() if reg is not None else 0.0,
                        "coefficient": coefficient,
                        "decay": decay.item() if decay is not None else 0.0,
                        "batch_accuracy": accuracy,
                        "train_sparsity": model.train_sparsity(),
                        "layer_sparsity": _layer_sparsity(model),
                        "expected_flops": count_flops(spec, model.expected_nonzero()),
                        "lr": optimizer.lr,
                        "wall_clock": time.perf_counter() - started,
                    }
                )
                logger.debug(
                    f"step {step}: loss={logs[-1]['loss']:.4f} acc={accuracy:.3f} "
                    f"sparsity={logs[-1]['train_sparsity']:.4f}"
                )
        if n_train == 0:
            break

    test_accuracy = evaluate(
        model,
        test_data,
        batch_size=config.train.eval_batch_size,
        workers=config.train.eval_workers,
    )
    train_sparsity, test_sparsity = model.train_sparsity(), model.test_sparsity()
    if spec.method == "l0" and abs(train_sparsity - test_sparsity) > 0.01:
        logger.info(
            f"L0 train/test sparsity diverge: expected {train_sparsity:.4f} "
            f"vs test-time {test_sparsity:.4f}"
        )
    record: TrainingRecord = {
        "model": spec.name,
        "method": spec.method,
        "seed": rng.seed,
        "config_hash": config_hash(config),
        "steps": step,
        "target_sparsity": config.prune.final_sparsity if plan is not None else None,
        "train_sparsity": train_sparsity,
        "test_sparsity": test_sparsity,
        "test_accuracy": test_accuracy,
        "coefficient": coefficient,
        "wall_clock": time.perf_counter() - started,
        "status": "completed",
        "error": None,
        "checkpoint": None,
        "logs": logs,
    }
    logger.info(
        f"Finished {spec.name}/{spec.method}: accuracy={test_accuracy:.4f} "
        f"sparsity={test_sparsity:.4f}"
    )
    run = TrainingRun(record=record, model=model, init_state=init, options=options)
    if out_dir is not None:
        write_run(run, out_dir, frozen_masks=masks is not None)
    return run


def write_run(run: TrainingRun, out_dir: Path, *, frozen_masks: bool = False) -> Path:
    """Write the checkpoint (with initial weights) and ``record.json`` under ``out_dir``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = checkpoint_from_model(
        run.model,
        options=run.options,
        init_state=run.init_state,
        metadata={
            "method": run.record["method"],
            "seed": run.record["seed"],
            "steps": run.record["steps"],
            "config_hash": run.record["config_hash"],
            "test_accuracy": run.record["test_accuracy"],
            "target_sparsity": run.record["target_sparsity"],
            "frozen_masks": frozen_masks,
        },
    )
    path = save_checkpoint(out_dir / CHECKPOINT_NAME, ckpt)
    run.record["checkpoint"] = str(path)
    (out_dir / RECORD_NAME).write_text(json.dumps(run.record, indent=2, default=str))
    return path
