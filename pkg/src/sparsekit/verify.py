"""Reproduction and property checks behind ``sparsekit verify``.

The property checks run in seconds and need no data. The reproduction
checks train variational-dropout LeNets on MNIST and compare sparsity and
accuracy at fixed ``log alpha`` thresholds against target floors, and check
that magnitude pruning matches or beats random pruning at every target.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from typing import TypedDict

import numpy as np
from loguru import logger

from sparsekit import tensor as T
from sparsekit.config import SparseKitConfig, build_config
from sparsekit.data import Dataset, mnist_available, resolve_data_root
from sparsekit.errors import DatasetError, TrainingDivergedError
from sparsekit.flops import dense_flops
from sparsekit.l0 import GateShape, HardConcreteParams, hc_atom_probabilities, hc_sample
from sparsekit.models import build_lenet300
from sparsekit.rng import STREAM_NOISE, RngState
from sparsekit.schedule import PruningSchedule, sparsity_at
from sparsekit.tensor import Tensor
from sparsekit.training import load_datasets, model_spec, threshold_sweep, train
from sparsekit.variational import vd_kl_values


class CheckResult(TypedDict):
    name: str
    passed: bool
    value: float
    target: str


def _check(name: str, passed: bool, value: float, target: str) -> CheckResult:
    verdict = "ok" if passed else "FAILED"
    logger.log("INFO" if passed else "WARNING", f"{name}: {value:.6g} ({target}) {verdict}")
    return {"name": name, "passed": bool(passed), "value": float(value), "target": target}


# ---------------------------------------------------------------------------
# Property checks
# ---------------------------------------------------------------------------

GATE_LOG_ALPHA = 2.197
GATE_DRAWS = 100_000
DENSE_LENET300_FLOPS = 532_400
# Five-digit value; the tolerance covers its rounding.
EXPECTED_L0 = 0.97804
EXPECTED_L0_TOLERANCE = 5e-5


def hard_concrete_checks(seed: int = 0) -> list[CheckResult]:
    """Empirical gate atoms against the closed form, within 3 standard errors."""
    p_zero, p_one = hc_atom_probabilities(GATE_LOG_ALPHA)
    gen = RngState(seed, STREAM_NOISE).generator()
    with T.float64_precision(), T.no_grad():
        gates = HardConcreteParams(Tensor(np.full(GATE_DRAWS, GATE_LOG_ALPHA)), GateShape())
        z = hc_sample(gates, gen).data
    results: list[CheckResult] = []
    for label, expected, observed in (
        ("hard-concrete P(z=0)", p_zero, float((z == 0.0).mean())),
        ("hard-concrete P(z=1)", p_one, float((z == 1.0).mean())),
    ):
        se = math.sqrt(expected * (1.0 - expected) / GATE_DRAWS)
        results.append(
            _check(label, abs(observed - expected) <= 3 * se, observed, f"{expected:.5f} +/- 3se")
        )
    shape = GateShape()
    expected_l0 = 1.0 / (1.0 + math.exp(-(GATE_LOG_ALPHA - shape.l0_shift)))
    consistent = abs(expected_l0 - (1.0 - p_zero)) < 1e-9
    results.append(
        _check(
            "hard-concrete expected L0",
            consistent and abs(expected_l0 - EXPECTED_L0) < EXPECTED_L0_TOLERANCE,
            expected_l0,
            f"1 - P(z=0), {EXPECTED_L0} +/- {EXPECTED_L0_TOLERANCE:g}",
        )
    )
    return results


def kl_checks() -> list[CheckResult]:
    grid = np.linspace(-10.0, 10.0, 2001)
    kl = vd_kl_values(grid)
    return [
        _check("KL non-negative on [-10, 10]", bool((kl >= 0).all()), float(kl.min()), ">= 0"),
        _check(
            "KL strictly decreasing in alpha",
            bool((np.diff(kl) < 0).all()),
            float(np.diff(kl).max()),
            "max step < 0",
        ),
        _check(
            "KL vanishes at log alpha 40",
            abs(float(vd_kl_values(np.array([40.0]))[0])) < 1e-6,
            float(vd_kl_values(np.array([40.0]))[0]),
            "< 1e-6",
        ),
        _check(
            "KL at alpha 1",
            abs(float(vd_kl_values(np.array([0.0]))[0]) - 0.4312) < 1e-4,
            float(vd_kl_values(np.array([0.0]))[0]),
            "0.4312 +/- 1e-4",
        ),
    ]


def accounting_checks() -> list[CheckResult]:
    flops = dense_flops(build_lenet300())
    schedule = PruningSchedule(start_step=0, end_step=100, frequency=1, final_sparsity=0.8)
    midpoint = sparsity_at(schedule, 50)
    return [
        _check("dense LeNet-300-100 FLOPs", flops == DENSE_LENET300_FLOPS, flops, "532400"),
        _check("cubic schedule midpoint", abs(midpoint - 0.7) < 1e-12, midpoint, "0.7"),
    ]


def quick_checks(seed: int = 0) -> list[CheckResult]:
    return [*hard_concrete_checks(seed), *kl_checks(), *accounting_checks()]


# ---------------------------------------------------------------------------
# MNIST reproduction
# ---------------------------------------------------------------------------


class ReproductionTarget(TypedDict):
    model: str
    sparsity: float
    accuracy: float
    sweep_sparsity: float | None
    sweep_accuracy: float | None


TARGETS: dict[str, ReproductionTarget] = {
    "lenet300": {
        "model": "lenet300",
        "sparsity": 0.95,
        "accuracy": 0.98,
        "sweep_sparsity": 0.985,
        "sweep_accuracy": 0.977,
    },
    "lenet5": {
        "model": "lenet5",
        "sparsity": 0.985,
        "accuracy": 0.99,
        "sweep_sparsity": None,
        "sweep_accuracy": None,
    },
}

SWEEP_THRESHOLDS = (3.0, 2.5, 2.0, 1.5, 1.0, 0.5, 0.1)

VERIFY_OVERRIDES = {
    "train.method": "vd",
    "train.optimizer": "adam",
    "train.epochs": "100",
    "data.dataset": "mnist",
    "vd.threshold": "3.0",
    "vd.ramp": "linear",
    "vd.ramp_end_step": "30000",
}


def reproduction_config(model: str, base: SparseKitConfig | None = None) -> SparseKitConfig:
    return build_config({**VERIFY_OVERRIDES, "train.model": model}, base=base)


def reproduction_checks(config: SparseKitConfig) -> list[CheckResult]:
    """Train one VD model on MNIST and score it against its targets."""
    target = TARGETS[config.train.model]
    train_data, test_data = load_datasets(config)
    run = train(model_spec(config), config, train_data, test_data)
    name = target["model"]
    model = run.model
    sparsity, accuracy = model.test_sparsity(), run.record["test_accuracy"]
    results = [
        _check(
            f"{name} sparsity @ 3.0",
            sparsity >= target["sparsity"],
            sparsity,
            f">= {target['sparsity']}",
        ),
        _check(
            f"{name} accuracy @ 3.0",
            accuracy >= target["accuracy"],
            accuracy,
            f">= {target['accuracy']}",
        ),
    ]
    if target["sweep_sparsity"] is None or target["sweep_accuracy"] is None:
        return results

    rows = threshold_sweep(
        model,
        test_data,
        SWEEP_THRESHOLDS,
        batch_size=config.train.eval_batch_size,
        workers=config.train.eval_workers,
    )
    sparsities = [row["sparsity"] for row in rows]
    results.append(
        _check(
            f"{name} sparsity non-decreasing as threshold falls",
            all(b >= a for a, b in zip(sparsities, sparsities[1:], strict=False)),
            sparsities[-1],
            "monotone",
        )
    )
    hits = [
        row
        for row in rows
        if row["sparsity"] >= target["sweep_sparsity"]
        and row["accuracy"] >= target["sweep_accuracy"]
    ]
    best = max(rows, key=lambda row: row["sparsity"])
    results.append(
        _check(
            f"{name} threshold trade-off",
            bool(hits),
            (hits[0] if hits else best)["sparsity"],
            f"sparsity >= {target['sweep_sparsity']} with accuracy >= {target['sweep_accuracy']}",
        )
    )
    return results


# ---------------------------------------------------------------------------
# Magnitude against random pruning
# ---------------------------------------------------------------------------

DOMINANCE_TARGETS = (0.5, 0.7, 0.9, 0.95)
DOMINANCE_SEEDS = (0, 1, 2)

DOMINANCE_OVERRIDES = {
    "train.model": "lenet300",
    "train.optimizer": "adam",
    "train.epochs": "10",
    "data.dataset": "mnist",
    "prune.start_step": "0",
    "prune.end_step": "4000",
    "prune.frequency": "100",
}


def dominance_config(base: SparseKitConfig | None = None) -> SparseKitConfig:
    return build_config(DOMINANCE_OVERRIDES, base=base)


def _mean_accuracy(
    config: SparseKitConfig,
    method: str,
    target: float,
    seeds: Sequence[int],
    datasets: tuple[Dataset, Dataset],
) -> float:
    accuracies = []
    for seed in seeds:
        run_config = build_config(
            {"train.method": method, "prune.final_sparsity": str(target), "train.seed": str(seed)},
            base=config,
        )
        try:
            run = train(model_spec(run_config), run_config, *datasets)
        except TrainingDivergedError as e:
            logger.warning(f"{method} @ {target} seed={seed} diverged: {e}")
            accuracies.append(math.nan)
            continue
        accuracies.append(run.record["test_accuracy"])
    return float(np.mean(accuracies))


def dominance_checks(
    config: SparseKitConfig,
    *,
    targets: Sequence[float] = DOMINANCE_TARGETS,
    seeds: Sequence[int] = DOMINANCE_SEEDS,
) -> list[CheckResult]:
    """Mean test accuracy of magnitude pruning against random pruning per target.

    A diverged run counts as NaN, which fails its target.
    """
    datasets = load_datasets(config)
    results: list[CheckResult] = []
    for target in targets:
        magnitude_mean = _mean_accuracy(config, "magnitude", target, seeds, datasets)
        random_mean = _mean_accuracy(config, "random", target, seeds, datasets)
        results.append(
            _check(
                f"magnitude >= random @ {target:g}",
                magnitude_mean >= random_mean,
                magnitude_mean - random_mean,
                f"gap >= 0 (random mean {random_mean:.4f})",
            )
        )
    return results


def run_verify(
    base: SparseKitConfig | None = None,
    *,
    lenet5: bool = False,
    seed: int = 0,
) -> list[CheckResult]:
    """Property checks, then the MNIST reproductions the data allows."""
    results = quick_checks(seed)
    base = base or SparseKitConfig()
    try:
        root = resolve_data_root(base.data.root)
    except DatasetError as e:
        logger.info(f"Skipping MNIST reproduction: {e}")
        return results
    if not mnist_available(root):
        logger.info(f"Skipping MNIST reproduction: no MNIST files under {root}")
        return results

    results.extend(reproduction_checks(reproduction_config("lenet300", base)))
    results.extend(dominance_checks(dominance_config(base)))
    if lenet5:
        results.extend(reproduction_checks(reproduction_config("lenet5", base)))
    return results
