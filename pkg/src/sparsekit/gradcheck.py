"""Finite-difference checks of the reverse-mode gradients.

The model is switched to float64 for the duration of a check. Stochastic
layers draw their noise from a generator that is recreated for every
forward pass, so the analytic and the perturbed passes see identical
noise.
"""

from __future__ import annotations

from typing import TypedDict

import numpy as np
from loguru import logger

from sparsekit import tensor as T
from sparsekit.magnitude import magnitude_prune_step
from sparsekit.masks import MaskedLayer
from sparsekit.models import LayerSpec, Method, Model, ModelSpec, build_model
from sparsekit.optim import zero_grads
from sparsekit.rng import STREAM_DATA, STREAM_INIT, STREAM_NOISE, RngState
from sparsekit.tensor import Tensor
from sparsekit.variational import VDLayerParams

DEFAULT_TOLERANCE = 1e-4
FD_STEP = 1e-5
ERROR_FLOOR = 1e-3  # denominator floor for near-zero gradients


class ParameterCheck(TypedDict):
    name: str
    checked: int
    max_rel_error: float


class GradcheckReport(TypedDict):
    case: str
    passed: bool
    tolerance: float
    max_rel_error: float
    parameters: list[ParameterCheck]


def _loss(
    model: Model,
    inputs: np.ndarray,
    labels: np.ndarray,
    rng: RngState,
    regularizer_weight: float,
) -> Tensor:
    logits = model.forward(Tensor(inputs), "train", rng.generator())
    loss = T.cross_entropy(logits, labels)
    reg = model.regularizer()
    if reg is not None:
        loss = loss + regularizer_weight * reg
    decay = model.decay_penalty()
    if decay is not None:
        loss = loss + decay
    return loss


def _eligible(model: Model, name: str, param: Tensor) -> np.ndarray:
    # Straight-through gradients on masked-out weights are not derivatives.
    layer = model.layers.get(name.rsplit(".", 1)[0])
    if isinstance(layer, MaskedLayer) and param is layer.weights:
        return np.flatnonzero(layer.keep)
    return np.arange(param.size)


def gradcheck(
    model: Model,
    inputs: np.ndarray,
    labels: np.ndarray,
    *,
    tolerance: float = DEFAULT_TOLERANCE,
    rng: RngState | None = None,
    regularizer_weight: float = 1e-2,
    entries: int | None = None,
    case: str = "model",
) -> GradcheckReport:
    """Compare analytic gradients with central differences, per parameter.

    The relative error of one entry is ``|a - n| / max(|a| + |n|, floor)``.
    ``entries`` limits how many entries of each parameter are perturbed;
    ``None`` checks all of them.
    """
    rng = rng or RngState(0, STREAM_NOISE)
    params = model.parameters()
    saved = {name: p.data for name, p in params.items()}
    picker = rng.child(STREAM_DATA).generator()
    checks: list[ParameterCheck] = []
    try:
        with T.float64_precision():
            for p in params.values():
                p.data = p.data.astype(np.float64)
            x = np.asarray(inputs, dtype=np.float64)

            zero_grads(params)
            T.backward(_loss(model, x, labels, rng, regularizer_weight))
            analytic = {
                name: (p.grad if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()
            }

            for name, p in params.items():
                candidates = _eligible(model, name, p)
                if entries is not None and candidates.size > entries:
                    candidates = np.sort(picker.choice(candidates, entries, replace=False))
                flat = p.data.reshape(-1)
                grad = analytic[name].reshape(-1)
                worst = 0.0
                with T.no_grad():
                    for index in candidates:
                        original = flat[index]
                        flat[index] = original + FD_STEP
                        plus = _loss(model, x, labels, rng, regularizer_weight).item()
                        flat[index] = original - FD_STEP
                        minus = _loss(model, x, labels, rng, regularizer_weight).item()
                        flat[index] = original
                        numeric = (plus - minus) / (2.0 * FD_STEP)
                        denom = max(abs(grad[index]) + abs(numeric), ERROR_FLOOR)
                        worst = max(worst, abs(grad[index] - numeric) / denom)
                checks.append(
                    {"name": name, "checked": int(candidates.size), "max_rel_error": worst}
                )
    finally:
        for name, p in params.items():
            p.data = saved[name]
        zero_grads(params)

    max_error = max((c["max_rel_error"] for c in checks), default=0.0)
    report: GradcheckReport = {
        "case": case,
        "passed": max_error < tolerance,
        "tolerance": tolerance,
        "max_rel_error": max_error,
        "parameters": checks,
    }
    logger.info(f"gradcheck {case}: max relative error {max_error:.2e}")
    return report


# ---------------------------------------------------------------------------
# Suite
# ---------------------------------------------------------------------------


def toy_spec(method: Method) -> ModelSpec:
    """A conv + pool + two dense layer network small enough to check every entry."""
    return ModelSpec(
        name="toy",
        input_shape=(1, 6, 6),
        method=method,
        layers=(
            LayerSpec(name="conv", kind="conv", shape=(2, 1, 3, 3), padding=1),
            LayerSpec(name="pool", kind="maxpool"),
            LayerSpec(name="flatten", kind="flatten"),
            LayerSpec(name="fc1", kind="dense", shape=(18, 8), activation="relu"),
            LayerSpec(name="fc2", kind="dense", shape=(8, 3)),
        ),
    )


SUITE_CASES: dict[str, Method] = {"dense": "none", "masked": "magnitude", "vd": "vd", "l0": "l0"}


def toy_model(case: str, seed: int = 0) -> Model:
    if case not in SUITE_CASES:
        raise ValueError(f"unknown gradcheck case {case!r}; expected one of {list(SUITE_CASES)}")
    model = build_model(toy_spec(SUITE_CASES[case]), RngState(seed, STREAM_INIT).generator())
    for layer in model.layers.values():
        if case == "masked" and isinstance(layer, MaskedLayer):
            magnitude_prune_step(layer, 0.5)
        elif isinstance(layer, VDLayerParams):
            # Noise large enough to matter in the check.
            layer.log_sigma2.data = np.full_like(layer.log_sigma2.data, -4.0)
    return model


def gradient_suite(
    *,
    tolerance: float = DEFAULT_TOLERANCE,
    seed: int = 0,
    cases: tuple[str, ...] = tuple(SUITE_CASES),
) -> list[GradcheckReport]:
    """Dense, masked, variational-dropout and hard-concrete gradient checks."""
    gen = RngState(seed, STREAM_DATA).generator()
    inputs = gen.standard_normal((4, 1, 6, 6))
    labels = np.arange(4) % 3
    return [
        gradcheck(
            toy_model(case, seed),
            inputs,
            labels,
            tolerance=tolerance,
            rng=RngState(seed, STREAM_NOISE),
            case=case,
        )
        for case in cases
    ]
