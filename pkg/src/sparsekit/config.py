"""Flat ``section.key = value`` configuration.

Every key belongs to one pydantic section model with a default and a
description; unknown keys and bad values surface as :class:`ConfigError`.
A comma inside a value declares a sweep grid dimension, which only the
sweep runner may expand.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from pathlib import Path
from typing import Annotated, Any, Literal

from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, ValidationError

from sparsekit.data import DEFAULT_MIRROR
from sparsekit.errors import ConfigError
from sparsekit.masks import GradMode
from sparsekit.models import Method
from sparsekit.optim import OptimizerKind
from sparsekit.schedule import LrScheme, RampShape


def _split_floats(v: Any) -> Any:
    """Accept ``"30 60 80"`` as well as real sequences."""
    if isinstance(v, str):
        return tuple(float(part) for part in v.split())
    return v


def _blank_to_none(v: Any) -> Any:
    if isinstance(v, str) and not v.strip():
        return None
    return v


FloatList = Annotated[tuple[float, ...], BeforeValidator(_split_floats)]
OptionalPath = Annotated[str | None, BeforeValidator(_blank_to_none)]
OptionalSteps = Annotated[
    Annotated[int, Field(ge=0)] | None, BeforeValidator(_blank_to_none)
]
OptionalCount = Annotated[
    Annotated[int, Field(ge=1)] | None, BeforeValidator(_blank_to_none)
]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class TrainConfig(_Section):
    model: Literal["lenet300", "lenet5"] = Field(default="lenet300", description="Architecture")
    method: Method = Field(default="none", description="Sparsification method")
    optimizer: OptimizerKind = Field(default="adam", description="Optimizer kind")
    lr: float = Field(default=1e-3, gt=0.0, description="Base learning rate")
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0, description="SGD momentum")
    batch_size: int = Field(default=100, ge=1, description="Training minibatch size")
    epochs: float = Field(default=20.0, gt=0.0, description="Training length in epochs")
    steps: OptionalSteps = Field(default=None, description="Explicit step count")
    lr_warmup_epochs: float = Field(default=0.0, ge=0.0, description="Linear warm-up length")
    lr_decay_epochs: FloatList = Field(default=(), description="Step-decay epoch boundaries")
    lr_decay_factor: float = Field(default=0.1, gt=0.0, description="Factor per decay")
    grad_mode: GradMode = Field(default="dense", description="Masked weight gradients")
    seed: int = Field(default=0, ge=0, description="Run seed")
    log_every: int = Field(default=100, ge=1, description="Steps between log records")
    eval_batch_size: int = Field(default=1000, ge=1, description="Evaluation batch size")
    eval_workers: int = Field(default=1, ge=1, description="Evaluation threads")


class PruneConfig(_Section):
    start_step: int = Field(default=1000, ge=0, description="First prune event")
    end_step: int = Field(default=8000, ge=1, description="Last prune event")
    frequency: int = Field(default=100, ge=1, description="Steps between prune events")
    initial_sparsity: float = Field(default=0.0, ge=0.0, lt=1.0, description="s_i")
    final_sparsity: float = Field(default=0.9, ge=0.0, le=1.0, description="s_f")
    layer_overrides: str = Field(
        default="", description="Entries like 'fc1:keep-dense fc3:0.8'"
    )


class VDConfig(_Section):
    log_sigma2_init: float = Field(default=-10.0, description="Initial log sigma^2")
    threshold: float = Field(default=3.0, description="log alpha pruning threshold")
    thresholds: FloatList = Field(
        default=tuple(0.5 * k for k in range(11)),
        description="Thresholds evaluated by the threshold sweep",
    )
    coefficient: float = Field(default=1.0, ge=0.0, description="Final KL weight times N")
    ramp: RampShape = Field(default="linear", description="KL weight ramp shape")
    ramp_start_step: int = Field(default=0, ge=0, description="KL ramp start")
    ramp_end_step: int = Field(default=5000, ge=0, description="KL ramp end")


class L0Config(_Section):
    beta: float = Field(default=2.0 / 3.0, gt=0.0, le=1.0, description="Gate temperature")
    gamma: float = Field(default=-0.1, lt=0.0, description="Stretch lower bound")
    zeta: float = Field(default=1.1, gt=1.0, description="Stretch upper bound")
    initial_drop_rate: float = Field(default=0.1, gt=0.0, lt=1.0, description="Gate init")
    coefficient: float = Field(default=1.0, ge=0.0, description="Final L0 weight times N")
    ramp: RampShape = Field(default="constant", description="L0 weight ramp shape")
    ramp_start_step: int = Field(default=0, ge=0, description="L0 ramp start")
    ramp_end_step: int = Field(default=0, ge=0, description="L0 ramp end")
    weight_decay: float = Field(default=0.0, ge=0.0, description="Decay on gated weights")


class DataConfig(_Section):
    dataset: Literal["mnist", "synthetic"] = Field(default="mnist", description="Data source")
    root: OptionalPath = Field(default=None, description="MNIST directory")
    mirror: str = Field(default=DEFAULT_MIRROR, description="Download mirror")
    synthetic_train: int = Field(default=1000, ge=2, description="Synthetic train size")
    synthetic_test: int = Field(default=200, ge=2, description="Synthetic test size")
    synthetic_classes: int = Field(default=10, ge=2, description="Synthetic classes")
    train_limit: OptionalCount = Field(default=None, description="Truncate training set")


class HarnessConfig(_Section):
    variant: Literal["lottery", "scratch-e", "scratch-b"] = Field(
        default="lottery", description="Retraining protocol"
    )
    reinit: Literal["original-init", "fresh-standard", "fresh-nnz-scaled"] = Field(
        default="original-init", description="Weight initialization for retraining"
    )
    lr_scheme: LrScheme = Field(default="standard", description="Scratch-b schedule")
    replicas_outer: int = Field(default=1, ge=1, description="Base masks per sparsity")
    replicas_inner: int = Field(default=1, ge=1, description="Retraining replicas per mask")
    repeat_decay_epochs: float = Field(default=30.0, gt=0.0, description="Repeated decay period")
    check_every: int = Field(default=100, ge=1, description="Mask audit period")
    base_checkpoint: OptionalPath = Field(default=None, description="Checkpoint of base run")


class SweepConfig(_Section):
    workers: int = Field(default=1, ge=1, description="Parallel worker processes")
    csv: str = Field(default="sweep.csv", description="Results file under --out")


class SparseKitConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    train: TrainConfig = Field(default_factory=TrainConfig)
    prune: PruneConfig = Field(default_factory=PruneConfig)
    vd: VDConfig = Field(default_factory=VDConfig)
    l0: L0Config = Field(default_factory=L0Config)
    data: DataConfig = Field(default_factory=DataConfig)
    harness: HarnessConfig = Field(default_factory=HarnessConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)


SECTION_MODELS: dict[str, type[BaseModel]] = {
    "train": TrainConfig,
    "prune": PruneConfig,
    "vd": VDConfig,
    "l0": L0Config,
    "data": DataConfig,
    "harness": HarnessConfig,
    "sweep": SweepConfig,
}


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def parse_config_text(text: str) -> dict[str, str]:
    """``key = value`` lines into an ordered dict; ``#`` starts a comment."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        key, sep, value = body.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line.strip()!r}")
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        raw[key] = value.strip()
    return raw


def parse_overrides(pairs: tuple[str, ...] | list[str]) -> dict[str, str]:
    """``--set key=value`` pairs into a dict."""
    out: dict[str, str] = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override must look like key=value, got {pair!r}")
        out[key.strip()] = value.strip()
    return out


def _nest(raw: dict[str, str]) -> dict[str, dict[str, str]]:
    nested: dict[str, dict[str, str]] = {}
    for key, value in raw.items():
        section, dot, name = key.partition(".")
        model = SECTION_MODELS.get(section)
        if not dot or model is None or name not in model.model_fields:
            raise ConfigError(f"unknown config key {key!r}")
        nested.setdefault(section, {})[name] = value
    return nested


def build_config(raw: dict[str, str], *, base: SparseKitConfig | None = None) -> SparseKitConfig:
    """Validate flat keys on top of ``base`` (defaults when omitted)."""
    grid_keys = [key for key, value in raw.items() if "," in value]
    if grid_keys:
        raise ConfigError(f"grid values are only allowed for sweeps: {', '.join(grid_keys)}")
    merged = (base or SparseKitConfig()).model_dump()
    for section, values in _nest(raw).items():
        merged[section].update(values)
    try:
        return SparseKitConfig.model_validate(merged)
    except ValidationError as e:
        raise ConfigError(_describe(e)) from e


def _describe(error: ValidationError) -> str:
    parts = []
    for item in error.errors():
        key = ".".join(str(loc) for loc in item["loc"])
        parts.append(f"{key}: {item['msg']}")
    return "; ".join(parts)


def expand_grid(raw: dict[str, str]) -> list[dict[str, str]]:
    """Cartesian product over every comma-separated value, in key order."""
    axes = [
        [(key, part.strip()) for part in value.split(",")] if "," in value else [(key, value)]
        for key, value in raw.items()
    ]
    return [dict(combo) for combo in itertools.product(*axes)]


def read_config_file(path: str | Path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        return parse_config_text(path.read_text(encoding="utf-8"))
    except UnicodeDecodeError as e:
        raise ConfigError(f"{path}: not UTF-8: {e}") from e


def load_raw(
    path: str | Path | None,
    sets: tuple[str, ...] | list[str] = (),
    seed: int | None = None,
) -> dict[str, str]:
    """File keys, then ``--set`` overrides, then ``--seed``."""
    raw = read_config_file(path) if path is not None else {}
    raw.update(parse_overrides(sets))
    if seed is not None:
        raw["train.seed"] = str(seed)
    return raw


def load_config(
    path: str | Path | None,
    sets: tuple[str, ...] | list[str] = (),
    seed: int | None = None,
) -> SparseKitConfig:
    return build_config(load_raw(path, sets, seed))


_HASH_EXCLUDED = {"train": {"seed"}, "data": {"root", "mirror"}, "sweep": True}


def config_hash(config: SparseKitConfig) -> str:
    """SHA-256 of the canonical JSON dump, ignoring the seed and output-only keys."""
    payload = config.model_dump(mode="json", exclude=_HASH_EXCLUDED)  # type: ignore[arg-type]
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
