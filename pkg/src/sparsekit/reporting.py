"""Sweep rows, Pareto frontiers, sparsity distributions and CSV series."""

from __future__ import annotations

import csv
import io
import math
from collections.abc import Iterable, Mapping, Sequence
from pathlib import Path
from typing import TypedDict

from loguru import logger

from sparsekit.checkpoint import Checkpoint, restore_model
from sparsekit.flops import FLOPS_CONVENTION
from sparsekit.training import TrainingRecord

SWEEP_HEADER: tuple[str, ...] = (
    "method",
    "target_sparsity",
    "train_sparsity",
    "test_sparsity",
    "test_accuracy",
    "coefficient",
    "threshold",
    "seed",
    "steps",
    "wall_clock",
    "config_hash",
)


class SweepRow(TypedDict):
    """One completed run (or one threshold of a run) in the sweep CSV."""

    method: str
    target_sparsity: float | None
    train_sparsity: float
    test_sparsity: float
    test_accuracy: float
    coefficient: float
    threshold: float | None
    seed: int
    steps: int
    wall_clock: float
    config_hash: str


class LayerSparsityRow(TypedDict):
    layer: str
    size: int
    nonzeros: int
    sparsity: float


def row_from_record(record: TrainingRecord, *, threshold: float | None = None) -> SweepRow:
    return {
        "method": record["method"],
        "target_sparsity": record["target_sparsity"],
        "train_sparsity": record["train_sparsity"],
        "test_sparsity": record["test_sparsity"],
        "test_accuracy": record["test_accuracy"],
        "coefficient": record["coefficient"],
        "threshold": threshold,
        "seed": record["seed"],
        "steps": record["steps"],
        "wall_clock": record["wall_clock"],
        "config_hash": record["config_hash"],
    }


# ---------------------------------------------------------------------------
# Sweep CSV
# ---------------------------------------------------------------------------


def _row_key(row: Mapping[str, object]) -> tuple[str, str, str]:
    threshold = row.get("threshold")
    return (
        str(row["config_hash"]),
        str(row["seed"]),
        "" if threshold in (None, "") else str(float(threshold)),  # type: ignore[arg-type]
    )


def _format(value: object) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


class SweepWriter:
    """Append-only sweep CSV keyed by ``(config hash, seed, threshold)``.

    Only one writer may own a file; parallel sweeps funnel rows through it.
    """

    def __init__(self, path: Path) -> None:
        self.path = path
        self._keys: set[tuple[str, str, str]] = set()
        if path.is_file() and path.stat().st_size > 0:
            with path.open(newline="", encoding="utf-8") as fh:
                reader = csv.DictReader(fh)
                if tuple(reader.fieldnames or ()) != SWEEP_HEADER:
                    raise ValueError(f"{path}: unexpected sweep header {reader.fieldnames}")
                self._keys = {_row_key(row) for row in reader}
        else:
            path.parent.mkdir(parents=True, exist_ok=True)
            with path.open("w", newline="", encoding="utf-8") as fh:
                csv.writer(fh).writerow(SWEEP_HEADER)

    def __contains__(self, key: tuple[str, str, str]) -> bool:
        return key in self._keys

    def append(self, row: SweepRow) -> bool:
        """Write ``row`` unless its key is already present; returns whether it was written."""
        key = _row_key(row)
        if key in self._keys:
            logger.warning(f"Duplicate sweep row skipped: hash={key[0][:12]} seed={key[1]}")
            return False
        values: Mapping[str, object] = row
        with self.path.open("a", newline="", encoding="utf-8") as fh:
            csv.writer(fh).writerow([_format(values[name]) for name in SWEEP_HEADER])
        self._keys.add(key)
        return True


def _parse_optional(value: str) -> float | None:
    return float(value) if value else None


def read_sweep_rows(path: Path) -> list[SweepRow]:
    if not path.is_file():
        raise FileNotFoundError(f"sweep file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        return [
            {
                "method": raw["method"],
                "target_sparsity": _parse_optional(raw["target_sparsity"]),
                "train_sparsity": float(raw["train_sparsity"]),
                "test_sparsity": float(raw["test_sparsity"]),
                "test_accuracy": float(raw["test_accuracy"]),
                "coefficient": float(raw["coefficient"]),
                "threshold": _parse_optional(raw["threshold"]),
                "seed": int(raw["seed"]),
                "steps": int(raw["steps"]),
                "wall_clock": float(raw["wall_clock"]),
                "config_hash": raw["config_hash"],
            }
            for raw in reader
        ]


# ---------------------------------------------------------------------------
# Pareto frontier
# ---------------------------------------------------------------------------


def pareto_frontier(rows: Sequence[SweepRow]) -> list[SweepRow]:
    """Rows not dominated in (test sparsity, test accuracy), by ascending sparsity.

    A row is dominated when another row is at least as good on both axes
    and strictly better on one. Rows with a NaN accuracy are ignored.
    """
    methods = {row["method"] for row in rows}
    if len(methods) > 1:
        raise ValueError(f"frontier rows must share one method, got {sorted(methods)}")
    usable = [row for row in rows if not math.isnan(row["test_accuracy"])]
    by_sparsity: dict[float, list[SweepRow]] = {}
    for row in usable:
        by_sparsity.setdefault(row["test_sparsity"], []).append(row)

    frontier: list[SweepRow] = []
    best = -math.inf
    for sparsity in sorted(by_sparsity, reverse=True):
        group = by_sparsity[sparsity]
        top = max(row["test_accuracy"] for row in group)
        if top > best:
            frontier.extend(row for row in group if row["test_accuracy"] == top)
            best = top
    frontier.sort(key=lambda row: (row["test_sparsity"], row["test_accuracy"]))
    return frontier


def frontiers_by_method(rows: Iterable[SweepRow]) -> dict[str, list[SweepRow]]:
    grouped: dict[str, list[SweepRow]] = {}
    for row in rows:
        grouped.setdefault(row["method"], []).append(row)
    return {method: pareto_frontier(group) for method, group in sorted(grouped.items())}


# ---------------------------------------------------------------------------
# Sparsity distribution
# ---------------------------------------------------------------------------


def sparsity_distribution_report(ckpt: Checkpoint) -> list[LayerSparsityRow]:
    """Per-layer ``(size, nonzeros, sparsity)`` rows plus a ``global`` aggregate.

    Test-time sparsity comes from the stored masks, the ``log alpha``
    threshold or the test-time gates, depending on the method. A checkpoint
    without any of these reports every layer as dense.
    """
    rows: list[LayerSparsityRow] = []
    if "model" in ckpt.metadata:
        model, _ = restore_model(ckpt)
        for name, nonzeros in model.test_nonzero().items():
            size = model.layers[name].size
            rows.append(_layer_row(name, size, nonzeros))
    elif ckpt.masks:
        for name, mask in ckpt.masks.items():
            rows.append(_layer_row(name, mask.length, mask.popcount()))
    else:
        logger.warning("Checkpoint has no masks or thresholds; reporting zero sparsity")
        for name, array in ckpt.weights().items():
            if name.endswith((".weight", ".theta")):
                layer = name.rsplit(".", 1)[0]
                rows.append(_layer_row(layer, int(array.size), int(array.size)))

    size = sum(row["size"] for row in rows)
    nonzeros = sum(row["nonzeros"] for row in rows)
    rows.append(_layer_row("global", size, nonzeros))
    return rows


def _layer_row(name: str, size: int, nonzeros: int) -> LayerSparsityRow:
    sparsity = 1.0 - nonzeros / size if size else 0.0
    return {"layer": name, "size": size, "nonzeros": nonzeros, "sparsity": sparsity}


# ---------------------------------------------------------------------------
# CSV emission
# ---------------------------------------------------------------------------


def to_csv(rows: Iterable[Mapping[str, object]], header: Sequence[str]) -> str:
    """CSV text led by a comment line stating the FLOP convention."""
    buffer = io.StringIO()
    buffer.write(f"# {FLOPS_CONVENTION}\n")
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_format(row[name]) for name in header])
    return buffer.getvalue()


def frontier_csv(rows: Sequence[SweepRow]) -> str:
    points = [
        point for frontier in frontiers_by_method(rows).values() for point in frontier
    ]
    return to_csv(points, SWEEP_HEADER)


def distribution_csv(rows: Sequence[LayerSparsityRow]) -> str:
    return to_csv(rows, ("layer", "size", "nonzeros", "sparsity"))


def flops_series_csv(record: TrainingRecord) -> str:
    """``step, expected_flops, train_sparsity`` series from a training record."""
    series = [
        {
            "step": log["step"],
            "expected_flops": log["expected_flops"],
            "train_sparsity": log["train_sparsity"],
        }
        for log in record["logs"]
    ]
    return to_csv(series, ("step", "expected_flops", "train_sparsity"))
