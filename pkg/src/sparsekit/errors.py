"""Exception hierarchy for sparsekit.

Every failure the library raises on purpose derives from
:class:`SparseKitError`, so callers (the CLI in particular) can separate
expected failures from programming errors.
"""

from __future__ import annotations


class SparseKitError(Exception):
    """Base class for all sparsekit errors."""


class ShapeError(SparseKitError, ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(SparseKitError, FloatingPointError):
    """An operation produced or received NaN/Inf values."""


class GraphError(SparseKitError, RuntimeError):
    """Misuse of the autodiff tape (replayed or missing graph)."""


class PruningError(SparseKitError, ValueError):
    """A pruning target is not reachable from the current mask."""


class InfeasibleAllocationError(SparseKitError, ValueError):
    """Layer overrides leave no feasible uniform sparsity."""


class ConfigError(SparseKitError, ValueError):
    """Invalid configuration text, key or value."""


class DatasetError(SparseKitError, ValueError):
    """Dataset files are missing, malformed or inconsistent."""


class CheckpointError(SparseKitError, ValueError):
    """Checkpoint bytes are malformed or fail the CRC check."""


class TrainingDivergedError(SparseKitError, RuntimeError):
    """The training loss became non-finite."""

    def __init__(self, step: int, message: str) -> None:
        super().__init__(f"step {step}: {message}")
        self.step = step


class CaptureError(SparseKitError, ValueError):
    """A run cannot provide the snapshot that was requested."""


class MaskViolationError(SparseKitError, RuntimeError):
    """A frozen mask changed or a masked weight became non-zero."""
