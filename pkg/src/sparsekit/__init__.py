"""sparsekit: sparsification methods for small neural networks.

Magnitude pruning, random pruning, sparse variational dropout and L0
regularization with hard-concrete gates, a lottery-ticket and
train-from-scratch retraining harness, and sweep and report tooling.
"""

from sparsekit.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from sparsekit.config import SparseKitConfig, load_config
from sparsekit.errors import SparseKitError
from sparsekit.flops import count_flops
from sparsekit.harness import ExperimentPlan, compare, run_protocol, run_variant
from sparsekit.models import Model, ModelSpec, build_lenet5, build_lenet300, build_model
from sparsekit.reporting import SweepRow, pareto_frontier, sparsity_distribution_report
from sparsekit.training import TrainingRecord, evaluate, train

__all__ = [
    "Checkpoint",
    "ExperimentPlan",
    "Model",
    "ModelSpec",
    "SparseKitConfig",
    "SparseKitError",
    "SweepRow",
    "TrainingRecord",
    "build_lenet300",
    "build_lenet5",
    "build_model",
    "compare",
    "count_flops",
    "evaluate",
    "load_checkpoint",
    "load_config",
    "pareto_frontier",
    "run_protocol",
    "run_variant",
    "save_checkpoint",
    "sparsity_distribution_report",
    "train",
]

__version__ = "0.1.0"
