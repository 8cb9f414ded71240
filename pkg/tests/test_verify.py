"""Tests for the property checks behind ``sparsekit verify``."""

from __future__ import annotations

import math
from pathlib import Path
from types import SimpleNamespace
from typing import Any
from unittest.mock import patch

import pytest

from sparsekit import data, verify
from sparsekit.config import SparseKitConfig, build_config
from sparsekit.data import Dataset
from sparsekit.errors import TrainingDivergedError
from sparsekit.models import ModelSpec
from sparsekit.verify import (
    accounting_checks,
    dominance_checks,
    dominance_config,
    hard_concrete_checks,
    kl_checks,
    quick_checks,
    reproduction_config,
    run_verify,
)


class TestQuickChecks:
    """Test the data-free checks."""

    def test_hard_concrete(self) -> None:
        results = hard_concrete_checks(seed=0)
        assert len(results) == 3
        assert all(r["passed"] for r in results), results

    def test_kl(self) -> None:
        results = kl_checks()
        assert all(r["passed"] for r in results), results

    def test_accounting(self) -> None:
        results = accounting_checks()
        assert results[0]["value"] == 532_400
        assert all(r["passed"] for r in results)

    def test_quick_checks_names_unique(self) -> None:
        names = [r["name"] for r in quick_checks()]
        assert len(names) == len(set(names))


class TestReproduction:
    """Test reproduction configuration and data gating."""

    def test_reproduction_config(self) -> None:
        config = reproduction_config("lenet5")
        assert config.train.model == "lenet5"
        assert config.train.method == "vd"
        assert config.data.dataset == "mnist"
        assert config.vd.threshold == 3.0

    def test_keeps_base_data_root(self, tmp_path: Path) -> None:
        base = build_config({"data.root": str(tmp_path)})
        assert reproduction_config("lenet300", base).data.root == str(tmp_path)

    def test_skips_without_data_root(self, monkeypatch: pytest.MonkeyPatch) -> None:
        monkeypatch.delenv(data.DATA_ENV, raising=False)
        results = run_verify()
        assert [r["name"] for r in results] == [r["name"] for r in quick_checks()]

    def test_skips_without_mnist_files(self, tmp_path: Path) -> None:
        results = run_verify(build_config({"data.root": str(tmp_path)}))
        assert len(results) == len(quick_checks())


SYNTHETIC = {
    "data.dataset": "synthetic",
    "data.synthetic_train": "40",
    "data.synthetic_test": "20",
    "train.batch_size": "10",
    "train.steps": "6",
    "train.log_every": "3",
    "prune.start_step": "0",
    "prune.end_step": "4",
    "prune.frequency": "2",
}


def _fake_train(accuracy: dict[str, float], calls: list[tuple[str, float, int]]) -> Any:
    def _train(spec: ModelSpec, config: SparseKitConfig, *datasets: Dataset) -> Any:
        method = config.train.method
        calls.append((method, config.prune.final_sparsity, config.train.seed))
        if math.isnan(accuracy[method]):
            raise TrainingDivergedError(2, "loss is nan")
        return SimpleNamespace(record={"test_accuracy": accuracy[method]})

    return _train


class TestDominance:
    """Test the magnitude-against-random pruning comparison."""

    def test_runs_every_method_target_and_seed(self) -> None:
        calls: list[tuple[str, float, int]] = []
        fake = _fake_train({"magnitude": 0.9, "random": 0.8}, calls)
        with patch.object(verify, "train", side_effect=fake):
            results = dominance_checks(build_config(SYNTHETIC), targets=(0.5, 0.9), seeds=(0, 1))
        assert [r["name"] for r in results] == [
            "magnitude >= random @ 0.5",
            "magnitude >= random @ 0.9",
        ]
        assert all(r["passed"] for r in results)
        assert results[0]["value"] == pytest.approx(0.1)
        assert sorted(calls) == sorted(
            (method, target, seed)
            for method in ("magnitude", "random")
            for target in (0.5, 0.9)
            for seed in (0, 1)
        )

    def test_random_ahead_fails(self) -> None:
        fake = _fake_train({"magnitude": 0.7, "random": 0.8}, [])
        with patch.object(verify, "train", side_effect=fake):
            (result,) = dominance_checks(build_config(SYNTHETIC), targets=(0.7,), seeds=(0,))
        assert not result["passed"]

    def test_diverged_run_fails_its_target(self) -> None:
        fake = _fake_train({"magnitude": math.nan, "random": 0.8}, [])
        with patch.object(verify, "train", side_effect=fake):
            (result,) = dominance_checks(build_config(SYNTHETIC), targets=(0.9,), seeds=(0,))
        assert not result["passed"]

    def test_real_runs(self) -> None:
        (result,) = dominance_checks(build_config(SYNTHETIC), targets=(0.5,), seeds=(0,))
        assert result["name"] == "magnitude >= random @ 0.5"
        assert -1.0 <= result["value"] <= 1.0

    def test_dominance_config(self, tmp_path: Path) -> None:
        base = build_config({"data.root": str(tmp_path)})
        config = dominance_config(base)
        assert config.train.model == "lenet300"
        assert config.data.dataset == "mnist"
        assert config.data.root == str(tmp_path)
        assert config.train.method == "none"
