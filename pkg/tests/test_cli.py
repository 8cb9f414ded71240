"""Tests for sparsekit CLI."""

from __future__ import annotations

from pathlib import Path
from unittest.mock import patch

import pytest
from click.testing import CliRunner

from sparsekit import data
from sparsekit.cli import cli
from sparsekit.reporting import SWEEP_HEADER, SweepWriter

SMALL = (
    "data.dataset=synthetic",
    "data.synthetic_train=40",
    "data.synthetic_test=20",
    "train.method=magnitude",
    "train.batch_size=10",
    "train.steps=6",
    "train.log_every=3",
    "prune.start_step=0",
    "prune.end_step=4",
    "prune.frequency=2",
    "prune.final_sparsity=0.5",
)


def _sets(*extra: str) -> list[str]:
    args: list[str] = []
    for item in (*SMALL, *extra):
        args += ["--set", item]
    return args


class TestCliHelp:
    """Test CLI help output."""

    def test_main_help(self) -> None:
        runner = CliRunner()
        result = runner.invoke(cli, ["--help"])
        assert result.exit_code == 0
        assert "sparsify small networks" in result.output

    @pytest.mark.parametrize(
        "command",
        ["train", "sweep", "lottery", "scratch", "report", "verify", "gradcheck", "fetch-mnist"],
    )
    def test_command_help(self, command: str) -> None:
        runner = CliRunner()
        result = runner.invoke(cli, [command, "--help"])
        assert result.exit_code == 0
        assert "Examples" in result.output


class TestCliValidation:
    """Test exit status 1 for bad input."""

    def test_missing_config_file(self, tmp_path: Path) -> None:
        runner = CliRunner()
        result = runner.invoke(cli, ["train", "--config", str(tmp_path / "missing.cfg")])
        assert result.exit_code == 1

    def test_bad_value(self) -> None:
        runner = CliRunner()
        result = runner.invoke(cli, ["train", "--set", "train.lr=-1"])
        assert result.exit_code == 1

    def test_unknown_option(self) -> None:
        runner = CliRunner()
        result = runner.invoke(cli, ["train", "--bogus"])
        assert result.exit_code == 1

    def test_report_needs_one_source(self) -> None:
        runner = CliRunner()
        result = runner.invoke(cli, ["report"])
        assert result.exit_code == 1

    def test_report_missing_record(self, tmp_path: Path) -> None:
        runner = CliRunner()
        result = runner.invoke(cli, ["report", "--flops", str(tmp_path / "record.json")])
        assert result.exit_code == 1

    def test_scratch_needs_pruning_base(self, tmp_path: Path) -> None:
        runner = CliRunner()
        args = ["scratch", "--out", str(tmp_path), *_sets("train.method=none")]
        result = runner.invoke(cli, args)
        assert result.exit_code == 1

    def test_fetch_needs_root(self, monkeypatch: pytest.MonkeyPatch) -> None:
        monkeypatch.delenv(data.DATA_ENV, raising=False)
        runner = CliRunner()
        result = runner.invoke(cli, ["fetch-mnist"])
        assert result.exit_code == 1


class TestCliTrain:
    """Test CLI train and report commands."""

    def test_train_json_and_distribution(self, tmp_path: Path) -> None:
        runner = CliRunner()
        result = runner.invoke(cli, ["train", "--out", str(tmp_path), "-j", *_sets()])
        assert result.exit_code == 0
        assert '"method": "magnitude"' in result.output
        assert (tmp_path / "model.sprs").is_file()

        result = runner.invoke(cli, ["report", "--distribution", str(tmp_path / "model.sprs")])
        assert result.exit_code == 0
        assert "layer,size,nonzeros,sparsity" in result.output
        assert "global," in result.output

    def test_lottery(self, tmp_path: Path) -> None:
        runner = CliRunner()
        result = runner.invoke(cli, ["lottery", "--out", str(tmp_path), *_sets()])
        assert result.exit_code == 0
        assert "variant,sparsity,n,failed,mean,min,max,baseline,gap" in result.output
        assert (tmp_path / "harness.json").is_file()


class TestCliReport:
    """Test CLI report command."""

    def test_frontier(self, tmp_path: Path) -> None:
        path = tmp_path / "sweep.csv"
        writer = SweepWriter(path)
        writer.append(
            {
                "method": "magnitude",
                "target_sparsity": 0.5,
                "train_sparsity": 0.5,
                "test_sparsity": 0.5,
                "test_accuracy": 0.9,
                "coefficient": 0.0,
                "threshold": None,
                "seed": 0,
                "steps": 10,
                "wall_clock": 1.0,
                "config_hash": "h0",
            }
        )
        runner = CliRunner()
        result = runner.invoke(cli, ["report", "--frontier", str(path)])
        assert result.exit_code == 0
        assert ",".join(SWEEP_HEADER) in result.output
        assert "magnitude,0.5" in result.output


class TestCliChecks:
    """Test CLI gradcheck and verify commands."""

    def test_gradcheck_dense(self) -> None:
        runner = CliRunner()
        result = runner.invoke(cli, ["gradcheck", "--case", "dense"])
        assert result.exit_code == 0
        assert "PASS  dense" in result.output

    @patch(
        "sparsekit.gradcheck.gradient_suite",
        return_value=[{"case": "dense", "passed": False, "max_rel_error": 0.5, "parameters": []}],
    )
    def test_gradcheck_failure(self, mock_suite: object) -> None:
        runner = CliRunner()
        result = runner.invoke(cli, ["gradcheck"])
        assert result.exit_code == 2
        assert "FAIL  dense" in result.output

    @patch(
        "sparsekit.verify.run_verify",
        return_value=[{"name": "KL at alpha 1", "passed": True, "value": 0.4312, "target": "x"}],
    )
    def test_verify_passes(self, mock_verify: object) -> None:
        runner = CliRunner()
        result = runner.invoke(cli, ["verify"])
        assert result.exit_code == 0
        assert "PASS  KL at alpha 1" in result.output

    @patch(
        "sparsekit.verify.run_verify",
        return_value=[{"name": "lenet300 sparsity", "passed": False, "value": 0.5, "target": "x"}],
    )
    def test_verify_failure(self, mock_verify: object) -> None:
        runner = CliRunner()
        result = runner.invoke(cli, ["verify", "-j"])
        assert result.exit_code == 2
        assert '"passed": false' in result.output
