"""Command-line interface for sparsekit."""

from __future__ import annotations

import asyncio
import json
import os
import sys
from collections.abc import Callable
from pathlib import Path
from typing import Any, TypeVar

import click
from loguru import logger
from pydantic import ValidationError

from sparsekit.errors import CaptureError, ConfigError, DatasetError, SparseKitError

EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

F = TypeVar("F", bound=Callable[..., Any])


class SparseKitGroup(click.Group):
    """Click group mapping usage and validation errors to exit 1, runtime errors to 2."""

    def main(self, *args: Any, **kwargs: Any) -> Any:
        kwargs.pop("standalone_mode", None)
        try:
            return super().main(*args, standalone_mode=False, **kwargs)
        except click.UsageError as e:
            e.show()
            sys.exit(EXIT_VALIDATION)
        except click.ClickException as e:
            e.show()
            sys.exit(e.exit_code)
        except click.Abort:
            click.echo("Aborted!", err=True)
            sys.exit(EXIT_VALIDATION)
        except (ConfigError, DatasetError, CaptureError, ValidationError, FileNotFoundError) as e:
            logger.error(str(e))
            sys.exit(EXIT_VALIDATION)
        except SparseKitError as e:
            logger.error(f"{type(e).__name__}: {e}")
            sys.exit(EXIT_RUNTIME)


def _run_options(func: F) -> F:
    """``--config``, ``--set``, ``--out`` and ``--seed``."""
    func = click.option("--seed", type=int, default=None, help="Override train.seed.")(func)
    func = click.option(
        "--out",
        "out_dir",
        type=click.Path(file_okay=False, path_type=Path),
        default=Path("runs"),
        show_default=True,
        help="Output directory.",
    )(func)
    func = click.option(
        "--set",
        "sets",
        multiple=True,
        metavar="KEY=VALUE",
        help="Override a config key (repeatable).",
    )(func)
    func = click.option(
        "--config",
        "config_path",
        type=click.Path(dir_okay=False, path_type=Path),
        default=None,
        help="Flat key = value config file.",
    )(func)
    return func


def _echo_json(payload: Any) -> None:
    click.echo(json.dumps(payload, indent=2, default=str))


@click.group(cls=SparseKitGroup)
@click.option("--verbose", "-v", is_flag=True, help="Enable debug logging.")
def cli(verbose: bool) -> None:
    """sparsekit: sparsify small networks and compare the results."""
    level = "DEBUG" if verbose else "INFO"
    logger.remove()
    logger.add(sys.stderr, level=level, format="{time:HH:mm:ss} | {level:<7} | {message}")


@cli.command()
@_run_options
@click.option("--json-output", "-j", "as_json", is_flag=True, help="Output as JSON.")
def train(
    config_path: Path | None,
    sets: tuple[str, ...],
    out_dir: Path,
    seed: int | None,
    as_json: bool,
) -> None:
    """Train one configuration and write its checkpoint and record.

    Examples:

        sparsekit train --set train.method=vd --set train.epochs=50

        sparsekit train --config magnitude.cfg --seed 3 --out runs/mp
    """
    from sparsekit.config import load_config
    from sparsekit.training import load_datasets, model_spec
    from sparsekit.training import train as train_model

    config = load_config(config_path, sets, seed)
    train_data, test_data = load_datasets(config)
    run = train_model(model_spec(config), config, train_data, test_data, out_dir=out_dir)
    summary = {key: value for key, value in run.record.items() if key != "logs"}

    if as_json:
        _echo_json(summary)
        return
    for key, value in summary.items():
        click.echo(f"{key}: {value}")


@cli.command()
@_run_options
@click.option("--workers", type=int, default=None, help="Worker processes (sweep.workers).")
def sweep(
    config_path: Path | None,
    sets: tuple[str, ...],
    out_dir: Path,
    seed: int | None,
    workers: int | None,
) -> None:
    """Run every point of a comma-separated config grid.

    Examples:

        sparsekit sweep --set train.method=magnitude --set prune.final_sparsity=0.5,0.9

        sparsekit sweep --config grid.cfg --workers 4 --out runs/grid
    """
    from sparsekit.config import load_raw
    from sparsekit.sweep import run_sweep

    if workers is not None and workers < 1:
        raise click.BadParameter(f"--workers must be >= 1, got {workers}")
    writer = run_sweep(load_raw(config_path, sets, seed), out_dir, workers=workers)
    click.echo(f"Sweep rows: {writer.path}")


def _run_harness(raw: dict[str, str], out_dir: Path) -> None:
    from sparsekit.config import build_config
    from sparsekit.harness import ExperimentPlan, compare, run_from_checkpoint, run_protocol
    from sparsekit.models import PRUNING_METHODS
    from sparsekit.reporting import to_csv
    from sparsekit.training import load_datasets, model_spec

    config = build_config(raw)
    if config.harness.base_checkpoint is None and config.train.method not in PRUNING_METHODS:
        raise ConfigError(f"base runs need a pruning method, got {config.train.method!r}")
    train_data, test_data = load_datasets(config)

    if config.harness.base_checkpoint is not None:
        path = Path(config.harness.base_checkpoint)
        plan = ExperimentPlan.from_config(config, base_run=str(path))
        results, baselines = run_from_checkpoint(
            config, path, train_data, test_data, plan=plan, out_dir=out_dir
        )
    else:
        plan = ExperimentPlan.from_config(config)
        results, baselines = run_protocol(
            config, model_spec(config), train_data, test_data, plan=plan, out_dir=out_dir
        )

    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "plan": plan.model_dump(mode="json"),
        "results": [{k: v for k, v in r.items() if k != "record"} for r in results],
    }
    (out_dir / "harness.json").write_text(json.dumps(payload, indent=2, default=str))
    rows = compare(results, baselines)
    header = ("variant", "sparsity", "n", "failed", "mean", "min", "max", "baseline", "gap")
    click.echo(to_csv(rows, header), nl=False)


@cli.command()
@_run_options
def lottery(
    config_path: Path | None,
    sets: tuple[str, ...],
    out_dir: Path,
    seed: int | None,
) -> None:
    """Retrain pruned masks from the base run's original initialization.

    Examples:

        sparsekit lottery --set train.method=magnitude --set prune.final_sparsity=0.9

        sparsekit lottery --set harness.base_checkpoint=runs/mp/model.sprs
    """
    from sparsekit.config import load_raw

    raw = load_raw(config_path, sets, seed)
    raw.update({"harness.variant": "lottery", "harness.reinit": "original-init"})
    _run_harness(raw, out_dir)


@cli.command()
@_run_options
@click.option(
    "--variant",
    type=click.Choice(["scratch-e", "scratch-b"]),
    default="scratch-e",
    show_default=True,
    help="Training budget: base steps or twice as many.",
)
def scratch(
    config_path: Path | None,
    sets: tuple[str, ...],
    out_dir: Path,
    seed: int | None,
    variant: str,
) -> None:
    """Retrain pruned masks from a fresh initialization.

    Examples:

        sparsekit scratch --set train.method=magnitude --set harness.reinit=fresh-nnz-scaled

        sparsekit scratch --variant scratch-b --set harness.lr_scheme=scaled-regions
    """
    from sparsekit.config import load_raw

    raw = load_raw(config_path, sets, seed)
    raw["harness.variant"] = variant
    raw.setdefault("harness.reinit", "fresh-standard")
    _run_harness(raw, out_dir)


@cli.command()
@click.option(
    "--frontier",
    "sweep_csv",
    type=click.Path(dir_okay=False, path_type=Path),
    default=None,
    help="Pareto frontier per method from a sweep CSV.",
)
@click.option(
    "--rows",
    "rows_csv",
    type=click.Path(dir_okay=False, path_type=Path),
    default=None,
    help="All rows of a sweep CSV.",
)
@click.option(
    "--distribution",
    "checkpoint",
    type=click.Path(dir_okay=False, path_type=Path),
    default=None,
    help="Per-layer sparsity of a checkpoint.",
)
@click.option(
    "--flops",
    "record",
    type=click.Path(dir_okay=False, path_type=Path),
    default=None,
    help="Expected-FLOPs series of a record.json.",
)
def report(
    sweep_csv: Path | None,
    rows_csv: Path | None,
    checkpoint: Path | None,
    record: Path | None,
) -> None:
    """Emit CSV series for frontiers, sweep rows, layer sparsity or FLOPs.

    Examples:

        sparsekit report --frontier runs/grid/sweep.csv

        sparsekit report --distribution runs/vd/model.sprs
    """
    from sparsekit.checkpoint import load_checkpoint
    from sparsekit.reporting import (
        SWEEP_HEADER,
        distribution_csv,
        flops_series_csv,
        frontier_csv,
        read_sweep_rows,
        sparsity_distribution_report,
        to_csv,
    )

    chosen = [opt for opt in (sweep_csv, rows_csv, checkpoint, record) if opt is not None]
    if len(chosen) != 1:
        raise click.UsageError("choose exactly one of --frontier, --rows, --distribution, --flops")

    if sweep_csv is not None:
        click.echo(frontier_csv(read_sweep_rows(sweep_csv)), nl=False)
    elif rows_csv is not None:
        click.echo(to_csv(read_sweep_rows(rows_csv), SWEEP_HEADER), nl=False)
    elif checkpoint is not None:
        ckpt = load_checkpoint(checkpoint)
        click.echo(distribution_csv(sparsity_distribution_report(ckpt)), nl=False)
    elif record is not None:
        if not record.is_file():
            raise FileNotFoundError(f"record not found: {record}")
        click.echo(flops_series_csv(json.loads(record.read_text())), nl=False)


@cli.command()
@click.option(
    "--config",
    "config_path",
    type=click.Path(dir_okay=False, path_type=Path),
    default=None,
    help="Base config for the reproduction runs.",
)
@click.option("--set", "sets", multiple=True, metavar="KEY=VALUE", help="Override a key.")
@click.option("--seed", type=int, default=None, help="Override train.seed.")
@click.option("--lenet5", is_flag=True, help="Also run the LeNet-5 reproduction.")
@click.option("--json-output", "-j", "as_json", is_flag=True, help="Output as JSON.")
def verify(
    config_path: Path | None,
    sets: tuple[str, ...],
    seed: int | None,
    lenet5: bool,
    as_json: bool,
) -> None:
    """Property checks, plus MNIST reproductions when the data is present.

    Exits with status 2 when any check fails.

    Examples:

        sparsekit verify

        SPARSEKIT_DATA=~/data/mnist sparsekit verify --lenet5
    """
    from sparsekit.config import load_config
    from sparsekit.verify import run_verify

    config = load_config(config_path, sets, seed)
    results = run_verify(config, lenet5=lenet5, seed=config.train.seed)

    if as_json:
        _echo_json(results)
    else:
        for r in results:
            status = "PASS" if r["passed"] else "FAIL"
            click.echo(f"{status}  {r['name']}: {r['value']:.6g} (target {r['target']})")
    failed = [r["name"] for r in results if not r["passed"]]
    if failed:
        logger.error(f"{len(failed)} check(s) failed: {', '.join(failed)}")
        sys.exit(EXIT_RUNTIME)


@cli.command()
@click.option("--tolerance", type=float, default=1e-4, show_default=True, help="Max rel. error.")
@click.option(
    "--case",
    "cases",
    multiple=True,
    type=click.Choice(["dense", "masked", "vd", "l0"]),
    help="Cases to check (default: all).",
)
@click.option("--seed", type=int, default=0, show_default=True, help="Probe seed.")
def gradcheck(tolerance: float, cases: tuple[str, ...], seed: int) -> None:
    """Finite-difference gradient checks on a small toy network.

    Examples:

        sparsekit gradcheck

        sparsekit gradcheck --case vd --case l0 --tolerance 1e-5
    """
    from sparsekit.gradcheck import SUITE_CASES, gradient_suite

    reports = gradient_suite(tolerance=tolerance, seed=seed, cases=cases or tuple(SUITE_CASES))
    for r in reports:
        status = "PASS" if r["passed"] else "FAIL"
        click.echo(f"{status}  {r['case']}: max relative error {r['max_rel_error']:.2e}")
        for p in r["parameters"]:
            click.echo(f"    {p['name']}: {p['max_rel_error']:.2e} ({p['checked']} entries)")
    failed = [r["case"] for r in reports if not r["passed"]]
    if failed:
        logger.error(f"gradcheck failed for: {', '.join(failed)}")
        sys.exit(EXIT_RUNTIME)


@cli.command("fetch-mnist")
@click.option(
    "--root",
    type=click.Path(file_okay=False, path_type=Path),
    default=None,
    help="Target directory (default: $SPARSEKIT_DATA).",
)
@click.option("--mirror", default=None, help="Base URL holding the four IDX archives.")
def fetch_mnist(root: Path | None, mirror: str | None) -> None:
    """Download the MNIST IDX archives.

    Examples:

        sparsekit fetch-mnist --root ~/data/mnist
    """
    from sparsekit.data import DATA_ENV, DEFAULT_MIRROR, download_mnist

    target = root or (Path(os.environ[DATA_ENV]) if os.environ.get(DATA_ENV) else None)
    if target is None:
        raise DatasetError(f"no target directory: pass --root or set ${DATA_ENV}")
    results = asyncio.run(download_mnist(target, mirror=mirror or DEFAULT_MIRROR))
    for name, path in results.items():
        click.echo(f"{name}: {path or 'FAILED'}")
    if any(path is None for path in results.values()):
        logger.error("Some MNIST files could not be downloaded")
        sys.exit(EXIT_RUNTIME)
