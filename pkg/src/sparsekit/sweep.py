"""Grid sweeps over flat config keys.

Every comma-separated value in the raw config is a grid axis. Each grid
point trains in its own output directory, optionally in a worker process;
rows come back to the parent, which is the only process writing the CSV.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path

from loguru import logger

from sparsekit.config import SparseKitConfig, build_config, config_hash, expand_grid
from sparsekit.errors import TrainingDivergedError
from sparsekit.reporting import SweepRow, SweepWriter, row_from_record
from sparsekit.training import load_datasets, model_spec, threshold_sweep, train


@dataclass(frozen=True)
class SweepJob:
    raw: dict[str, str]
    config: SparseKitConfig
    config_hash: str
    out_dir: Path

    @property
    def seed(self) -> int:
        return self.config.train.seed


def plan_sweep(raw: dict[str, str], out_dir: Path) -> list[SweepJob]:
    """Expand and validate every grid point before anything trains."""
    jobs: list[SweepJob] = []
    for point in expand_grid(raw):
        config = build_config(point)
        digest = config_hash(config)
        run_dir = out_dir / "runs" / f"{digest[:12]}-s{config.train.seed}"
        jobs.append(SweepJob(raw=point, config=config, config_hash=digest, out_dir=run_dir))
    return jobs


def _failed_row(config: SparseKitConfig, digest: str, error: TrainingDivergedError) -> SweepRow:
    return {
        "method": config.train.method,
        "target_sparsity": None,
        "train_sparsity": math.nan,
        "test_sparsity": math.nan,
        "test_accuracy": math.nan,
        "coefficient": math.nan,
        "threshold": None,
        "seed": config.train.seed,
        "steps": error.step,
        "wall_clock": 0.0,
        "config_hash": digest,
    }


def run_job(raw: dict[str, str], out_dir: str) -> list[SweepRow]:
    """Train one grid point; variational-dropout runs yield a row per threshold.

    Takes plain values so it can run in a worker process.
    """
    config = build_config(raw)
    train_data, test_data = load_datasets(config)
    spec = model_spec(config)
    try:
        run = train(spec, config, train_data, test_data, out_dir=Path(out_dir))
    except TrainingDivergedError as e:
        logger.warning(f"Sweep point {raw} diverged at step {e.step}; recording a failed row")
        return [_failed_row(config, config_hash(config), e)]

    if spec.method != "vd" or not config.vd.thresholds:
        return [row_from_record(run.record)]
    rows: list[SweepRow] = []
    for result in threshold_sweep(
        run.model,
        test_data,
        config.vd.thresholds,
        batch_size=config.train.eval_batch_size,
        workers=config.train.eval_workers,
    ):
        row = row_from_record(run.record, threshold=result["threshold"])
        row["test_sparsity"] = result["sparsity"]
        row["test_accuracy"] = result["accuracy"]
        rows.append(row)
    return rows


def run_sweep(raw: dict[str, str], out_dir: Path, *, workers: int | None = None) -> SweepWriter:
    """Run every grid point not already in the CSV and append its rows."""
    jobs = plan_sweep(raw, out_dir)
    if not jobs:
        raise ValueError("sweep expanded to no runs")
    settings = jobs[0].config.sweep
    writer = SweepWriter(out_dir / settings.csv)
    n_workers = workers or settings.workers

    pending = [job for job in jobs if (job.config_hash, str(job.seed), "") not in writer]
    pending = [job for job in pending if not _has_threshold_rows(writer, job)]
    skipped = len(jobs) - len(pending)
    if skipped:
        logger.info(f"Skipping {skipped} grid point(s) already in {writer.path}")
    logger.info(f"Sweep: {len(pending)} run(s) on {n_workers} worker(s)")

    if n_workers <= 1:
        for index, job in enumerate(pending, start=1):
            _record(writer, run_job(job.raw, str(job.out_dir)))
            logger.info(f"Sweep progress: {index}/{len(pending)}")
        return writer

    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        futures = [pool.submit(run_job, job.raw, str(job.out_dir)) for job in pending]
        for index, future in enumerate(as_completed(futures), start=1):
            _record(writer, future.result())
            logger.info(f"Sweep progress: {index}/{len(pending)}")
    return writer


def _has_threshold_rows(writer: SweepWriter, job: SweepJob) -> bool:
    if job.config.train.method != "vd" or not job.config.vd.thresholds:
        return False
    return all(
        (job.config_hash, str(job.seed), str(float(t))) in writer
        for t in job.config.vd.thresholds
    )


def _record(writer: SweepWriter, rows: list[SweepRow]) -> None:
    for row in rows:
        writer.append(row)
