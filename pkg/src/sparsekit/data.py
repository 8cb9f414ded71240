"""Datasets: MNIST IDX files, an optional downloader, and synthetic blobs.

Images are held as ``[N, C, H, W]`` float32 arrays scaled to ``[0, 1]``;
labels are int64.
"""

from __future__ import annotations

import asyncio
import gzip
import math
import os
from collections.abc import Iterator
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import httpx
import numpy as np
from loguru import logger

from sparsekit.errors import DatasetError
from sparsekit.rng import STREAM_DATA, RngState

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

DATA_ENV = "SPARSEKIT_DATA"
DEFAULT_MIRROR = "https://storage.googleapis.com/cvdf-datasets/mnist/"
_DOWNLOAD_TIMEOUT = 120.0  # Per-file timeout in seconds

MNIST_FILES: dict[str, tuple[str, str]] = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    split: str
    num_classes: int = 10

    def __post_init__(self) -> None:
        if self.images.ndim != 4:
            raise DatasetError(f"images must be [N, C, H, W], got {self.images.shape}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise DatasetError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def subset(self, count: int) -> Dataset:
        """First ``count`` samples (evaluation order is fixed)."""
        return Dataset(self.images[:count], self.labels[:count], self.split, self.num_classes)


def batches(
    dataset: Dataset,
    batch_size: int,
    gen: np.random.Generator | None = None,
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(images, labels)`` minibatches; shuffled when ``gen`` is given."""
    if batch_size < 1:
        raise ValueError(f"batch size must be >= 1, got {batch_size}")
    order = gen.permutation(len(dataset)) if gen is not None else np.arange(len(dataset))
    for start in range(0, len(dataset), batch_size):
        index = order[start : start + batch_size]
        yield dataset.images[index], dataset.labels[index]


# ---------------------------------------------------------------------------
# IDX files
# ---------------------------------------------------------------------------


def _read_bytes(path: Path) -> bytes:
    if not path.is_file():
        raise DatasetError(f"missing dataset file: {path}")
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            return gzip.decompress(raw)
        except (OSError, EOFError) as e:
            raise DatasetError(f"{path}: corrupt gzip stream: {e}") from e
    return raw


def _parse_idx(raw: bytes, magic: int, rank: int, path: Path) -> np.ndarray:
    header = 4 * (1 + rank)
    if len(raw) < header:
        raise DatasetError(f"{path}: truncated header")
    words = np.frombuffer(raw[:header], dtype=">u4")
    if int(words[0]) != magic:
        raise DatasetError(f"{path}: bad magic 0x{int(words[0]):08x}, expected 0x{magic:08x}")
    dims = tuple(int(d) for d in words[1:])
    expected = math.prod(dims)
    if len(raw) - header < expected:
        raise DatasetError(f"{path}: truncated payload ({len(raw) - header} < {expected} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=expected, offset=header).reshape(dims)


def load_mnist_idx(
    images_path: str | Path,
    labels_path: str | Path,
    split: str = "train",
) -> Dataset:
    """Read an IDX image/label pair (raw or gzip) into a :class:`Dataset`."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    pixels = _parse_idx(_read_bytes(images_path), IMAGES_MAGIC, 3, images_path)
    labels = _parse_idx(_read_bytes(labels_path), LABELS_MAGIC, 1, labels_path)
    if pixels.shape[0] != labels.shape[0]:
        raise DatasetError(
            f"count mismatch: {pixels.shape[0]} images vs {labels.shape[0]} labels"
        )
    images = (pixels.astype(np.float32) / 255.0)[:, None, :, :]
    logger.debug(f"Loaded {split} split: {pixels.shape[0]} samples from {images_path.name}")
    return Dataset(images, labels.astype(np.int64), split)


def _locate(root: Path, stem: str) -> Path:
    for candidate in (root / stem, root / f"{stem}.gz"):
        if candidate.is_file():
            return candidate
    raise DatasetError(f"missing dataset file {stem}[.gz] under {root}")


def resolve_data_root(configured: str | None = None) -> Path:
    """Data root from the config, then ``$SPARSEKIT_DATA``."""
    root = configured or os.environ.get(DATA_ENV)
    if not root:
        raise DatasetError(f"no data root: set data.root or ${DATA_ENV}")
    path = Path(root).expanduser()
    if not path.is_dir():
        raise DatasetError(f"data root {path} is not a directory")
    return path


def mnist_available(root: Path) -> bool:
    try:
        for split in MNIST_FILES.values():
            for stem in split:
                _locate(root, stem)
    except DatasetError:
        return False
    return True


def load_mnist(root: Path, split: str) -> Dataset:
    if split not in MNIST_FILES:
        raise DatasetError(f"unknown split {split!r}")
    images_stem, labels_stem = MNIST_FILES[split]
    return load_mnist_idx(_locate(root, images_stem), _locate(root, labels_stem), split)


# ---------------------------------------------------------------------------
# Download
# ---------------------------------------------------------------------------


async def _with_timeout(coro: Any, timeout: float = _DOWNLOAD_TIMEOUT) -> Any:
    """Wrap a coroutine with a timeout, returning the error on timeout."""
    try:
        return await asyncio.wait_for(coro, timeout=timeout)
    except asyncio.TimeoutError:
        return TimeoutError(f"timed out after {timeout}s")


async def _fetch_file(client: httpx.AsyncClient, url: str, target: Path) -> Path | None:
    try:
        response = await client.get(url)
        response.raise_for_status()
    except (httpx.HTTPError, ConnectionError, TimeoutError) as e:
        logger.warning(f"Download failed for {url}: {e}")
        return None
    target.write_bytes(response.content)
    logger.info(f"Downloaded {target.name} ({len(response.content)} bytes)")
    return target


async def download_mnist(
    root: Path,
    *,
    mirror: str = DEFAULT_MIRROR,
    timeout: float = _DOWNLOAD_TIMEOUT,
    transport: httpx.AsyncBaseTransport | None = None,
) -> dict[str, Path | None]:
    """Fetch the four gzip IDX archives into ``root`` concurrently.

    Files already present are skipped. Returns the local path of every
    archive, or ``None`` for archives that failed to download.
    """
    root.mkdir(parents=True, exist_ok=True)
    base = mirror if mirror.endswith("/") else f"{mirror}/"
    results: dict[str, Path | None] = {}
    pending: dict[str, Any] = {}
    async with httpx.AsyncClient(transport=transport, follow_redirects=True) as client:
        for pair in MNIST_FILES.values():
            for stem in pair:
                name = f"{stem}.gz"
                target = root / name
                if target.is_file():
                    logger.debug(f"{name} already present, skipping")
                    results[name] = target
                    continue
                pending[name] = _with_timeout(_fetch_file(client, base + name, target), timeout)
        keys = list(pending)
        gathered = await asyncio.gather(*pending.values(), return_exceptions=True)
    for name, outcome in zip(keys, gathered, strict=True):
        if isinstance(outcome, BaseException):
            logger.warning(f"{name}: {outcome}")
            results[name] = None
        else:
            results[name] = outcome
    return results


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

_BLOB_LIFT = 0.3
_NOISE_STD = 0.05
_NOISE_NORM = 0.8


def synthetic_classification(
    n: int,
    classes: int,
    seed: int,
    *,
    sample_shape: tuple[int, int, int] = (1, 28, 28),
    split: str = "synthetic",
) -> Dataset:
    """Well-separated Gaussian blobs, deterministic per ``seed``.

    Class ``k`` lifts its own block of pixels above a grey baseline; noise
    is norm-clipped so every sample stays inside its class's cell.
    Labels are stratified: each class gets ``n // classes`` or one more.
    """
    if classes < 2:
        raise DatasetError(f"need at least 2 classes, got {classes}")
    if n < classes:
        raise DatasetError(f"need n >= classes, got n={n}, classes={classes}")
    pixels = math.prod(sample_shape)
    block = pixels // classes
    if block == 0:
        raise DatasetError(f"{classes} classes do not fit in {pixels} pixels")

    gen = RngState(seed, STREAM_DATA).generator()
    centers = np.full((classes, pixels), 0.5)
    for k in range(classes):
        centers[k, k * block : (k + 1) * block] += _BLOB_LIFT

    labels = gen.permutation(np.arange(n) % classes).astype(np.int64)
    noise = gen.normal(0.0, _NOISE_STD, size=(n, pixels))
    norms = np.linalg.norm(noise, axis=1, keepdims=True)
    noise *= np.minimum(1.0, _NOISE_NORM / np.maximum(norms, 1e-12))
    images = np.clip(centers[labels] + noise, 0.0, 1.0).astype(np.float32)
    return Dataset(images.reshape(n, *sample_shape), labels, split, num_classes=classes)
