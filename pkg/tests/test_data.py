"""Tests for datasets, IDX parsing and the MNIST downloader."""

from __future__ import annotations

import gzip
from pathlib import Path

import httpx
import numpy as np
import pytest

from sparsekit import data
from sparsekit.data import (
    IMAGES_MAGIC,
    LABELS_MAGIC,
    Dataset,
    batches,
    download_mnist,
    load_mnist,
    load_mnist_idx,
    mnist_available,
    resolve_data_root,
    synthetic_classification,
)
from sparsekit.errors import DatasetError
from sparsekit.rng import RngState


def _idx(magic: int, array: np.ndarray) -> bytes:
    header = np.array([magic, *array.shape], dtype=">u4").tobytes()
    return header + array.astype(np.uint8).tobytes()


def _write_split(root: Path, images_stem: str, labels_stem: str, *, gz: bool = False) -> None:
    pixels = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3) * 10
    labels = np.array([4, 7], dtype=np.uint8)
    for stem, payload in (
        (images_stem, _idx(IMAGES_MAGIC, pixels)),
        (labels_stem, _idx(LABELS_MAGIC, labels)),
    ):
        if gz:
            (root / f"{stem}.gz").write_bytes(gzip.compress(payload))
        else:
            (root / stem).write_bytes(payload)


class TestDataset:
    """Test dataset validation and batching."""

    def test_label_range(self) -> None:
        with pytest.raises(DatasetError, match="labels"):
            Dataset(np.zeros((2, 1, 2, 2)), np.array([0, 10]), "train")

    def test_count_mismatch(self) -> None:
        with pytest.raises(DatasetError):
            Dataset(np.zeros((2, 1, 2, 2)), np.array([0]), "train")

    def test_subset(self) -> None:
        ds = synthetic_classification(20, 4, seed=0)
        assert len(ds.subset(5)) == 5
        np.testing.assert_array_equal(ds.subset(5).labels, ds.labels[:5])

    def test_batches_cover_everything(self) -> None:
        ds = synthetic_classification(23, 2, seed=0, sample_shape=(1, 2, 2))
        gen = RngState(0, 1).generator()
        seen = [labels.shape[0] for _, labels in batches(ds, 10, gen)]
        assert seen == [10, 10, 3]

    def test_unshuffled_order(self) -> None:
        ds = synthetic_classification(6, 2, seed=0, sample_shape=(1, 2, 2))
        first, _ = next(batches(ds, 4))
        np.testing.assert_array_equal(first, ds.images[:4])

    def test_bad_batch_size(self) -> None:
        ds = synthetic_classification(4, 2, seed=0, sample_shape=(1, 2, 2))
        with pytest.raises(ValueError):
            next(batches(ds, 0))


class TestSyntheticClassification:
    """Test the synthetic blob generator."""

    def test_deterministic(self) -> None:
        a = synthetic_classification(50, 10, seed=3)
        b = synthetic_classification(50, 10, seed=3)
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_seeds_differ(self) -> None:
        a = synthetic_classification(50, 10, seed=0)
        b = synthetic_classification(50, 10, seed=1)
        assert not np.array_equal(a.images, b.images)

    def test_stratified_labels(self) -> None:
        ds = synthetic_classification(53, 10, seed=0)
        counts = np.bincount(ds.labels, minlength=10)
        assert counts.min() == 5
        assert counts.max() == 6

    def test_shape_and_range(self) -> None:
        ds = synthetic_classification(12, 3, seed=0)
        assert ds.images.shape == (12, 1, 28, 28)
        assert ds.images.dtype == np.float32
        assert ds.images.min() >= 0.0
        assert ds.images.max() <= 1.0
        assert ds.num_classes == 3

    def test_nearest_center_separates(self) -> None:
        ds = synthetic_classification(40, 4, seed=2, sample_shape=(1, 4, 4))
        flat = ds.images.reshape(40, -1)
        block_means = flat.reshape(40, 4, 4).mean(axis=2)
        np.testing.assert_array_equal(block_means.argmax(axis=1), ds.labels)

    def test_too_few_classes(self) -> None:
        with pytest.raises(DatasetError):
            synthetic_classification(10, 1, seed=0)


class TestIdx:
    """Test IDX parsing of raw and gzip files."""

    def test_raw_files(self, tmp_path: Path) -> None:
        _write_split(tmp_path, "imgs", "lbls")
        ds = load_mnist_idx(tmp_path / "imgs", tmp_path / "lbls")
        assert ds.images.shape == (2, 1, 3, 3)
        assert ds.images[0, 0, 0, 1] == pytest.approx(10 / 255)
        np.testing.assert_array_equal(ds.labels, [4, 7])

    def test_gzip_files(self, tmp_path: Path) -> None:
        _write_split(tmp_path, "imgs", "lbls", gz=True)
        ds = load_mnist_idx(tmp_path / "imgs.gz", tmp_path / "lbls.gz")
        assert len(ds) == 2

    def test_bad_magic(self, tmp_path: Path) -> None:
        _write_split(tmp_path, "imgs", "lbls")
        with pytest.raises(DatasetError, match="magic"):
            load_mnist_idx(tmp_path / "lbls", tmp_path / "imgs")

    def test_truncated_payload(self, tmp_path: Path) -> None:
        _write_split(tmp_path, "imgs", "lbls")
        raw = (tmp_path / "imgs").read_bytes()
        (tmp_path / "imgs").write_bytes(raw[:-4])
        with pytest.raises(DatasetError, match="truncated"):
            load_mnist_idx(tmp_path / "imgs", tmp_path / "lbls")

    def test_missing_file(self, tmp_path: Path) -> None:
        with pytest.raises(DatasetError, match="missing"):
            load_mnist_idx(tmp_path / "nope", tmp_path / "nope2")

    def test_load_mnist_layout(self, tmp_path: Path) -> None:
        for images_stem, labels_stem in data.MNIST_FILES.values():
            _write_split(tmp_path, images_stem, labels_stem, gz=True)
        assert mnist_available(tmp_path)
        assert len(load_mnist(tmp_path, "test")) == 2
        with pytest.raises(DatasetError, match="split"):
            load_mnist(tmp_path, "validation")

    def test_not_available(self, tmp_path: Path) -> None:
        assert not mnist_available(tmp_path)


class TestResolveDataRoot:
    """Test data root resolution."""

    def test_configured(self, tmp_path: Path) -> None:
        assert resolve_data_root(str(tmp_path)) == tmp_path

    def test_env(self, tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
        monkeypatch.setenv(data.DATA_ENV, str(tmp_path))
        assert resolve_data_root(None) == tmp_path

    def test_missing(self, monkeypatch: pytest.MonkeyPatch) -> None:
        monkeypatch.delenv(data.DATA_ENV, raising=False)
        with pytest.raises(DatasetError, match="no data root"):
            resolve_data_root(None)

    def test_not_a_directory(self, tmp_path: Path) -> None:
        with pytest.raises(DatasetError, match="not a directory"):
            resolve_data_root(str(tmp_path / "absent"))


class TestDownloadMnist:
    """Test the concurrent downloader against a mock transport."""

    async def test_downloads_all(self, tmp_path: Path) -> None:
        requested: list[str] = []

        def handler(request: httpx.Request) -> httpx.Response:
            requested.append(request.url.path)
            return httpx.Response(200, content=b"payload")

        results = await download_mnist(
            tmp_path, mirror="https://mirror.test/mnist", transport=httpx.MockTransport(handler)
        )
        assert len(results) == 4
        assert all(path is not None for path in results.values())
        assert (tmp_path / "t10k-labels-idx1-ubyte.gz").read_bytes() == b"payload"
        assert all(path.startswith("/mnist/") for path in requested)

    async def test_failure_reported_as_none(self, tmp_path: Path) -> None:
        def handler(request: httpx.Request) -> httpx.Response:
            if "t10k-images" in request.url.path:
                return httpx.Response(404)
            return httpx.Response(200, content=b"ok")

        results = await download_mnist(tmp_path, transport=httpx.MockTransport(handler))
        assert results["t10k-images-idx3-ubyte.gz"] is None
        assert results["train-images-idx3-ubyte.gz"] is not None
        assert not (tmp_path / "t10k-images-idx3-ubyte.gz").exists()

    async def test_existing_files_skipped(self, tmp_path: Path) -> None:
        (tmp_path / "train-labels-idx1-ubyte.gz").write_bytes(b"local")
        requested: list[str] = []

        def handler(request: httpx.Request) -> httpx.Response:
            requested.append(request.url.path)
            return httpx.Response(200, content=b"remote")

        await download_mnist(tmp_path, transport=httpx.MockTransport(handler))
        assert len(requested) == 3
        assert (tmp_path / "train-labels-idx1-ubyte.gz").read_bytes() == b"local"
