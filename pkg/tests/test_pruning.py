"""Tests for masks, magnitude pruning and random pruning."""

from __future__ import annotations

import numpy as np
import pytest

from sparsekit import tensor as T
from sparsekit.errors import PruningError, ShapeError
from sparsekit.layers import WeightGeometry
from sparsekit.magnitude import magnitude_keep, magnitude_prune_step
from sparsekit.masks import MaskedLayer, SparsityMask, route_gradients
from sparsekit.random_pruning import random_prune_step
from sparsekit.rng import STREAM_PRUNE, RngState
from sparsekit.tensor import Tensor


def _layer(weights: np.ndarray, *, grad_mode: str = "dense") -> MaskedLayer:
    geometry = WeightGeometry(kind="dense", shape=weights.shape)
    return MaskedLayer(
        name="fc",
        geometry=geometry,
        weights=Tensor(weights, requires_grad=True),
        bias=Tensor(np.zeros(weights.shape[1]), requires_grad=True),
        mask=SparsityMask.dense(weights.shape),
        grad_mode=grad_mode,  # type: ignore[arg-type]
    )


class TestSparsityMask:
    """Test the bit-packed mask."""

    def test_packing(self) -> None:
        keep = np.array([[True, False, True], [False, False, True], [True, True, True]])
        mask = SparsityMask.from_keep(keep)
        assert mask.packed.shape == (2,)
        np.testing.assert_array_equal(mask.keep(), keep)
        assert mask.popcount() == 6
        assert mask.sparsity() == pytest.approx(3 / 9)

    def test_dense(self) -> None:
        mask = SparsityMask.dense((4, 5))
        assert mask.popcount() == 20
        assert mask.sparsity() == 0.0

    def test_equality(self) -> None:
        keep = np.array([True, False, True, True])
        assert SparsityMask.from_keep(keep) == SparsityMask.from_keep(keep.copy())
        assert SparsityMask.from_keep(keep) != SparsityMask.dense((4,))

    def test_wrong_byte_count(self) -> None:
        with pytest.raises(ShapeError):
            SparsityMask(np.zeros(3, dtype=np.uint8), (4, 2))


class TestMagnitudeKeep:
    """Test sorting-based thresholding."""

    def test_prunes_smallest(self) -> None:
        weights = np.array([[0.5, -0.1], [2.0, -0.3]])
        keep = magnitude_keep(weights, 0.5)
        np.testing.assert_array_equal(keep, [[True, False], [True, False]])

    def test_ties_prune_lower_index(self) -> None:
        keep = magnitude_keep(np.array([1.0, 1.0, 1.0, 1.0]), 0.5)
        np.testing.assert_array_equal(keep, [False, False, True, True])

    def test_exact_count(self) -> None:
        weights = np.random.default_rng(0).standard_normal((300, 100))
        keep = magnitude_keep(weights, 0.9)
        assert int((~keep).sum()) == 27_000

    def test_range(self) -> None:
        with pytest.raises(PruningError, match="outside"):
            magnitude_keep(np.ones(4), 1.5)


class TestMagnitudePruneStep:
    """Test re-thresholding of a masked layer."""

    def test_masked_weight_regrows(self) -> None:
        layer = _layer(np.array([[1.0, 2.0], [3.0, 4.0]]))
        magnitude_prune_step(layer, 0.5)
        np.testing.assert_array_equal(layer.keep, [[False, False], [True, True]])
        layer.weights.data[0, 0] = 10.0
        magnitude_prune_step(layer, 0.5)
        np.testing.assert_array_equal(layer.keep, [[True, False], [False, True]])
        assert layer.target == 0.5

    def test_forward_uses_masked_weights(self) -> None:
        layer = _layer(np.array([[1.0, 2.0], [3.0, 4.0]]))
        magnitude_prune_step(layer, 0.5)
        out = layer.forward(Tensor(np.array([[1.0, 1.0]])), "train", None)
        np.testing.assert_allclose(out.data, [[3.0, 4.0]])

    def test_dense_gradient_reaches_masked_weights(self) -> None:
        layer = _layer(np.array([[1.0, 2.0], [3.0, 4.0]]))
        magnitude_prune_step(layer, 0.5)
        out = layer.forward(Tensor(np.array([[1.0, 1.0]])), "train", None)
        T.backward(T.sum_all(out))
        route_gradients(layer)
        assert layer.weights.grad is not None
        np.testing.assert_allclose(layer.weights.grad, np.ones((2, 2)))

    def test_masked_gradient_mode(self) -> None:
        layer = _layer(np.array([[1.0, 2.0], [3.0, 4.0]]), grad_mode="masked")
        magnitude_prune_step(layer, 0.5)
        out = layer.forward(Tensor(np.array([[1.0, 1.0]])), "train", None)
        T.backward(T.sum_all(out))
        route_gradients(layer)
        assert layer.weights.grad is not None
        np.testing.assert_allclose(layer.weights.grad, [[0.0, 0.0], [1.0, 1.0]])


class TestRandomPruneStep:
    """Test the random pruning baseline."""

    def test_monotone_and_frozen(self) -> None:
        weights = np.random.default_rng(1).standard_normal((20, 10))
        layer = _layer(weights)
        gen = RngState(3, STREAM_PRUNE).generator()
        random_prune_step(layer, 0.3, gen)
        first = layer.keep.copy()
        assert int((~first).sum()) == 60
        random_prune_step(layer, 0.6, gen)
        second = layer.keep
        assert int((~second).sum()) == 120
        assert not (second & ~first).any()
        assert layer.frozen
        assert layer.grad_mode == "masked"
        assert (layer.weights.data[~second] == 0.0).all()

    def test_replayable(self) -> None:
        weights = np.random.default_rng(1).standard_normal((10, 10))
        a, b = _layer(weights.copy()), _layer(weights.copy())
        random_prune_step(a, 0.5, RngState(4, STREAM_PRUNE).generator())
        random_prune_step(b, 0.5, RngState(4, STREAM_PRUNE).generator())
        np.testing.assert_array_equal(a.keep, b.keep)

    def test_target_below_current(self) -> None:
        layer = _layer(np.ones((4, 5)))
        gen = RngState(0, STREAM_PRUNE).generator()
        random_prune_step(layer, 0.5, gen)
        with pytest.raises(PruningError):
            random_prune_step(layer, 0.2, gen)

    def test_newly_pruned_weights_are_uniform(self) -> None:
        weights = np.arange(1.0, 21.0).reshape(4, 5)
        base = _layer(weights)
        random_prune_step(base, 0.25, RngState(99, STREAM_PRUNE).generator())
        survivors = base.keep.reshape(-1)
        trials = 3000
        counts = np.zeros(20)
        for seed in range(trials):
            layer = _layer(weights.copy())
            layer.set_mask(base.mask)
            random_prune_step(layer, 0.5, RngState(seed, STREAM_PRUNE).generator())
            counts += survivors & ~layer.keep.reshape(-1)
        assert counts[~survivors].sum() == 0
        expected = trials * 5 / 15
        chi2 = float((((counts[survivors] - expected) ** 2) / expected).sum())
        # 14 degrees of freedom; 36.12 is the 0.999 quantile.
        assert chi2 < 36.12

    def test_choice_ignores_weight_values(self) -> None:
        gen = np.random.default_rng(12)
        weights = gen.standard_normal((8, 6))
        shuffled = gen.permutation(weights.reshape(-1)).reshape(8, 6)
        a, b = _layer(weights), _layer(shuffled)
        random_prune_step(a, 0.6, RngState(5, STREAM_PRUNE).generator())
        random_prune_step(b, 0.6, RngState(5, STREAM_PRUNE).generator())
        np.testing.assert_array_equal(a.keep, b.keep)

    def test_target_out_of_range(self) -> None:
        with pytest.raises(PruningError, match="outside"):
            random_prune_step(_layer(np.ones((2, 2))), 1.5, RngState(0).generator())
