"""Tests for the optimizers and random streams."""

from __future__ import annotations

import numpy as np
import pytest

from sparsekit.errors import ShapeError
from sparsekit.optim import OptimizerState, collect_grads, optimizer_step, zero_grads
from sparsekit.rng import STREAM_DATA, STREAM_INIT, RngState
from sparsekit.tensor import Tensor


def _param(values: list[float]) -> Tensor:
    return Tensor(np.array(values), requires_grad=True)


class TestSgdMomentum:
    """Test momentum SGD updates."""

    def test_first_step_is_plain_sgd(self) -> None:
        w = _param([1.0, 2.0])
        state = OptimizerState(kind="sgd-momentum", lr=0.1)
        optimizer_step({"w": w}, {"w": np.array([1.0, -1.0])}, state)
        np.testing.assert_allclose(w.data, [0.9, 2.1], rtol=1e-6)
        assert state.step == 1

    def test_momentum_accumulates(self) -> None:
        w = _param([0.0])
        state = OptimizerState(kind="sgd-momentum", lr=1.0, momentum=0.5)
        grads = {"w": np.array([1.0])}
        optimizer_step({"w": w}, grads, state)
        optimizer_step({"w": w}, grads, state)
        # velocity 1.0 then 1.5
        np.testing.assert_allclose(w.data, [-2.5])

    def test_missing_grad_left_untouched(self) -> None:
        w, b = _param([1.0]), _param([5.0])
        state = OptimizerState(kind="sgd-momentum", lr=0.1)
        optimizer_step({"w": w, "b": b}, {"w": np.array([1.0])}, state)
        np.testing.assert_allclose(b.data, [5.0])


class TestAdam:
    """Test bias-corrected Adam."""

    def test_first_step_moves_by_lr(self) -> None:
        w = _param([1.0, 1.0])
        state = OptimizerState(kind="adam", lr=0.01)
        optimizer_step({"w": w}, {"w": np.array([3.0, -0.5])}, state)
        np.testing.assert_allclose(w.data, [0.99, 1.01], rtol=1e-5)

    def test_slots_created(self) -> None:
        w = _param([1.0])
        state = OptimizerState(kind="adam", lr=0.01)
        optimizer_step({"w": w}, {"w": np.array([1.0])}, state)
        assert set(state.slots["w"]) == {"m", "v"}


class TestOptimizerErrors:
    """Test argument validation."""

    def test_unknown_kind(self) -> None:
        with pytest.raises(ValueError, match="unknown"):
            OptimizerState(kind="rmsprop", lr=0.1)  # type: ignore[arg-type]

    def test_bad_learning_rate(self) -> None:
        with pytest.raises(ValueError):
            OptimizerState(kind="adam", lr=float("nan"))
        with pytest.raises(ValueError):
            OptimizerState(kind="adam", lr=0.0)

    def test_shape_mismatch_leaves_state(self) -> None:
        w = _param([1.0, 2.0])
        state = OptimizerState(kind="adam", lr=0.1)
        with pytest.raises(ShapeError):
            optimizer_step({"w": w}, {"w": np.array([1.0])}, state)
        assert state.step == 0
        np.testing.assert_allclose(w.data, [1.0, 2.0])


class TestGradHelpers:
    """Test gradient collection helpers."""

    def test_collect_and_zero(self) -> None:
        w, b = _param([1.0]), _param([2.0])
        w.grad = np.array([0.5], dtype=np.float32)
        params = {"w": w, "b": b}
        assert list(collect_grads(params)) == ["w"]
        zero_grads(params)
        assert collect_grads(params) == {}


class TestRngState:
    """Test reproducible streams."""

    def test_same_stream_replays(self) -> None:
        a = RngState(7, STREAM_INIT).generator().standard_normal(5)
        b = RngState(7, STREAM_INIT).generator().standard_normal(5)
        np.testing.assert_array_equal(a, b)

    def test_streams_differ(self) -> None:
        state = RngState(7)
        a = state.child(STREAM_INIT).generator().standard_normal(5)
        b = state.child(STREAM_DATA).generator().standard_normal(5)
        assert not np.array_equal(a, b)

    def test_seeds_differ(self) -> None:
        a = RngState(1).generator().random(3)
        b = RngState(2).generator().random(3)
        assert not np.array_equal(a, b)

    def test_child_keeps_seed(self) -> None:
        assert RngState(9, 0).child(3) == RngState(9, 3)

    def test_seed_range(self) -> None:
        with pytest.raises(ValueError, match="seed"):
            RngState(-1)
        with pytest.raises(ValueError, match="stream"):
            RngState(0, 1 << 64)
