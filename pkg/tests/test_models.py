"""Tests for model specs and the runtime network."""

from __future__ import annotations

import numpy as np
import pytest
from pydantic import ValidationError

from sparsekit.errors import ShapeError
from sparsekit.l0 import GatedLayer
from sparsekit.masks import MaskedLayer, SparsityMask
from sparsekit.models import (
    LayerSpec,
    ModelSpec,
    build_lenet5,
    build_lenet300,
    build_model,
)
from sparsekit.rng import STREAM_INIT, RngState
from sparsekit.tensor import Tensor
from sparsekit.variational import VDLayerParams


def _gen(seed: int = 0) -> np.random.Generator:
    return RngState(seed, STREAM_INIT).generator()


class TestModelSpec:
    """Test spec validation and shape propagation."""

    def test_lenet300(self) -> None:
        spec = build_lenet300()
        assert spec.weight_count == 266_200
        assert spec.num_classes == 10
        assert spec.weight_sizes() == [("fc1", 235_200), ("fc2", 30_000), ("fc3", 1_000)]

    def test_lenet5_shapes(self) -> None:
        shapes = build_lenet5().activation_shapes()
        assert shapes["conv1"] == (20, 24, 24)
        assert shapes["pool1"] == (20, 12, 12)
        assert shapes["conv2"] == (50, 8, 8)
        assert shapes["flatten"] == (800,)
        assert shapes["fc2"] == (10,)
        assert build_lenet5().weight_count == 430_500

    def test_dense_chain_mismatch(self) -> None:
        with pytest.raises(ValidationError, match="expects input"):
            ModelSpec(
                name="bad",
                input_shape=(4,),
                layers=(
                    LayerSpec(name="a", kind="dense", shape=(4, 3)),
                    LayerSpec(name="b", kind="dense", shape=(5, 2)),
                ),
            )

    def test_duplicate_names(self) -> None:
        with pytest.raises(ValidationError, match="unique"):
            ModelSpec(
                name="bad",
                input_shape=(4,),
                layers=(
                    LayerSpec(name="a", kind="dense", shape=(4, 4)),
                    LayerSpec(name="a", kind="dense", shape=(4, 2)),
                ),
            )

    def test_conv_needs_rank_four(self) -> None:
        with pytest.raises(ValidationError):
            LayerSpec(name="c", kind="conv", shape=(3, 3))

    def test_with_method(self) -> None:
        assert build_lenet300().with_method("vd").method == "vd"


class TestBuildModel:
    """Test layer construction per method."""

    @pytest.mark.parametrize(
        ("method", "layer_type"),
        [
            ("none", MaskedLayer),
            ("magnitude", MaskedLayer),
            ("random", MaskedLayer),
            ("vd", VDLayerParams),
            ("l0", GatedLayer),
        ],
    )
    def test_layer_types(self, method: str, layer_type: type) -> None:
        model = build_model(build_lenet300(method), _gen())  # type: ignore[arg-type]
        assert all(isinstance(layer, layer_type) for layer in model.layers.values())

    def test_random_uses_masked_gradients(self) -> None:
        model = build_model(build_lenet300("random"), _gen())
        layer = model.layers["fc1"]
        assert isinstance(layer, MaskedLayer)
        assert layer.grad_mode == "masked"

    def test_same_seed_same_weights(self) -> None:
        a = build_model(build_lenet300(), _gen(3)).state_dict()
        b = build_model(build_lenet300(), _gen(3)).state_dict()
        for name in a:
            np.testing.assert_array_equal(a[name], b[name])

    def test_parameter_names(self) -> None:
        names = set(build_model(build_lenet300("vd"), _gen()).parameters())
        assert "fc1.theta" in names
        assert "fc1.log_sigma2" in names
        assert "fc3.bias" in names


class TestModelRuntime:
    """Test forward passes, sparsity and state handling."""

    def test_forward_shapes(self) -> None:
        x = Tensor(np.zeros((2, 1, 28, 28)))
        assert build_model(build_lenet300(), _gen()).forward(x, "eval").shape == (2, 10)
        assert build_model(build_lenet5(), _gen()).forward(x, "eval").shape == (2, 10)

    def test_input_shape_checked(self) -> None:
        model = build_model(build_lenet300(), _gen())
        with pytest.raises(ShapeError):
            model.forward(Tensor(np.zeros((2, 784))), "eval")

    def test_dense_sparsity(self) -> None:
        model = build_model(build_lenet300(), _gen())
        assert model.train_sparsity() == 0.0
        assert model.test_sparsity() == 0.0
        assert model.regularizer() is None

    def test_vd_regularizer_present(self) -> None:
        model = build_model(build_lenet300("vd"), _gen())
        reg = model.regularizer()
        assert reg is not None
        assert reg.item() > 0.0

    def test_set_masks_freeze(self) -> None:
        model = build_model(build_lenet300("magnitude"), _gen())
        keep = np.zeros((100, 10), dtype=bool)
        keep[:, :5] = True
        model.set_masks({"fc3": SparsityMask.from_keep(keep)}, freeze=True)
        layer = model.layers["fc3"]
        assert isinstance(layer, MaskedLayer)
        assert (layer.weights.data[:, 5:] == 0.0).all()
        assert model.test_nonzero()["fc3"] == 500
        assert model.test_sparsity() == pytest.approx(500 / 266_200)

    def test_set_masks_unknown_layer(self) -> None:
        model = build_model(build_lenet300(), _gen())
        with pytest.raises(ShapeError):
            model.set_masks({"nope": SparsityMask.dense((2, 2))})

    def test_state_roundtrip(self) -> None:
        source = build_model(build_lenet300(), _gen(1))
        target = build_model(build_lenet300(), _gen(2))
        target.load_state(source.state_dict())
        np.testing.assert_array_equal(
            target.parameters()["fc1.weight"].data, source.parameters()["fc1.weight"].data
        )

    def test_load_state_copies_read_only_arrays(self) -> None:
        model = build_model(build_lenet300("magnitude"), _gen())
        state = model.state_dict()
        for array in state.values():
            array.flags.writeable = False
        model.load_state(state)
        keep = np.zeros((100, 10), dtype=bool)
        keep[:50] = True
        model.set_masks({"fc3": SparsityMask.from_keep(keep)}, freeze=True)
        weights = model.parameters()["fc3.weight"].data
        assert not np.shares_memory(weights, state["fc3.weight"])
        assert (weights[50:] == 0.0).all()
        np.testing.assert_array_equal(weights[:50], state["fc3.weight"][:50])
        assert state["fc3.weight"][50:].any()

    def test_load_state_missing(self) -> None:
        model = build_model(build_lenet300(), _gen())
        state = model.state_dict()
        del state["fc2.bias"]
        with pytest.raises(ShapeError, match="missing"):
            model.load_state(state)
