import numpy as np
import pytest

from zbcnn.layers import LayerSpec
from zbcnn.model import ModelSpec, ModelParams, Network
from zbcnn.synth import synth_generate
from zbcnn.tensor import Rng
from zbcnn.trainer import init_params


def tiny_spec(n_classes=3, size=24, widths=(3, 4, 5), hidden=6, dropout=0.5):
    """A scaled-down copy of the full stack for fast tests."""
    layers = [
        LayerSpec("conv", out_filters=widths[0], kernel=5), LayerSpec("relu"), LayerSpec("maxpool"),
        LayerSpec("conv", out_filters=widths[1], kernel=3), LayerSpec("relu"), LayerSpec("maxpool"),
        LayerSpec("conv", out_filters=widths[2], kernel=3), LayerSpec("relu"), LayerSpec("quadrantpool"),
        LayerSpec("fullyconnected", out_units=hidden, has_bias=True), LayerSpec("relu"),
        LayerSpec("dropout", rate=dropout),
        LayerSpec("fullyconnected", out_units=n_classes, has_bias=True), LayerSpec("softmax"),
    ]
    return ModelSpec(layers, input_shape=(1, size, size))


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture(scope="session")
def small_synth():
    # 12 subjects x 6 samples, one of each class per subject
    return synth_generate(12, 6, rng=Rng(5))


@pytest.fixture(scope="session")
def slim_net():
    """Random-weight standard-shaped network with narrow layers (96x96 input)."""
    spec = ModelSpec.standard(6, widths=(4, 6, 8), hidden=12)
    return Network(spec, init_params(spec, Rng(3), 64, "he"))
