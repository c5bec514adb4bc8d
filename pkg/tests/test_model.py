import numpy as np
import pytest

from zbcnn.errors import ShapeError, UsageError
from zbcnn.layers import LayerSpec
from zbcnn.model import ModelParams, ModelSpec, Network
from zbcnn.tensor import Rng
from zbcnn.trainer import init_params


def test_standard_shapes():
    spec = ModelSpec.standard(8)
    assert spec.shapes == [(1, 96, 96), (64, 92, 92), (64, 92, 92), (64, 46, 46), (128, 42, 42),
                           (128, 42, 42), (128, 21, 21), (256, 17, 17), (256, 17, 17), (256, 2, 2),
                           (300, 1, 1), (300, 1, 1), (300, 1, 1), (8, 1, 1), (8, 1, 1)]
    assert spec.param_shapes[9] == {"W": (1024, 300), "b": (300,)}
    assert [s.kind for s in spec.layers] == ["conv", "relu", "maxpool", "conv", "relu", "maxpool", "conv",
                                             "relu", "quadrantpool", "fullyconnected", "relu", "dropout",
                                             "fullyconnected", "softmax"]
    assert all(not s.has_bias for s in spec.layers if s.kind == "conv")


def test_spec_validation():
    with pytest.raises(ShapeError):
        ModelSpec([LayerSpec("conv", out_filters=2, kernel=3)])
    with pytest.raises(ShapeError):
        ModelSpec.standard(3, widths=(4, 4, 4), kernel=5).__class__(
            ModelSpec.standard(3).layers, input_shape=(1, 30, 30))


def test_conv_index():
    spec = ModelSpec.standard(6)
    assert spec.conv_index(1) == 0 and spec.conv_index(3) == 6
    with pytest.raises(UsageError):
        spec.conv_index(4)


def test_network_rejects_wrong_params():
    spec = ModelSpec.standard(6, widths=(4, 6, 8), hidden=12)
    params = init_params(spec, Rng(0))
    params.tensors[0]["W"] = np.zeros((4, 1, 3, 3), np.float32)
    with pytest.raises(ShapeError):
        Network(spec, params)


def test_forward_shapes(slim_net):
    x = Rng(0).gaussian(0, 1, (3, 1, 96, 96))
    logits, ctxs = slim_net.forward(x)
    assert logits.shape == (3, 6) and len(ctxs) == 13
    act, _ = slim_net.forward(x, stop=7)
    assert act.shape == (3, 8, 17, 17) and act.min() >= 0
    probs = slim_net.predict_proba(x, batch=2)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0)
    with pytest.raises(ShapeError):
        slim_net.forward(np.zeros((1, 1, 90, 90)))


def test_config_hash_tracks_architecture():
    assert ModelSpec.standard(6).config_hash() == ModelSpec.standard(6).config_hash()
    assert ModelSpec.standard(6).config_hash() != ModelSpec.standard(8).config_hash()


def test_params_copy_is_deep():
    spec = ModelSpec.standard(6, widths=(4, 6, 8), hidden=12)
    p = init_params(spec, Rng(0))
    q = p.copy()
    q.tensors[0]["W"][...] = 0
    assert p.tensors[0]["W"].any()
    assert p.count() == 4 * 25 + 6 * 4 * 25 + 8 * 6 * 25 + 32 * 12 + 12 + 12 * 6 + 6
