"""Layer stack, parameters and whole-network forward/backward."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, UsageError
from .layers import LayerSpec, build_layer, standard_layer_specs, softmax

INPUT_SHAPE = (1, 96, 96)


class ModelSpec:
    """An ordered layer stack with every intermediate shape resolved up front."""

    def __init__(self, layers: list[LayerSpec], input_shape=INPUT_SHAPE):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.modules = [build_layer(s) for s in self.layers]
        self.shapes = [self.input_shape]
        self.param_shapes: dict[int, dict[str, tuple]] = {}
        for i, mod in enumerate(self.modules):
            shape = self.shapes[-1]
            ps = mod.param_shapes(shape)
            if ps:
                self.param_shapes[i] = ps
            self.shapes.append(tuple(mod.output_shape(shape)))
        if not self.layers or self.layers[-1].kind != "softmax":
            raise ShapeError("layer stack must end in softmax")
        fcs = [s for s in self.layers if s.kind == "fullyconnected"]
        if not fcs:
            raise ShapeError("layer stack needs a fully-connected output layer")
        self.n_classes = fcs[-1].out_units

    @classmethod
    def standard(cls, n_classes: int, **kwargs) -> "ModelSpec":
        """conv(64,5)-relu-pool-conv(128,5)-relu-pool-conv(256,5)-relu-quadrant-fc300-relu-dropout-fc-softmax."""
        return cls(standard_layer_specs(n_classes, **kwargs))

    @property
    def conv_indices(self) -> list[int]:
        return [i for i, s in enumerate(self.layers) if s.kind == "conv"]

    def conv_index(self, ordinal: int) -> int:
        convs = self.conv_indices
        if not 1 <= ordinal <= len(convs):
            raise UsageError(f"conv layer ordinal must lie in [1, {len(convs)}], got {ordinal}")
        return convs[ordinal - 1]

    def describe(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "layers": [{k: v for k, v in vars(s).items()} for s in self.layers],
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.describe(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ModelParams:
    """Learnable tensors keyed by layer index, plus run metadata."""

    tensors: dict[int, dict[str, np.ndarray]]
    metadata: dict = field(default_factory=dict)

    def items(self):
        """Yield ``(layer_index, name, array)`` in file order."""
        for idx in sorted(self.tensors):
            for name in sorted(self.tensors[idx]):
                yield idx, name, self.tensors[idx][name]

    def copy(self) -> "ModelParams":
        return ModelParams({i: {k: v.copy() for k, v in d.items()} for i, d in self.tensors.items()},
                           dict(self.metadata))

    @property
    def dtype(self) -> np.dtype:
        return next(self.items())[2].dtype

    def count(self) -> int:
        return sum(a.size for _, _, a in self.items())


class Network:
    """Binds a :class:`ModelSpec` to parameters."""

    def __init__(self, spec: ModelSpec, params: ModelParams):
        self.spec = spec
        self.params = params
        for idx, shapes in spec.param_shapes.items():
            got = params.tensors.get(idx, {})
            for name, shape in shapes.items():
                if name not in got or tuple(got[name].shape) != tuple(shape):
                    raise ShapeError(f"layer {idx} {name}: expected {shape}, got "
                                     f"{None if name not in got else got[name].shape}")

    @property
    def n_classes(self) -> int:
        return self.spec.n_classes

    def forward(self, x: np.ndarray, train: bool = False, rng=None, stop: int | None = None):
        """Run layers ``0..stop`` (default: everything before softmax).

        Returns ``(output, contexts)``; the default output is the (n, K) logits.
        """
        if tuple(x.shape[1:]) != self.spec.input_shape:
            raise ShapeError(f"input shape {x.shape[1:]} does not match {self.spec.input_shape}")
        last = len(self.spec.layers) - 2 if stop is None else stop
        ctxs = []
        for i in range(last + 1):
            x, ctx = self.spec.modules[i].forward(x, self.params.tensors.get(i, {}), train=train, rng=rng)
            ctxs.append(ctx)
        if stop is None:
            x = x.reshape(x.shape[0], -1)
        return x, ctxs

    def backward(self, grad: np.ndarray, ctxs) -> dict[int, dict[str, np.ndarray]]:
        """Backpropagate from the output of layer ``len(ctxs)-1``; returns parameter gradients."""
        grads = {}
        last = len(ctxs) - 1
        shape = (grad.shape[0],) + self.spec.shapes[last + 1]
        g = grad.reshape(shape)
        for i in range(last, -1, -1):
            mod = self.spec.modules[i]
            params = self.params.tensors.get(i, {})
            if mod.kind == "conv" and i == 0:
                g, pg = mod.backward(g, ctxs[i], params, input_grad=False)
            else:
                g, pg = mod.backward(g, ctxs[i], params)
            if pg:
                grads[i] = pg
        return grads

    def predict_proba(self, x: np.ndarray, batch: int = 64) -> np.ndarray:
        out = []
        for i in range(0, len(x), batch):
            logits, _ = self.forward(x[i:i + batch])
            out.append(softmax(logits))
        return np.concatenate(out) if out else np.zeros((0, self.n_classes))
