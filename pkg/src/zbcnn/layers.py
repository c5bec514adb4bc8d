"""Forward/backward passes for the layer kinds of the zero-bias network.

Every layer is stateless: ``forward`` returns the output plus a
:class:`Context` holding whatever ``backward`` needs, and ``backward``
consumes that context exactly once. Arrays are (n, c, h, w) numpy arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DomainError, NumericError, ShapeError, UsageError
from .tensor import Rng

# im2col chunks are capped at this many scalars
_PATCH_BUDGET = 1 << 24


class Context(dict):
    """Forward cache for one layer call; single use."""

    def consume(self) -> "Context":
        if self.get("_consumed"):
            raise UsageError("backward called twice on the same forward context")
        self["_consumed"] = True
        return self


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out_filters: int = 0
    kernel: int = 0
    rate: float = 0.0
    out_units: int = 0
    has_bias: bool = False

    KINDS = ("conv", "relu", "maxpool", "quadrantpool", "fullyconnected", "dropout", "softmax")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise DomainError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv":
            if self.out_filters < 1 or self.kernel < 1 or self.kernel % 2 == 0:
                raise DomainError(f"conv needs filters >= 1 and an odd kernel, got {self}")
            if self.has_bias:
                raise DomainError("convolutions are bias-free")
        if self.kind == "fullyconnected" and self.out_units < 1:
            raise DomainError("fullyconnected needs out_units >= 1")
        if self.kind == "dropout" and not 0.0 <= self.rate < 1.0:
            raise DomainError(f"dropout rate must lie in [0, 1), got {self.rate}")


def standard_layer_specs(n_classes: int, widths=(64, 128, 256), kernel: int = 5,
                      hidden: int = 300, dropout: float = 0.5) -> list[LayerSpec]:
    c1, c2, c3 = widths
    return [
        LayerSpec("conv", out_filters=c1, kernel=kernel),
        LayerSpec("relu"),
        LayerSpec("maxpool"),
        LayerSpec("conv", out_filters=c2, kernel=kernel),
        LayerSpec("relu"),
        LayerSpec("maxpool"),
        LayerSpec("conv", out_filters=c3, kernel=kernel),
        LayerSpec("relu"),
        LayerSpec("quadrantpool"),
        LayerSpec("fullyconnected", out_units=hidden, has_bias=True),
        LayerSpec("relu"),
        LayerSpec("dropout", rate=dropout),
        LayerSpec("fullyconnected", out_units=n_classes, has_bias=True),
        LayerSpec("softmax"),
    ]


# ---------------------------------------------------------------------------
# individual layers


def _patches(xh: np.ndarray, k: int) -> np.ndarray:
    """im2col on a channels-last batch: rows (n, y, x), columns (dy, dx, c)."""
    n, h, w, c = xh.shape
    win = sliding_window_view(xh, (k, k), axis=(1, 2))  # n oh ow c k k
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * (h - k + 1) * (w - k + 1), k * k * c)


def _chunk(n: int, per_sample: int) -> int:
    return max(1, min(n, _PATCH_BUDGET // max(per_sample, 1)))


class Conv2d:
    """Valid cross-correlation, stride 1, no bias.

    Works channels-last internally so im2col copies contiguous channel runs.
    """

    kind = "conv"

    def __init__(self, out_filters: int, kernel: int):
        self.out_filters = out_filters
        self.kernel = kernel

    def output_shape(self, shape):
        c, h, w = shape
        if h < self.kernel or w < self.kernel:
            raise ShapeError(f"conv kernel {self.kernel} larger than input {h}x{w}")
        return (self.out_filters, h - self.kernel + 1, w - self.kernel + 1)

    def param_shapes(self, in_shape):
        return {"W": (self.out_filters, in_shape[0], self.kernel, self.kernel)}

    @staticmethod
    def _weight_matrix(W):
        f, c, k, _ = W.shape
        return np.ascontiguousarray(W.transpose(2, 3, 1, 0)).reshape(k * k * c, f)

    def forward(self, x, params, train=False, rng=None):
        W = params["W"]
        n, c, h, w = x.shape
        f, wc, k, _ = W.shape
        if wc != c:
            raise ShapeError(f"input has {c} channels but weights expect {wc}")
        if h < k or w < k:
            raise ShapeError(f"input {h}x{w} smaller than kernel {k}")
        if x.dtype != W.dtype:
            raise DomainError(f"mixed precision {x.dtype} vs {W.dtype}")
        oh, ow = h - k + 1, w - k + 1
        xh = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
        wm = self._weight_matrix(W)
        out = np.empty((n, oh, ow, f), dtype=x.dtype)
        step = _chunk(n, oh * ow * c * k * k)
        for i in range(0, n, step):
            out[i:i + step] = (_patches(xh[i:i + step], k) @ wm).reshape(-1, oh, ow, f)
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), Context(xh=xh)

    def backward(self, grad_out, ctx, params, input_grad=True, weight_grad=True):
        ctx.consume()
        xh, W = ctx["xh"], params["W"]
        n, h, w, c = xh.shape
        f, _, k, _ = W.shape
        oh, ow = h - k + 1, w - k + 1
        gh = np.ascontiguousarray(grad_out.transpose(0, 2, 3, 1))
        grads = {}
        if weight_grad:
            gW = np.zeros((k * k * c, f), dtype=xh.dtype)
            step = _chunk(n, oh * ow * c * k * k)
            for i in range(0, n, step):
                gW += _patches(xh[i:i + step], k).T @ gh[i:i + step].reshape(-1, f)
            grads["W"] = np.ascontiguousarray(gW.reshape(k, k, c, f).transpose(3, 2, 0, 1))
        gx = self._transpose_nhwc(gh, W) if input_grad else None
        return gx, grads

    @classmethod
    def transpose(cls, signal: np.ndarray, W: np.ndarray) -> np.ndarray:
        """Transposed convolution: maps an (n, F, oh, ow) signal back to (n, C, oh+k-1, ow+k-1)."""
        return cls._transpose_nhwc(np.ascontiguousarray(signal.transpose(0, 2, 3, 1)), W)

    @classmethod
    def _transpose_nhwc(cls, gh: np.ndarray, W: np.ndarray) -> np.ndarray:
        n, oh, ow, f = gh.shape
        _, c, k, _ = W.shape
        wm = cls._weight_matrix(W)
        gx = np.zeros((n, oh + k - 1, ow + k - 1, c), dtype=gh.dtype)
        step = _chunk(n, oh * ow * c * k * k)
        for i in range(0, n, step):
            # col2im: scatter each kernel offset back onto the input grid
            dcols = (gh[i:i + step].reshape(-1, f) @ wm.T).reshape(-1, oh, ow, k, k, c)
            gslice = gx[i:i + step]
            for dy in range(k):
                for dx in range(k):
                    gslice[:, dy:dy + oh, dx:dx + ow, :] += dcols[:, :, :, dy, dx, :]
        return np.ascontiguousarray(gx.transpose(0, 3, 1, 2))


class ReLU:
    kind = "relu"

    def output_shape(self, shape):
        return shape

    def param_shapes(self, in_shape):
        return {}

    def forward(self, x, params=None, train=False, rng=None):
        mask = x > 0
        return x * mask, Context(mask=mask)

    def backward(self, grad_out, ctx, params=None):
        ctx.consume()
        return grad_out * ctx["mask"], {}


class MaxPool2:
    """2x2 window, stride 2; a trailing odd row/column is dropped."""

    kind = "maxpool"

    def output_shape(self, shape):
        c, h, w = shape
        if h < 2 or w < 2:
            raise ShapeError(f"maxpool needs at least 2x2 input, got {h}x{w}")
        return (c, h // 2, w // 2)

    def param_shapes(self, in_shape):
        return {}

    def forward(self, x, params=None, train=False, rng=None):
        n, c, h, w = x.shape
        if h < 2 or w < 2:
            raise ShapeError(f"maxpool needs at least 2x2 input, got {h}x{w}")
        h2, w2 = h // 2, w // 2
        # window cells in ascending linear order; strict > keeps the first maximum
        cells = [x[:, :, dy:2 * h2:2, dx:2 * w2:2] for dy in (0, 1) for dx in (0, 1)]
        out = cells[0].copy()
        arg = np.zeros(out.shape, dtype=np.int8)
        for j in (1, 2, 3):
            better = cells[j] > out
            np.copyto(out, cells[j], where=better)
            arg[better] = j
        return out, Context(arg=arg, in_shape=x.shape)

    def backward(self, grad_out, ctx, params=None):
        ctx.consume()
        return self.unpool(grad_out, ctx["arg"], ctx["in_shape"]), {}

    @staticmethod
    def unpool(signal, arg, in_shape):
        """Route each pooled value to its recorded window position."""
        n, c, h, w = in_shape
        h2, w2 = h // 2, w // 2
        out = np.zeros(in_shape, dtype=signal.dtype)
        for j in range(4):
            dy, dx = divmod(j, 2)
            out[:, :, dy:2 * h2:2, dx:2 * w2:2] = signal * (arg == j)
        return out


def quadrant_bounds(h: int, w: int):
    """Row/column slices of the four quadrants, top-left first, row-major."""
    hr, wc = math.ceil(h / 2), math.ceil(w / 2)
    rows = (slice(0, hr), slice(hr, h))
    cols = (slice(0, wc), slice(wc, w))
    return [(r, c) for r in rows for c in cols]


class QuadrantPool:
    """Average over four quadrants split at ceil(h/2), ceil(w/2)."""

    kind = "quadrantpool"

    def output_shape(self, shape):
        c, h, w = shape
        if h < 2 or w < 2:
            raise ShapeError(f"quadrant pooling needs at least 2x2 input, got {h}x{w}")
        return (c, 2, 2)

    def param_shapes(self, in_shape):
        return {}

    def forward(self, x, params=None, train=False, rng=None):
        n, c, h, w = x.shape
        if h < 2 or w < 2:
            raise ShapeError(f"quadrant pooling needs at least 2x2 input, got {h}x{w}")
        out = np.empty((n, c, 2, 2), dtype=x.dtype)
        for q, (rs, cs) in enumerate(quadrant_bounds(h, w)):
            out[:, :, q // 2, q % 2] = x[:, :, rs, cs].mean(axis=(2, 3))
        return out, Context(in_shape=x.shape)

    def backward(self, grad_out, ctx, params=None):
        ctx.consume()
        n, c, h, w = ctx["in_shape"]
        gx = np.empty((n, c, h, w), dtype=grad_out.dtype)
        for q, (rs, cs) in enumerate(quadrant_bounds(h, w)):
            area = (rs.stop - rs.start) * (cs.stop - cs.start)
            gx[:, :, rs, cs] = (grad_out[:, :, q // 2, q % 2] / area)[:, :, None, None]
        return gx, {}


class FullyConnected:
    """``out = flatten(x) @ W + b``; W is (d, u)."""

    kind = "fullyconnected"

    def __init__(self, out_units: int, has_bias: bool = True):
        self.out_units = out_units
        self.has_bias = has_bias

    def output_shape(self, shape):
        return (self.out_units, 1, 1)

    def param_shapes(self, in_shape):
        d = int(np.prod(in_shape))
        shapes = {"W": (d, self.out_units)}
        if self.has_bias:
            shapes["b"] = (self.out_units,)
        return shapes

    def forward(self, x, params, train=False, rng=None):
        W = params["W"]
        n = x.shape[0]
        flat = x.reshape(n, -1)
        if flat.shape[1] != W.shape[0]:
            raise ShapeError(f"input dimension {flat.shape[1]} does not match weight rows {W.shape[0]}")
        out = flat @ W
        if "b" in params:
            out = out + params["b"]
        return out.reshape(n, self.out_units, 1, 1), Context(x=x)

    def backward(self, grad_out, ctx, params):
        ctx.consume()
        x, W = ctx["x"], params["W"]
        n = x.shape[0]
        g = grad_out.reshape(n, -1)
        grads = {"W": x.reshape(n, -1).T @ g}
        if "b" in params:
            grads["b"] = g.sum(axis=0)
        return (g @ W.T).reshape(x.shape), grads


class Dropout:
    """Inverted dropout: surviving units are scaled by 1/(1-p) at train time."""

    kind = "dropout"

    def __init__(self, rate: float):
        if not 0.0 <= rate < 1.0:
            raise DomainError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate

    def output_shape(self, shape):
        return shape

    def param_shapes(self, in_shape):
        return {}

    def forward(self, x, params=None, train=False, rng: Rng | None = None):
        if not train or self.rate == 0.0:
            return x, Context(scale=None)
        if rng is None:
            raise UsageError("train-mode dropout needs an rng")
        keep = 1.0 - self.rate
        scale = (rng.bernoulli(keep, x.shape) / keep).astype(x.dtype)
        return x * scale, Context(scale=scale)

    def backward(self, grad_out, ctx, params=None):
        ctx.consume()
        if ctx["scale"] is None:
            return grad_out, {}
        return grad_out * ctx["scale"], {}


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


class Softmax:
    """Probability head; training uses :func:`softmax_xent` on the logits."""

    kind = "softmax"

    def output_shape(self, shape):
        return shape

    def param_shapes(self, in_shape):
        return {}

    def forward(self, x, params=None, train=False, rng=None):
        n = x.shape[0]
        return softmax(x.reshape(n, -1)).reshape(x.shape), Context()


def softmax_xent(logits: np.ndarray, labels) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy of integer ``labels`` under softmax(``logits``).

    Returns ``(loss, dloss/dlogits, probabilities)``.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if k < 2:
        raise DomainError("softmax needs at least two classes")
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DomainError(f"label out of range [0, {k})")
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logit")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    log_p = shifted - log_norm[:, None]
    probs = np.exp(log_p)
    loss = float(-log_p[np.arange(n), labels].mean())
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, grad.astype(logits.dtype), probs


def build_layer(spec: LayerSpec):
    if spec.kind == "conv":
        return Conv2d(spec.out_filters, spec.kernel)
    if spec.kind == "relu":
        return ReLU()
    if spec.kind == "maxpool":
        return MaxPool2()
    if spec.kind == "quadrantpool":
        return QuadrantPool()
    if spec.kind == "fullyconnected":
        return FullyConnected(spec.out_units, spec.has_bias)
    if spec.kind == "dropout":
        return Dropout(spec.rate)
    return Softmax()
