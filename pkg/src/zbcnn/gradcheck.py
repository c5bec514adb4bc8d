"""Central finite-difference checks for every layer kind, in float64."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import (Conv2d, Dropout, FullyConnected, MaxPool2, QuadrantPool, ReLU, LayerSpec,
                     softmax_xent)
from .model import ModelSpec, Network
from .tensor import Rng

STEP = 1e-5
REL_TOL = 1e-5
ABS_FLOOR = 1e-4


@dataclass
class CheckResult:
    layer: str
    max_rel_err: float
    n_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err < REL_TOL

    def __str__(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"{self.layer:<16} max rel err {self.max_rel_err:.3e} over {self.n_checked} partials  {verdict}"


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """|a - n| / max(|a|, |n|, ABS_FLOOR).

    The floor keeps near-zero partials from being judged on roundoff: a
    central difference at STEP carries about 1e-16 * |L| / STEP of noise.
    """
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), ABS_FLOOR)


def _numeric(f, arr: np.ndarray, indices, same_branch=None) -> np.ndarray:
    """Central differences; entries are NaN where ``same_branch()`` reports a kink was crossed."""
    out = np.empty(len(indices))
    flat = arr.reshape(-1)
    for j, i in enumerate(indices):
        old = flat[i]
        flat[i] = old + STEP
        up = f()
        ok = same_branch is None or same_branch()
        flat[i] = old - STEP
        down = f()
        ok = ok and (same_branch is None or same_branch())
        flat[i] = old
        out[j] = (up - down) / (2 * STEP) if ok else np.nan
    return out


def _pick(size: int, limit: int | None, rng: Rng) -> np.ndarray:
    if limit is None or size <= limit:
        return np.arange(size)
    return np.sort(rng.permutation(size)[:limit])


def check_layer(layer, x: np.ndarray, params: dict, rng: Rng, name: str | None = None,
                limit: int | None = None, seed_for_forward: int | None = None) -> CheckResult:
    """Compare ``layer.backward`` against central differences of L = sum(out * R)."""

    def fwd_rng():
        return Rng(seed_for_forward) if seed_for_forward is not None else None

    train = seed_for_forward is not None
    out, _ = layer.forward(x, params, train=train, rng=fwd_rng())
    weights = rng.gaussian(0.0, 1.0, out.shape)

    def loss():
        o, _ = layer.forward(x, params, train=train, rng=fwd_rng())
        return float(np.sum(o * weights))

    out, ctx = layer.forward(x, params, train=train, rng=fwd_rng())
    gx, grads = layer.backward(weights.astype(x.dtype), ctx, params)
    errs = []
    idx = _pick(x.size, limit, rng)
    errs.append(rel_err(gx.reshape(-1)[idx], _numeric(loss, x, idx)))
    for pname, p in params.items():
        idx = _pick(p.size, limit, rng)
        errs.append(rel_err(grads[pname].reshape(-1)[idx], _numeric(loss, p, idx)))
    allerr = np.concatenate(errs)
    return CheckResult(name or layer.kind, float(allerr.max()), allerr.size)


def check_softmax_xent(rng: Rng, n: int = 4, k: int = 5) -> CheckResult:
    logits = rng.gaussian(0.0, 2.0, (n, k))
    labels = rng.integers(0, k, n)
    _, grad, _ = softmax_xent(logits, labels)
    idx = np.arange(logits.size)
    num = _numeric(lambda: softmax_xent(logits, labels)[0], logits, idx)
    err = rel_err(grad.reshape(-1), num)
    return CheckResult("softmax_xent", float(err.max()), err.size)


def _separated(shape, rng: Rng, gap: float = 1e-2) -> np.ndarray:
    """Distinct values at least ``gap`` apart, bounded away from zero."""
    size = int(np.prod(shape))
    vals = (np.arange(size) - size / 2 + 0.5) * gap
    vals = vals[rng.permutation(size)]
    return vals.reshape(shape)


def check_network(rng: Rng, limit: int = 40) -> CheckResult:
    """Sampled partials of the loss of a small full stack w.r.t. every parameter tensor."""
    layers = [
        LayerSpec("conv", out_filters=3, kernel=5), LayerSpec("relu"), LayerSpec("maxpool"),
        LayerSpec("conv", out_filters=4, kernel=3), LayerSpec("relu"), LayerSpec("maxpool"),
        LayerSpec("conv", out_filters=5, kernel=3), LayerSpec("relu"), LayerSpec("quadrantpool"),
        LayerSpec("fullyconnected", out_units=6, has_bias=True), LayerSpec("relu"),
        LayerSpec("dropout", rate=0.5),
        LayerSpec("fullyconnected", out_units=3, has_bias=True), LayerSpec("softmax"),
    ]
    spec = ModelSpec(layers, input_shape=(1, 24, 24))
    from .model import ModelParams
    tensors = {}
    for i, shapes in spec.param_shapes.items():
        tensors[i] = {k: rng.gaussian(0.0, 0.5, s) for k, s in shapes.items()}
    net = Network(spec, ModelParams(tensors))
    x = rng.gaussian(0.0, 1.0, (2, 1, 24, 24))
    labels = rng.integers(0, 3, 2)
    drop_seed = int(rng.integers(0, 2 ** 31))

    last = {}

    def branch(ctxs):
        # ReLU masks and pool switches fix which piece of the piecewise-linear map is active
        return [c[k] for c in ctxs for k in ("mask", "arg") if k in c]

    def loss():
        logits, ctxs = net.forward(x, train=True, rng=Rng(drop_seed))
        last["branch"] = branch(ctxs)
        return softmax_xent(logits, labels)[0]

    logits, ctxs = net.forward(x, train=True, rng=Rng(drop_seed))
    base = branch(ctxs)

    def same_branch():
        return all(np.array_equal(a, b) for a, b in zip(base, last["branch"]))

    _, g, _ = softmax_xent(logits, labels)
    grads = net.backward(g, ctxs)
    errs = []
    for i in sorted(tensors):
        for k, p in tensors[i].items():
            idx = _pick(p.size, limit, rng)
            num = _numeric(loss, p, idx, same_branch)
            keep = ~np.isnan(num)
            errs.append(rel_err(grads[i][k].reshape(-1)[idx][keep], num[keep]))
    allerr = np.concatenate(errs)
    return CheckResult("network", float(allerr.max()), allerr.size)


def run_suite(seed: int = 0, conv_layer=None) -> list[CheckResult]:
    """One check per layer kind plus a whole-network check.

    ``conv_layer`` substitutes the convolution implementation under test.
    """
    rng = Rng(seed)
    conv = conv_layer if conv_layer is not None else Conv2d(3, 3)
    results = []

    x = rng.gaussian(0.0, 1.0, (2, 2, 7, 7))
    w = rng.gaussian(0.0, 1.0, (conv.out_filters, 2, conv.kernel, conv.kernel))
    results.append(check_layer(conv, x, {"W": w}, rng, "conv"))

    x = np.where(rng.bernoulli(0.5, (2, 3, 4, 4)), 1.0, -1.0) * rng.uniform(0.1, 1.0, (2, 3, 4, 4))
    results.append(check_layer(ReLU(), x, {}, rng, "relu"))

    results.append(check_layer(MaxPool2(), _separated((2, 2, 5, 6), rng), {}, rng, "maxpool"))
    results.append(check_layer(QuadrantPool(), rng.gaussian(0.0, 1.0, (2, 2, 5, 7)), {}, rng, "quadrantpool"))

    fc = FullyConnected(4, has_bias=True)
    x = rng.gaussian(0.0, 1.0, (3, 2, 2, 2))
    params = {"W": rng.gaussian(0.0, 1.0, (8, 4)), "b": rng.gaussian(0.0, 1.0, (4,))}
    results.append(check_layer(fc, x, params, rng, "fullyconnected"))

    x = rng.gaussian(0.0, 1.0, (3, 6, 1, 1))
    results.append(check_layer(Dropout(0.5), x, {}, rng, "dropout",
                               seed_for_forward=int(rng.integers(0, 2 ** 31))))

    results.append(check_softmax_xent(rng))
    results.append(check_network(rng))
    return results
