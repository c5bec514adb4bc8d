"""Top-N mining, deconvnet / guided-backprop reconstructions and grid rendering."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .data import IMAGE_SIZE, Dataset
from .errors import UsageError
from .layers import Conv2d, MaxPool2
from .model import Network
from .tensor import Tensor, reduce

MODES = ("plain", "guided")
OVERLAYS = ("reconstruction", "input", "blend")


@dataclass(frozen=True)
class NeuronRef:
    layer: int  # conv ordinal, 1-based
    filter: int
    y: int
    x: int


@dataclass(frozen=True)
class TopNEntry:
    sample_id: int
    value: float
    position: tuple[int, int]
    rank: int


def _relu_after(net: Network, layer: int) -> int:
    idx = net.spec.conv_index(layer) + 1
    if net.spec.layers[idx].kind != "relu":
        raise UsageError(f"conv layer {layer} is not followed by a ReLU")
    return idx


def activation_maxima(net: Network, inputs: np.ndarray, layer: int = 3, batch: int = 32):
    """Per-(sample, filter) spatial max of the post-ReLU map of conv ``layer``.

    Returns ``(values (N, F), positions (N, F, 2))``; ties go to the smallest
    linear index.
    """
    stop = _relu_after(net, layer)
    values, positions = [], []
    for i in range(0, len(inputs), batch):
        act, _ = net.forward(inputs[i:i + batch], stop=stop)
        v, p = reduce("max", Tensor(act), "per-channel-spatial")
        values.append(v)
        positions.append(p)
    f = net.spec.shapes[stop + 1][0]
    if not values:
        return np.zeros((0, f)), np.zeros((0, f, 2), dtype=np.int64)
    return np.concatenate(values), np.concatenate(positions)


def rank_entries(values: np.ndarray, positions: np.ndarray, sample_ids, n: int) -> list[TopNEntry]:
    """Sort one filter's per-sample maxima: descending value, then ascending sample id."""
    if n < 1:
        raise UsageError("N must be >= 1")
    order = sorted(range(len(values)), key=lambda j: (-float(values[j]), sample_ids[j]))
    return [TopNEntry(int(sample_ids[j]), float(values[j]), (int(positions[j][0]), int(positions[j][1])), r)
            for r, j in enumerate(order[:n], start=1)]


def top_n(net: Network, dataset: Dataset, layer: int, filt: int, n: int = 10,
          maxima=None) -> list[TopNEntry]:
    """The ``n`` samples whose post-ReLU response of (``layer``, ``filt``) is strongest.

    ``maxima`` may pass precomputed :func:`activation_maxima` output.
    """
    n_filters = net.spec.shapes[_relu_after(net, layer) + 1][0]
    if not 0 <= filt < n_filters:
        raise UsageError(f"filter {filt} outside [0, {n_filters})")
    if maxima is None:
        maxima = activation_maxima(net, dataset.inputs(net.params.dtype), layer)
    values, positions = maxima
    return rank_entries(values[:, filt], positions[:, filt], dataset.sample_ids, n)


# ---------------------------------------------------------------------------
# reconstruction


class ForwardCache:
    """Forward pass of one image up to the ReLU of conv ``layer``, kept for reconstruction."""

    def __init__(self, net: Network, image: np.ndarray, layer: int = 3):
        x = np.asarray(image, dtype=net.params.dtype).reshape((1,) + net.spec.input_shape)
        self.net = net
        self.layer = layer
        self.stop = _relu_after(net, layer)
        self.activation, self.contexts = net.forward(x, stop=self.stop)


def receptive_field(net: Network, layer: int, y: int, x: int) -> tuple[int, int, int, int]:
    """Input window ``[y0, y1) x [x0, x1)`` that can influence a conv neuron.

    Walks the layer geometry backwards: a conv widens the window by k-1, a
    2x2/2 pool doubles it.
    """
    stop = _relu_after(net, layer)
    y0, y1, x0, x1 = y, y + 1, x, x + 1
    for i in range(stop, -1, -1):
        spec = net.spec.layers[i]
        if spec.kind == "conv":
            y1 += spec.kernel - 1
            x1 += spec.kernel - 1
        elif spec.kind == "maxpool":
            y0, y1, x0, x1 = 2 * y0, 2 * y1, 2 * x0, 2 * x1
    return y0, y1, x0, x1


def deconv_reconstruct(cache: ForwardCache | None, neuron: NeuronRef, mode: str = "guided",
                       seed_value: float | None = None, trace: list | None = None) -> np.ndarray:
    """Project one neuron back to pixel space; returns a (1, 1, 96, 96) array.

    The seed map is zero except at ``neuron``, which holds its recorded
    activation (or ``seed_value``). Going down, convolutions are transposed,
    pools are unpooled through the recorded switches and every ReLU rectifies
    the signal; guided mode additionally multiplies by the forward ReLU mask.
    If ``trace`` is a list, one record per ReLU site is appended.
    """
    if cache is None:
        raise UsageError("reconstruction needs a cached forward pass")
    if mode not in MODES:
        raise UsageError(f"mode must be one of {MODES}, got {mode!r}")
    if neuron.layer != cache.layer:
        raise UsageError(f"cache was built for conv{cache.layer}, neuron is on conv{neuron.layer}")
    _, f, h, w = cache.activation.shape
    if not (0 <= neuron.filter < f and 0 <= neuron.y < h and 0 <= neuron.x < w):
        raise UsageError(f"neuron {neuron} outside activation extents ({f}, {h}, {w})")
    net = cache.net
    signal = np.zeros_like(cache.activation)
    value = cache.activation[0, neuron.filter, neuron.y, neuron.x] if seed_value is None else seed_value
    signal[0, neuron.filter, neuron.y, neuron.x] = value
    for i in range(cache.stop, -1, -1):
        kind = net.spec.layers[i].kind
        ctx = cache.contexts[i]
        if kind == "relu":
            incoming = signal
            signal = np.maximum(incoming, 0)
            if mode == "guided":
                signal = signal * ctx["mask"]
            if trace is not None:
                trace.append({"layer": i, "incoming": incoming, "mask": ctx["mask"], "out": signal})
        elif kind == "conv":
            signal = Conv2d.transpose(signal, net.params.tensors[i]["W"])
        elif kind == "maxpool":
            signal = MaxPool2.unpool(signal, ctx["arg"], ctx["in_shape"])
        else:
            raise UsageError(f"cannot reconstruct through a {kind} layer")
    return signal


def guided_within_plain(cache: ForwardCache, neuron: NeuronRef) -> bool:
    """Check the support rule of guided reconstruction at every ReLU site.

    At each site the guided output may only be nonzero where the plain rule
    applied to the same incoming signal is (incoming > 0) and where the
    forward pass was active. At the topmost site both passes see the same
    signal, so there the guided support must also sit inside the plain one.
    """
    plain, guided = [], []
    deconv_reconstruct(cache, neuron, "plain", trace=plain)
    deconv_reconstruct(cache, neuron, "guided", trace=guided)
    for rec in guided:
        live = rec["out"] != 0
        if np.any(live & ~(rec["incoming"] > 0)) or np.any(live & ~rec["mask"].astype(bool)):
            return False
    top_g, top_p = guided[0]["out"] != 0, plain[0]["out"] != 0
    return not np.any(top_g & ~top_p)


def energy_centroid(recon: np.ndarray) -> tuple[float, float]:
    """(row, col) centroid of squared reconstruction magnitude."""
    e = np.asarray(recon, dtype=np.float64).reshape(recon.shape[-2:]) ** 2
    total = e.sum()
    if total == 0:
        raise UsageError("centroid of an all-zero reconstruction")
    yy, xx = np.mgrid[0:e.shape[0], 0:e.shape[1]]
    return float((e * yy).sum() / total), float((e * xx).sum() / total)


# ---------------------------------------------------------------------------
# rendering


def _to_u8(cell: np.ndarray) -> np.ndarray:
    lo, hi = float(cell.min()), float(cell.max())
    if hi == lo:
        return np.full(cell.shape, 128, dtype=np.uint8)
    return np.rint((cell - lo) / (hi - lo) * 255.0).astype(np.uint8)


def render_grid(cells, path, overlay: str = "reconstruction", inputs=None, gap: int = 2,
                entries=None) -> np.ndarray:
    """Write a rows x cols grid of 96x96 cells as an 8-bit grayscale PNG.

    ``cells[r][c]`` are reconstructions; ``inputs`` (same layout) are needed
    for the ``input`` and ``blend`` overlays. Each cell is min/max normalised on
    its own; a constant cell renders mid-gray. ``entries`` (list of dicts) goes
    to a JSON sidecar next to the PNG. Returns the pixel array.
    """
    if overlay not in OVERLAYS:
        raise UsageError(f"overlay must be one of {OVERLAYS}")
    if overlay != "reconstruction" and inputs is None:
        raise UsageError(f"{overlay} overlay needs the input images")
    rows = len(cells)
    cols = max((len(r) for r in cells), default=0)
    size = IMAGE_SIZE
    grid = np.full((rows * size + (rows + 1) * gap, cols * size + (cols + 1) * gap), 255, dtype=np.uint8)
    for r, row in enumerate(cells):
        for c, rec in enumerate(row):
            rec = np.asarray(rec).reshape(rec.shape[-2:])
            if rec.shape != (size, size):
                raise UsageError(f"cell ({r}, {c}) is {rec.shape}, expected {size}x{size}")
            if overlay == "reconstruction":
                px = _to_u8(rec)
            else:
                img = np.asarray(inputs[r][c]).reshape(size, size)
                px = _to_u8(img)
                if overlay == "blend":
                    px = ((px.astype(np.uint16) + _to_u8(rec)) // 2).astype(np.uint8)
            y0 = gap + r * (size + gap)
            x0 = gap + c * (size + gap)
            grid[y0:y0 + size, x0:x0 + size] = px
    path = Path(path)
    try:
        Image.fromarray(grid, mode="L").save(path)
        if entries is not None:
            path.with_suffix(".json").write_text(json.dumps(entries, indent=1))
    except OSError as exc:
        raise OSError(f"cannot write grid to {path}: {exc}") from exc
    return grid


def visualize_filters(net: Network, dataset: Dataset, filters, n: int = 10, layer: int = 3,
                      mode: str = "guided", maxima=None):
    """Reconstructions of the top-``n`` samples for each filter.

    Returns ``(cells, inputs, entries)`` ready for :func:`render_grid`.
    """
    inputs_all = dataset.inputs(net.params.dtype)
    if maxima is None:
        maxima = activation_maxima(net, inputs_all, layer)
    row_of = {sid: i for i, sid in enumerate(dataset.sample_ids)}
    cells, inputs, entries = [], [], []
    for f in filters:
        row_cells, row_inputs = [], []
        for e in top_n(net, dataset, layer, f, n, maxima=maxima):
            image = inputs_all[row_of[e.sample_id]]
            cache = ForwardCache(net, image, layer)
            rec = deconv_reconstruct(cache, NeuronRef(layer, f, *e.position), mode)
            row_cells.append(rec[0, 0])
            row_inputs.append(image[0])
            entries.append({"filter": int(f), **asdict(e), "position": list(e.position)})
        cells.append(row_cells)
        inputs.append(row_inputs)
    return cells, inputs, entries
