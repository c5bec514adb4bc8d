"""Initialization, momentum SGD, the epoch loop, evaluation, cross-validation
and the weight-file format."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .data import AugmentConfig, Dataset, apply_transform, check_subject_disjoint, draw_transform
from .errors import FormatError, NumericError, UsageError
from .layers import softmax_xent
from .model import ModelParams, ModelSpec, Network
from .tensor import Rng, as_dtype

log = logging.getLogger(__name__)

K_RANGE = (0.2, 1.2)


def fan_in(spec: ModelSpec, layer: int) -> int:
    shapes = spec.param_shapes[layer]
    w = shapes["W"]
    if spec.layers[layer].kind == "conv":
        return w[1] * w[2] * w[3]
    return w[0]


INIT_SCHEMES = ("fan_in", "sqrt_fan_in", "he")


def init_params(spec: ModelSpec, rng: Rng, precision=32, scheme: str = "fan_in") -> ModelParams:
    """Gaussian weights, zero biases.

    sigma = k / fan_in (``scheme="fan_in"``), k / sqrt(fan_in) (``"sqrt_fan_in"``)
    or k * sqrt(2 / fan_in) (``"he"``), with k ~ U[0.2, 1.2] drawn once per layer.
    """
    if scheme not in INIT_SCHEMES:
        raise UsageError(f"unknown init scheme {scheme!r}")
    dtype = as_dtype(precision)
    tensors = {}
    sigmas = {}
    for idx in sorted(spec.param_shapes):
        shapes = spec.param_shapes[idx]
        k = rng.uniform(*K_RANGE)
        fan = fan_in(spec, idx)
        if scheme == "fan_in":
            sigma = k / fan
        elif scheme == "sqrt_fan_in":
            sigma = k / math.sqrt(fan)
        else:
            sigma = k * math.sqrt(2.0 / fan)
        sigmas[idx] = sigma
        tensors[idx] = {"W": rng.gaussian(0.0, sigma, shapes["W"]).astype(dtype)}
        if "b" in shapes:
            tensors[idx]["b"] = np.zeros(shapes["b"], dtype=dtype)
    return ModelParams(tensors, {"init_sigma": sigmas, "config_hash": spec.config_hash()})


@dataclass
class OptimizerState:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5
    velocity: dict = field(default_factory=dict)


def sgd_step(params: ModelParams, grads: dict, state: OptimizerState) -> None:
    """In place: v <- mu v - lr (g + lambda p); p <- p + v. Biases skip weight decay."""
    lr, mu, wd = state.learning_rate, state.momentum, state.weight_decay
    for idx, names in params.tensors.items():
        for name, p in names.items():
            g = grads.get(idx, {}).get(name)
            if g is None:
                continue
            if g.shape != p.shape:
                raise UsageError(f"layer {idx} {name}: gradient shape {g.shape} != {p.shape}")
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in layer {idx} ({name})")
            v = state.velocity.get((idx, name))
            if v is None:
                v = state.velocity[(idx, name)] = np.zeros_like(p)
            step = g + p.dtype.type(wd) * p if (wd and name != "b") else g
            v *= p.dtype.type(mu)
            v -= p.dtype.type(lr) * step
            p += v


@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 64
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5
    dropout: float = 0.5
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)
    precision: int = 32
    widths: tuple = (64, 128, 256)
    hidden: int = 300
    init_scheme: str = "he"
    threads: int = 1

    def model_spec(self, n_classes: int) -> ModelSpec:
        return ModelSpec.standard(n_classes, widths=tuple(self.widths), hidden=self.hidden,
                               dropout=self.dropout)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        if self.augment is not None:
            d["augment"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["augment"].items()}
        return d


class StopTraining(Exception):
    """Raised by a hook to end training after the current epoch."""


@dataclass
class TrainResult:
    params: ModelParams
    history: list[dict]
    best_epoch: int


def _batch_inputs(dataset: Dataset, idx: np.ndarray, cfg: TrainConfig, rng: Rng, dtype) -> np.ndarray:
    base = dataset.inputs(dtype)[idx]
    if cfg.augment is None:
        return base
    out = np.empty_like(base)
    for j in range(len(idx)):
        out[j, 0] = apply_transform(base[j, 0], draw_transform(cfg.augment, rng))
    return out


class _MaskReplay:
    """Stands in for an Rng inside one worker: hands out slices of masks drawn up front."""

    def __init__(self, masks: list[np.ndarray], lo: int, hi: int):
        self._masks = [m[lo:hi] for m in masks]
        self._next = 0

    def bernoulli(self, p, size=None):
        m = self._masks[self._next]
        self._next += 1
        if size is not None and tuple(size) != m.shape:
            raise UsageError(f"replayed mask shape {m.shape} does not match {tuple(size)}")
        return m


def _chunks(n: int, parts: int) -> list[tuple[int, int]]:
    parts = max(1, min(parts, n))
    edges = [n * i // parts for i in range(parts + 1)]
    return list(zip(edges[:-1], edges[1:]))


def batch_gradients(net: Network, x: np.ndarray, labels: np.ndarray, rng, threads: int = 1,
                    pool: ThreadPoolExecutor | None = None):
    """Loss, probabilities and parameter gradients of one minibatch.

    With ``threads > 1`` the samples are split into contiguous chunks run on
    worker threads. Dropout masks are drawn for the whole batch first, in
    layer order, so they match the single-threaded draw exactly; chunk
    gradients are summed in ascending chunk order.
    """
    if threads <= 1 or len(x) < 2:
        logits, ctxs = net.forward(x, train=True, rng=rng)
        loss, grad, probs = softmax_xent(logits, labels)
        if not math.isfinite(loss):
            raise NumericError("non-finite loss")
        return loss, probs, net.backward(grad, ctxs)

    n = len(x)
    masks = []
    for i, layer in enumerate(net.spec.layers):
        if layer.kind == "dropout" and layer.rate > 0.0:
            masks.append(rng.bernoulli(1.0 - layer.rate, (n,) + net.spec.shapes[i]))
    spans = _chunks(n, threads)
    fwd = list(pool.map(lambda s: net.forward(x[s[0]:s[1]], train=True, rng=_MaskReplay(masks, *s)), spans))
    logits = np.concatenate([f[0] for f in fwd])
    loss, grad, probs = softmax_xent(logits, labels)
    if not math.isfinite(loss):
        raise NumericError("non-finite loss")
    parts = list(pool.map(lambda a: net.backward(grad[a[0][0]:a[0][1]], a[1][1]), zip(spans, fwd)))
    grads = parts[0]
    for part in parts[1:]:
        for i, d in part.items():
            for k, g in d.items():
                grads[i][k] = grads[i][k] + g
    return loss, probs, grads


def train(spec: ModelSpec, train_set: Dataset, valid_set: Dataset | None, cfg: TrainConfig,
          rng: Rng, params: ModelParams | None = None,
          hooks: list[Callable[[dict, Network], None]] | None = None) -> TrainResult:
    """Run ``cfg.epochs`` epochs of minibatch SGD.

    Returns the best-validation-epoch parameters when ``valid_set`` is given
    (ties to the earlier epoch), otherwise the final ones.
    """
    if len(train_set) == 0:
        raise UsageError("empty training set")
    if cfg.epochs < 1:
        raise UsageError("epochs must be >= 1")
    if cfg.threads < 1:
        raise UsageError("threads must be >= 1")
    init_rng, shuffle_rng, aug_rng, drop_rng = (rng.child(i) for i in range(4))
    if params is None:
        params = init_params(spec, init_rng, cfg.precision, cfg.init_scheme)
    net = Network(spec, params)
    state = OptimizerState(cfg.learning_rate, cfg.momentum, cfg.weight_decay)
    history = []
    best = (-1.0, 0, None)
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    try:
        return _epochs(spec, train_set, valid_set, cfg, net, params, state, history, best, pool,
                       shuffle_rng, aug_rng, drop_rng, hooks)
    finally:
        if pool is not None:
            pool.shutdown()


def _epochs(spec, train_set, valid_set, cfg, net, params, state, history, best, pool,
            shuffle_rng, aug_rng, drop_rng, hooks) -> TrainResult:
    dtype = as_dtype(cfg.precision)
    labels = train_set.labels
    n = len(train_set)
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(n)
        total_loss, correct = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x = _batch_inputs(train_set, idx, cfg, aug_rng, dtype)
            try:
                loss, probs, grads = batch_gradients(net, x, labels[idx], drop_rng, cfg.threads, pool)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}: {exc}") from None
            sgd_step(params, grads, state)
            total_loss += loss * len(idx)
            correct += int((probs.argmax(axis=1) == labels[idx]).sum())
        record = {"epoch": epoch, "train_loss": total_loss / n, "train_acc": correct / n}
        if valid_set is not None and len(valid_set):
            record["valid_acc"] = evaluate(net, valid_set)[0]
            if record["valid_acc"] > best[0]:
                best = (record["valid_acc"], epoch, params.copy())
        history.append(record)
        log.info("epoch %d %s", epoch, record)
        stop = False
        for hook in hooks or ():
            try:
                hook(record, net)
            except StopTraining:
                stop = True
        if stop:
            break
    params.metadata.update(epochs=len(history))
    if best[2] is not None:
        best[2].metadata.update(epochs=best[1])
        return TrainResult(best[2], history, best[1])
    return TrainResult(params, history, len(history))


def evaluate(net: Network, dataset: Dataset, batch: int = 64) -> tuple[float, np.ndarray]:
    """Accuracy and K x K confusion counts (rows true, columns predicted)."""
    if len(dataset) == 0:
        raise UsageError("cannot evaluate on an empty dataset")
    k = net.n_classes
    labels = dataset.labels
    if labels.max() >= k:
        raise UsageError(f"dataset has class id {labels.max()} but the model has {k} outputs")
    probs = net.predict_proba(dataset.inputs(net.params.dtype), batch)
    pred = probs.argmax(axis=1)
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    return float((pred == labels).mean()), confusion


# ---------------------------------------------------------------------------
# cross-validation


@dataclass
class CrossValResult:
    fold_accuracies: list[float]
    fold_details: list[dict]

    @property
    def mean(self) -> float:
        return float(np.mean(self.fold_accuracies))

    @property
    def std(self) -> float:
        a = self.fold_accuracies
        return float(np.std(a, ddof=1)) if len(a) > 1 else 0.0

    def summary(self) -> str:
        return format_mean_std(self.mean, self.std)


def format_mean_std(mean: float, std: float) -> str:
    return f"{100 * mean:.1f}% ± {100 * std:.1f}%"


def fold_splits(dataset: Dataset, protocol: str):
    """Yield ``(fold, train, valid_or_None, test)`` datasets."""
    if not dataset.has_folds:
        raise UsageError("dataset has no fold assignments; run split_folds first")
    folds = sorted({s.fold for s in dataset.samples})
    for f in folds:
        if protocol == "ck_plus_10fold":
            check_subject_disjoint(dataset)
            train_set = dataset.subset(lambda s: s.fold != f)
            test_set = dataset.subset(lambda s: s.fold == f)
            yield f, train_set, None, test_set
        elif protocol == "tfd_5fold":
            part = dataset.subset(lambda s: s.fold == f)
            yield (f, part.subset(lambda s: s.role == "train"), part.subset(lambda s: s.role == "valid"),
                   part.subset(lambda s: s.role == "test"))
        else:
            raise UsageError(f"unknown protocol {protocol!r}")


def cross_validate(dataset: Dataset, protocol: str, cfg: TrainConfig, rng: Rng,
                   on_fold: Callable[[dict], None] | None = None) -> CrossValResult:
    accs, details = [], []
    spec = cfg.model_spec(len(dataset.classes))
    for f, train_set, valid_set, test_set in fold_splits(dataset, protocol):
        train_ids = set(train_set.sample_ids)
        overlap = train_ids & set(test_set.sample_ids)
        if overlap:
            raise AssertionError(f"fold {f}: test samples {sorted(overlap)[:5]} also in training")
        if protocol == "ck_plus_10fold":
            shared = set(s.subject_id for s in train_set) & set(s.subject_id for s in test_set)
            if shared:
                raise AssertionError(f"fold {f}: subjects {sorted(shared)[:5]} in train and test")
        if len(test_set) == 0 or len(train_set) == 0:
            raise UsageError(f"fold {f} has an empty train or test split")
        result = train(spec, train_set, valid_set, cfg, rng.child(f))
        acc, confusion = evaluate(Network(spec, result.params), test_set)
        detail = {"fold": f, "accuracy": acc, "n_train": len(train_set), "n_test": len(test_set),
                  "best_epoch": result.best_epoch, "confusion": confusion.tolist()}
        accs.append(acc)
        details.append(detail)
        if on_fold:
            on_fold(detail)
    return CrossValResult(accs, details)


# ---------------------------------------------------------------------------
# weight files

MAGIC = b"ZBCNN1\0"
VERSION = 1
KIND_CODES = {("conv", "W"): 1, ("fullyconnected", "W"): 2, ("fullyconnected", "b"): 3}
_HEADER = struct.Struct("<IBI")
_RECORD = struct.Struct("<B4I")


def _shape4(shape) -> tuple[int, int, int, int]:
    shape = tuple(shape)
    return (1,) * (4 - len(shape)) + shape


def _checksum(payload: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def save_model(params: ModelParams, spec: ModelSpec, path) -> None:
    """Write the ZBCNN1 blob: magic, header, one record per tensor, u64 checksum.

    Conv weights keep their (F, C, k, k) shape; FC weights (d, u) are stored as
    (1, 1, d, u) and biases (u,) as (1, 1, 1, u).
    """
    items = list(params.items())
    precision = 32 if params.dtype == np.float32 else 64
    body = bytearray()
    for idx, name, arr in items:
        body += _RECORD.pack(KIND_CODES[(spec.layers[idx].kind, name)], *_shape4(arr.shape))
        body += np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
    blob = MAGIC + _HEADER.pack(VERSION, precision // 8, len(items)) + bytes(body)
    Path(path).write_bytes(blob + struct.pack("<Q", _checksum(bytes(body))))


def load_model(path, spec: ModelSpec | None = None) -> tuple[ModelParams, ModelSpec]:
    """Read a ZBCNN1 blob; ``spec`` defaults to the standard stack sized from the file."""
    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC):
        raise FormatError(f"{path}: bad magic")
    pos = len(MAGIC)
    if len(blob) < pos + _HEADER.size + 8:
        raise FormatError(f"{path}: truncated header")
    version, width, count = _HEADER.unpack_from(blob, pos)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if width not in (4, 8):
        raise FormatError(f"{path}: bad precision byte {width}")
    dtype = np.dtype("<f4" if width == 4 else "<f8")
    pos += _HEADER.size
    body_start = pos
    records = []
    for _ in range(count):
        if len(blob) < pos + _RECORD.size:
            raise FormatError(f"{path}: truncated record header")
        kind, *shape = _RECORD.unpack_from(blob, pos)
        pos += _RECORD.size
        nbytes = math.prod(shape) * width
        if len(blob) < pos + nbytes + 8:
            raise FormatError(f"{path}: truncated payload")
        arr = np.frombuffer(blob, dtype=dtype, count=math.prod(shape), offset=pos).reshape(shape)
        records.append((kind, arr.astype(dtype.newbyteorder("="))))
        pos += nbytes
    if len(blob) != pos + 8:
        raise FormatError(f"{path}: trailing bytes after payload")
    (stored,) = struct.unpack_from("<Q", blob, pos)
    if stored != _checksum(blob[body_start:pos]):
        raise FormatError(f"{path}: checksum mismatch")

    if spec is None:
        convs = [a for k, a in records if k == 1]
        fcw = [a for k, a in records if k == 2]
        if len(convs) != 3 or len(fcw) != 2:
            raise FormatError(f"{path}: not a standard-architecture model")
        spec = ModelSpec.standard(fcw[1].shape[3], widths=tuple(a.shape[0] for a in convs),
                               hidden=fcw[0].shape[3])
    expected = [(idx, name, shape) for idx in sorted(spec.param_shapes)
                for name, shape in sorted(spec.param_shapes[idx].items())]
    if len(expected) != len(records):
        raise FormatError(f"{path}: {len(records)} tensors, spec expects {len(expected)}")
    tensors: dict[int, dict[str, np.ndarray]] = {}
    for (idx, name, shape), (kind, arr) in zip(expected, records):
        if kind != KIND_CODES[(spec.layers[idx].kind, name)] or arr.shape != _shape4(shape):
            raise FormatError(f"{path}: layer {idx} {name} shape {arr.shape} does not match spec {shape}")
        tensors.setdefault(idx, {})[name] = np.ascontiguousarray(arr.reshape(shape))
    return ModelParams(tensors, {"config_hash": spec.config_hash()}), spec


def write_metrics(history: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in history:
            fh.write(json.dumps(rec) + "\n")
