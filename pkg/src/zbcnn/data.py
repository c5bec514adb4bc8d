"""Samples, datasets, manifest ingestion, standardization, augmentation and folds."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import IngestionError, UsageError
from .tensor import Rng

IMAGE_SIZE = 96

# label vocabulary accepted by manifests; CK+ uses eight of these, TFD seven
EXPRESSIONS = ("neutral", "anger", "contempt", "disgust", "fear", "happy", "sad", "surprise")

MANIFEST_COLUMNS = ("path", "subject_id", "label", "fau_list")
ROLES = ("train", "valid", "test")


@dataclass
class Sample:
    image: np.ndarray  # (96, 96) float in [0, 1]
    label: int
    fau_set: frozenset = frozenset()
    subject_id: str = ""
    sample_id: int = 0
    fold: int | None = None
    role: str | None = None
    factors: dict | None = None

    def __post_init__(self):
        if self.image.shape != (IMAGE_SIZE, IMAGE_SIZE):
            raise IngestionError(f"sample {self.sample_id}: image must be {IMAGE_SIZE}x{IMAGE_SIZE}, "
                                 f"got {self.image.shape}")


@dataclass
class Dataset:
    samples: list[Sample]
    classes: list[str]
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        k = len(self.classes)
        for s in self.samples:
            if not 0 <= s.label < k:
                raise UsageError(f"sample {s.sample_id}: label {s.label} outside [0, {k})")

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    @property
    def sample_ids(self) -> list[int]:
        return [s.sample_id for s in self.samples]

    @property
    def subjects(self) -> list[str]:
        return sorted({s.subject_id for s in self.samples})

    @property
    def has_folds(self) -> bool:
        return bool(self.samples) and all(s.fold is not None for s in self.samples)

    def subset(self, predicate) -> "Dataset":
        return Dataset([s for s in self.samples if predicate(s)], list(self.classes))

    def inputs(self, dtype=np.float32) -> np.ndarray:
        """Standardized images stacked as (n, 1, 96, 96)."""
        key = np.dtype(dtype).str
        if key not in self._cache:
            arr = np.empty((len(self.samples), 1, IMAGE_SIZE, IMAGE_SIZE), dtype=dtype)
            for i, s in enumerate(self.samples):
                arr[i, 0] = standardize(s.image)
            self._cache[key] = arr
        return self._cache[key]

    def fau_ids(self) -> list[int]:
        return sorted(set().union(*(s.fau_set for s in self.samples))) if self.samples else []


def standardize(image: np.ndarray) -> np.ndarray:
    """Per-image zero mean, unit (population) variance; constant images map to zeros."""
    image = np.asarray(image, dtype=np.float64)
    if image.size == 0 or image.min() == image.max():
        return np.zeros_like(image)
    centered = image - image.mean()
    return centered / max(float(image.std()), 1e-8)


# ---------------------------------------------------------------------------
# ingestion


def _parse_faus(text: str, row: int) -> frozenset:
    text = text.strip()
    if not text:
        return frozenset()
    try:
        return frozenset(int(t) for t in text.split(";"))
    except ValueError:
        raise IngestionError(f"row {row}: malformed fau_list {text!r}") from None


def read_gray(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode not in ("L", "P", "1"):
            raise IngestionError(f"{path}: expected 8-bit grayscale, got mode {img.mode}")
        return np.asarray(img.convert("L"), dtype=np.float64) / 255.0


def load_manifest(csv_path, image_root=None, classes=None) -> Dataset:
    """Read a ``path,subject_id,label,fau_list[,fold,role]`` CSV.

    ``classes`` fixes the label vocabulary and its order; by default the labels
    present are ordered as in :data:`EXPRESSIONS`.
    """
    csv_path = Path(csv_path)
    root = Path(image_root) if image_root is not None else csv_path.parent
    try:
        with open(csv_path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
    except FileNotFoundError:
        raise IngestionError(f"manifest {csv_path} not found") from None
    if rows and not set(MANIFEST_COLUMNS) <= set(rows[0]):
        raise IngestionError(f"manifest header must start with {','.join(MANIFEST_COLUMNS)}")

    if classes is None:
        present = {r["label"].strip() for r in rows}
        unknown = present - set(EXPRESSIONS)
        if unknown:
            raise IngestionError(f"unknown label(s) {sorted(unknown)}")
        classes = [c for c in EXPRESSIONS if c in present]
    classes = list(classes)
    index = {c: i for i, c in enumerate(classes)}

    samples = []
    for i, r in enumerate(rows):
        label = r["label"].strip()
        if label not in index:
            raise IngestionError(f"row {i}: unknown label {label!r}")
        path = root / r["path"]
        if not path.is_file():
            raise IngestionError(f"row {i}: missing image {path}")
        image = read_gray(path)
        if image.shape != (IMAGE_SIZE, IMAGE_SIZE):
            raise IngestionError(f"row {i}: image {path} is {image.shape[1]}x{image.shape[0]}, "
                                 f"expected {IMAGE_SIZE}x{IMAGE_SIZE}")
        fold = r.get("fold")
        role = r.get("role")
        try:
            fold = int(fold) if fold not in (None, "") else None
        except ValueError:
            raise IngestionError(f"row {i}: bad fold {fold!r}") from None
        role = role.strip() if role else None
        if role is not None and role not in ROLES:
            raise IngestionError(f"row {i}: bad role {role!r}")
        samples.append(Sample(image, index[label], _parse_faus(r["fau_list"], i),
                              r["subject_id"].strip(), i, fold, role))
    return Dataset(samples, classes)


def write_manifest(dataset: Dataset, out_dir, image_ext: str = "pgm") -> Path:
    """Write images and a manifest.csv under ``out_dir``; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    with_folds = dataset.has_folds
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(MANIFEST_COLUMNS) + (["fold", "role"] if with_folds else []))
        for s in dataset.samples:
            rel = f"images/{s.sample_id:06d}.{image_ext}"
            pixels = np.clip(np.rint(s.image * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(pixels, mode="L").save(out_dir / rel)
            row = [rel, s.subject_id, dataset.classes[s.label], ";".join(map(str, sorted(s.fau_set)))]
            if with_folds:
                row += [s.fold, s.role or ""]
            w.writerow(row)
    return manifest


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentConfig:
    translate_px: float = 5.0
    rotate_deg: float = 10.0
    scale_range: tuple = (0.9, 1.1)
    flip_prob: float = 0.5
    intensity_gain: tuple = (0.8, 1.2)
    intensity_bias: tuple = (-0.1, 0.1)

    def __post_init__(self):
        if not 0.0 <= self.flip_prob <= 1.0:
            raise UsageError(f"flip_prob must lie in [0, 1], got {self.flip_prob}")
        if self.translate_px < 0 or self.rotate_deg < 0:
            raise UsageError("translate_px and rotate_deg are magnitudes and must be >= 0")
        for name in ("scale_range", "intensity_gain", "intensity_bias"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise UsageError(f"{name} must be ordered, got {(lo, hi)}")
        if self.scale_range[0] <= 0:
            raise UsageError("scale must be positive")

    @classmethod
    def null(cls) -> "AugmentConfig":
        return cls(0.0, 0.0, (1.0, 1.0), 0.0, (1.0, 1.0), (0.0, 0.0))


@dataclass(frozen=True)
class Transform:
    flip: bool = False
    angle_deg: float = 0.0
    scale: float = 1.0
    tx: float = 0.0  # columns
    ty: float = 0.0  # rows
    gain: float = 1.0
    bias: float = 0.0


def draw_transform(cfg: AugmentConfig, rng: Rng) -> Transform:
    # fixed draw order keeps the stream layout stable
    flip = bool(rng.uniform() < cfg.flip_prob)
    angle = rng.uniform(-cfg.rotate_deg, cfg.rotate_deg)
    scale = rng.uniform(*cfg.scale_range)
    tx = rng.uniform(-cfg.translate_px, cfg.translate_px)
    ty = rng.uniform(-cfg.translate_px, cfg.translate_px)
    gain = rng.uniform(*cfg.intensity_gain)
    bias = rng.uniform(*cfg.intensity_bias)
    return Transform(flip, float(angle), float(scale), float(tx), float(ty), float(gain), float(bias))


def apply_transform(image: np.ndarray, t: Transform) -> np.ndarray:
    """Flip, rotate and scale about the centre, then translate; bilinear, edge-clamped."""
    h, w = image.shape
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    a = math.radians(t.angle_deg)
    # forward map on (row, col): p_out = centre + R S F (p_in - centre) + (ty, tx)
    rot = np.array([[math.cos(a), math.sin(a)], [-math.sin(a), math.cos(a)]])
    flip = np.diag([1.0, -1.0 if t.flip else 1.0])
    fwd = rot @ (t.scale * flip)
    inv = np.linalg.inv(fwd)
    offset = centre - inv @ (centre + np.array([t.ty, t.tx]))
    out = ndimage.affine_transform(np.asarray(image, dtype=np.float64), inv, offset=offset,
                                   order=1, mode="nearest")
    return t.gain * out + t.bias


def augment(image: np.ndarray, cfg: AugmentConfig, rng: Rng) -> np.ndarray:
    return apply_transform(image, draw_transform(cfg, rng))


# ---------------------------------------------------------------------------
# folds


def split_folds(dataset: Dataset, protocol: str = "ck_plus_10fold", k: int = 10,
                rng: Rng | None = None) -> Dataset:
    """Return a copy of ``dataset`` with fold assignments.

    ``ck_plus_10fold`` shuffles subjects with ``rng`` and hands each whole
    subject to the currently smallest fold (ties to the lower index).
    ``tfd_5fold`` keeps the fold/role columns supplied by the manifest.
    """
    if protocol == "tfd_5fold":
        if not dataset.has_folds or any(s.role is None for s in dataset.samples):
            raise UsageError("tfd_5fold needs fold and role columns in the manifest")
        return dataset
    if protocol != "ck_plus_10fold":
        raise UsageError(f"unknown protocol {protocol!r}")
    subjects = dataset.subjects
    if len(subjects) < k:
        raise UsageError(f"{len(subjects)} subjects cannot fill {k} folds")
    if rng is None:
        raise UsageError("ck_plus_10fold needs an rng")
    counts = {}
    for s in dataset.samples:
        counts[s.subject_id] = counts.get(s.subject_id, 0) + 1
    order = rng.shuffle(list(subjects))
    sizes = [0] * k
    fold_of = {}
    for subj in order:
        f = min(range(k), key=lambda i: (sizes[i], i))
        fold_of[subj] = f
        sizes[f] += counts[subj]
    samples = [replace(s, fold=fold_of[s.subject_id], role=None) for s in dataset.samples]
    out = Dataset(samples, list(dataset.classes))
    check_subject_disjoint(out)
    return out


def check_subject_disjoint(dataset: Dataset) -> None:
    owner = {}
    for s in dataset.samples:
        if owner.setdefault(s.subject_id, s.fold) != s.fold:
            raise AssertionError(f"subject {s.subject_id} appears in folds {owner[s.subject_id]} and {s.fold}")
