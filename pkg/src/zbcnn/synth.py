"""Procedural 96x96 cartoon faces driven by five expression factors.

The factors play the role of ground-truth action units: each synthetic FAU is
a threshold on one factor, so the FAU labels of every sample are known
exactly and can be checked against what a trained network responds to.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .data import IMAGE_SIZE, Dataset, Sample, write_manifest
from .errors import UsageError
from .tensor import Rng

FACTORS = ("brow_raise", "mouth_corner", "mouth_open", "nose_wrinkle", "eye_open")
SYNTH_CLASSES = ("neutral", "happy", "sad", "surprise", "anger", "disgust")

# (factor, sign) pairs with magnitude U[0.6, 1.0]; sad's brow is the mild U[0.3, 0.6] one
SIGNATURES = {
    "neutral": {},
    "happy": {"mouth_corner": +1},
    "sad": {"mouth_corner": -1, "brow_raise": +1},
    "surprise": {"mouth_open": +1, "brow_raise": +1},
    "anger": {"brow_raise": -1},
    "disgust": {"nose_wrinkle": +1},
}

FAU_NAMES = {
    1: "A1 brow raiser",
    2: "A2 brow lowerer",
    3: "A3 lip corner puller",
    4: "A4 lip corner depressor",
    5: "A5 mouth stretch",
    6: "A6 nose wrinkler",
}

# facial part each FAU lives in; used by the region checks on reconstructions
FAU_REGION = {1: "brow", 2: "brow", 3: "mouth", 4: "mouth", 5: "mouth", 6: "nose"}

BACKGROUND = 0.1
SKIN = 0.8
FEATURE = 0.15
NOISE_SIGMA = 0.02

# expression geometry, in pixels at unit face size
MOUTH_BEND = 6.0
BROW_TRAVEL = 5.0
MOUTH_OPEN_RY = 9.0
LINE_HALF_WIDTH = 1.3


def fau_set(f: dict) -> frozenset:
    out = set()
    if f["brow_raise"] > 0.5:
        out.add(1)
    if f["brow_raise"] < -0.5:
        out.add(2)
    if f["mouth_corner"] > 0.5:
        out.add(3)
    if f["mouth_corner"] < -0.5:
        out.add(4)
    if f["mouth_open"] > 0.5:
        out.add(5)
    if f["nose_wrinkle"] > 0.5:
        out.add(6)
    return frozenset(out)


def classify_factors(f: dict) -> str:
    """Recover the class from a factor vector (inverse of :func:`draw_factors`)."""
    if f["mouth_open"] >= 0.6:
        return "surprise"
    if f["mouth_corner"] >= 0.6:
        return "happy"
    if f["mouth_corner"] <= -0.6:
        return "sad"
    if f["brow_raise"] <= -0.6:
        return "anger"
    if f["nose_wrinkle"] >= 0.6:
        return "disgust"
    return "neutral"


def draw_factors(cls: str, rng: Rng) -> dict:
    sig = SIGNATURES[cls]
    f = {}
    for name in ("brow_raise", "mouth_corner"):
        if name in sig:
            lo, hi = (0.3, 0.6) if (cls, name) == ("sad", "brow_raise") else (0.6, 1.0)
            f[name] = sig[name] * rng.uniform(lo, hi)
        else:
            f[name] = rng.uniform(-0.2, 0.2)
    for name in ("mouth_open", "nose_wrinkle"):
        f[name] = rng.uniform(0.6, 1.0) if name in sig else rng.uniform(0.0, 0.2)
    f["eye_open"] = rng.uniform(0.6, 1.0)
    return {k: float(v) for k, v in f.items()}


def _ellipse(yy, xx, cy, cx, ry, rx):
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _segment(yy, xx, y0, x0, y1, x1, half_width):
    dy, dx = y1 - y0, x1 - x0
    t = np.clip(((yy - y0) * dy + (xx - x0) * dx) / (dy * dy + dx * dx), 0.0, 1.0)
    return (yy - (y0 + t * dy)) ** 2 + (xx - (x0 + t * dx)) ** 2 <= half_width ** 2


def render_face(f: dict, centre=(48.0, 48.0), size: float = 1.0, rng: Rng | None = None) -> np.ndarray:
    """Draw one face; ``rng`` adds the pixel noise (omitted when ``None``)."""
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float64)
    cy, cx = centre
    s = size
    img = np.full((IMAGE_SIZE, IMAGE_SIZE), BACKGROUND)
    img[_ellipse(yy, xx, cy, cx, 40 * s, 31 * s)] = SKIN

    # eyes
    for side in (-1, 1):
        ex = cx + side * 12 * s
        img[_ellipse(yy, xx, cy - 11 * s, ex, max(4.5 * s * f["eye_open"], 0.6), 5.5 * s)] = FEATURE

    # brows: raised brows lift and tilt the inner ends up, lowered ones pull them down
    b = f["brow_raise"]
    base = cy - 21 * s
    for side in (-1, 1):
        inner_x, outer_x = cx + side * 5 * s, cx + side * 19 * s
        inner_y = base - BROW_TRAVEL * s * b
        outer_y = base - 0.4 * BROW_TRAVEL * s * b
        img[_segment(yy, xx, inner_y, inner_x, outer_y, outer_x, LINE_HALF_WIDTH * s)] = FEATURE

    # nose bridge and wrinkle lines
    img[_segment(yy, xx, cy - 4 * s, cx, cy + 6 * s, cx, 0.8 * s)] = 0.55
    n_lines = int(np.ceil(3 * f["nose_wrinkle"] - 1e-9)) if f["nose_wrinkle"] > 0.25 else 0
    for k in range(n_lines):
        ly = cy + (0.5 + 2.5 * k) * s
        img[_segment(yy, xx, ly, cx - 7 * s, ly, cx + 7 * s, 0.7 * s)] = 0.8 - 0.6 * f["nose_wrinkle"]

    # mouth: open mouth as a dark ellipse, then the lip arc on top
    my = cy + 20 * s
    half = 12 * s
    if f["mouth_open"] > 0.05:
        img[_ellipse(yy, xx, my, cx, MOUTH_OPEN_RY * s * f["mouth_open"], 9 * s)] = 0.05
    bend = MOUTH_BEND * s * f["mouth_corner"]
    u = (xx - cx) / half
    arc_y = my - bend * (u ** 2 - 0.5)
    img[(np.abs(u) <= 1.0) & (np.abs(yy - arc_y) <= LINE_HALF_WIDTH * s)] = FEATURE

    if rng is not None:
        img = img + rng.gaussian(0.0, NOISE_SIGMA, img.shape)
    return np.clip(img, 0.0, 1.0)


def synth_generate(n_subjects: int, samples_per_subject: int, classes=SYNTH_CLASSES,
                   rng: Rng | None = None) -> Dataset:
    """Generate a balanced synthetic dataset.

    Each subject has a fixed face centre offset (+-3 px) and size (+-5%);
    labels cycle through ``classes`` within each subject.
    """
    classes = list(classes)
    unknown = [c for c in classes if c not in SIGNATURES]
    if unknown:
        raise UsageError(f"unknown synthetic class(es) {unknown}; choose from {list(SYNTH_CLASSES)}")
    if n_subjects < 10:
        raise UsageError("synthetic datasets need at least 10 subjects")
    if samples_per_subject < 1:
        raise UsageError("samples_per_subject must be >= 1")
    if rng is None:
        raise UsageError("synth_generate needs an rng")
    samples = []
    sid = 0
    for subj in range(n_subjects):
        centre = (48.0 + rng.uniform(-3, 3), 48.0 + rng.uniform(-3, 3))
        size = 1.0 + rng.uniform(-0.05, 0.05)
        offset = int(rng.integers(0, len(classes)))
        for j in range(samples_per_subject):
            cls = classes[(offset + j) % len(classes)]
            f = draw_factors(cls, rng)
            image = render_face(f, centre, size, rng)
            meta = dict(f, centre_y=centre[0], centre_x=centre[1], size=size)
            samples.append(Sample(image, classes.index(cls), fau_set(f), f"S{subj:03d}", sid,
                                  factors=meta))
            sid += 1
    return Dataset(samples, classes)


def write_synth(dataset: Dataset, out_dir) -> Path:
    """Write PGM images, manifest.csv and factors.csv; returns the manifest path."""
    out_dir = Path(out_dir)
    manifest = write_manifest(dataset, out_dir, image_ext="pgm")
    with open(out_dir / "factors.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("sample_id",) + FACTORS)
        for s in dataset.samples:
            w.writerow([s.sample_id] + [repr(s.factors[k]) for k in FACTORS])
    return manifest


def read_factors(path) -> dict[int, dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return {int(r["sample_id"]): {k: float(r[k]) for k in FACTORS} for r in csv.DictReader(fh)}
