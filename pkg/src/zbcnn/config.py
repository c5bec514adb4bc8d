"""Run configuration: a flat ``key = value`` file (``#`` starts a comment).

Every key has a default; command-line flags override file values and the
resolved result is written next to a run's outputs so it can be replayed.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .data import AugmentConfig
from .errors import UsageError
from .trainer import TrainConfig


@dataclass
class RunConfig:
    seed: int = 0
    # data
    manifest: str = ""
    image_root: str = ""
    valid_manifest: str = ""
    classes: str = ""  # empty: labels present in the manifest (synth: the six synthetic classes)
    synth_subjects: int = 60
    synth_per_subject: int = 25
    # model and optimizer defaults
    widths: str = "64,128,256"
    hidden: int = 300
    dropout: float = 0.5
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5
    batch_size: int = 64
    init_scheme: str = "he"
    precision: int = 32
    epochs: int = 150
    # augmentation
    augment: bool = True
    translate_px: float = 5.0
    rotate_deg: float = 10.0
    scale_min: float = 0.9
    scale_max: float = 1.1
    flip_prob: float = 0.5
    gain_min: float = 0.8
    gain_max: float = 1.2
    bias_min: float = -0.1
    bias_max: float = 0.1
    # protocols and analysis
    protocol: str = "ck_plus_10fold"
    folds: int = 10
    layer: int = 3
    topn: int = 10
    bins: int = 32
    min_support: int = 5
    threads: int = 1
    out: str = "run"

    @property
    def class_list(self) -> list[str]:
        return [c.strip() for c in self.classes.split(",") if c.strip()]

    def augment_config(self) -> AugmentConfig | None:
        if not self.augment:
            return None
        return AugmentConfig(self.translate_px, self.rotate_deg, (self.scale_min, self.scale_max),
                             self.flip_prob, (self.gain_min, self.gain_max), (self.bias_min, self.bias_max))

    def train_config(self) -> TrainConfig:
        try:
            widths = tuple(int(w) for w in self.widths.split(","))
        except ValueError:
            raise UsageError(f"widths must be three integers, got {self.widths!r}") from None
        if len(widths) != 3:
            raise UsageError(f"widths must be three integers, got {self.widths!r}")
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, learning_rate=self.learning_rate,
                           momentum=self.momentum, weight_decay=self.weight_decay, dropout=self.dropout,
                           augment=self.augment_config(), precision=self.precision, widths=widths,
                           hidden=self.hidden, init_scheme=self.init_scheme, threads=self.threads)

    def to_text(self) -> str:
        lines = ["# resolved run configuration"]
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


def _convert(name: str, kind, text: str):
    try:
        if kind is bool or kind == "bool":
            low = text.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int or kind == "int":
            return int(text)
        if kind is float or kind == "float":
            return float(text)
        return text.strip()
    except ValueError:
        raise UsageError(f"config key {name!r}: cannot parse {text!r}") from None


def parse_config(text: str) -> dict:
    """Parse ``key = value`` lines into a dict of typed values."""
    types = {f.name: f.type for f in fields(RunConfig)}
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in types:
            raise UsageError(f"config line {lineno}: unknown key {key!r}")
        out[key] = _convert(key, types[key], value)
    return out


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    values = {}
    if path:
        try:
            values.update(parse_config(Path(path).read_text(encoding="utf-8")))
        except FileNotFoundError:
            raise UsageError(f"config file {path} not found") from None
    types = {f.name: f.type for f in fields(RunConfig)}
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        if k not in types:
            raise UsageError(f"unknown config key {k!r}")
        values[k] = _convert(k, types[k], str(v)) if isinstance(v, str) else v
    return dataclasses.replace(RunConfig(), **values)
