"""Which action unit shifts a filter's activation distribution the most.

For a filter i and action unit j the samples are split by whether j is
labelled, a histogram of the filter's per-sample maximum response is built
for each side, and the two are compared with the KL divergence
D(Q || R) = sum_b Q_b ln(Q_b / R_b), Q for the samples showing j.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset
from .errors import UsageError
from .introspect import activation_maxima
from .model import Network

DEFAULT_BINS = 32
MIN_SUPPORT = 5
PSEUDO_COUNT = 1.0


@dataclass
class ActivationRecord:
    filter: int
    values: np.ndarray  # one post-ReLU spatial max per sample
    sample_ids: list[int]


@dataclass
class Histogram:
    masses: np.ndarray
    lo: float
    hi: float

    @property
    def bins(self) -> int:
        return len(self.masses)


def collect_activations(net: Network, dataset: Dataset, layer: int = 3) -> list[ActivationRecord]:
    spec = net.spec
    idx = spec.conv_index(layer)
    if len(spec.shapes[idx + 1]) != 3 or spec.shapes[idx + 1][1] * spec.shapes[idx + 1][2] == 0:
        raise UsageError(f"layer {layer} has no spatial activations")
    values, _ = activation_maxima(net, dataset.inputs(net.params.dtype), layer)
    ids = dataset.sample_ids
    return [ActivationRecord(f, values[:, f].astype(np.float64), ids) for f in range(values.shape[1])]


def partition_by_fau(dataset: Dataset, fau: int) -> tuple[list[int], list[int]]:
    """Sample ids with ``fau`` in their label set, and the rest."""
    inside = [s.sample_id for s in dataset.samples if fau in s.fau_set]
    outside = [s.sample_id for s in dataset.samples if fau not in s.fau_set]
    return inside, outside


def histogram(values, lo: float, hi: float, bins: int, pseudo: float = PSEUDO_COUNT) -> Histogram:
    """Equal-width histogram over [lo, hi] (top edge in the last bin), smoothed and normalised."""
    if bins < 2:
        raise UsageError(f"need at least 2 bins, got {bins}")
    values = np.asarray(values, dtype=np.float64)
    idx = np.floor((values - lo) / (hi - lo) * bins).astype(np.int64)
    idx = np.clip(idx, 0, bins - 1)
    counts = np.bincount(idx, minlength=bins).astype(np.float64) + pseudo
    return Histogram(counts / counts.sum(), lo, hi)


def build_histogram_pair(record: ActivationRecord, inside, outside, bins: int = DEFAULT_BINS,
                         min_support: int = MIN_SUPPORT):
    """Smoothed histograms (Q over ``inside``, R over ``outside``) on a shared range.

    Returns ``None`` when either side has fewer than ``min_support`` samples.
    """
    if bins < 2:
        raise UsageError(f"need at least 2 bins, got {bins}")
    if len(inside) < min_support or len(outside) < min_support:
        return None
    pos = {sid: i for i, sid in enumerate(record.sample_ids)}
    q_vals = record.values[[pos[s] for s in inside]]
    r_vals = record.values[[pos[s] for s in outside]]
    hi = float(max(q_vals.max(), r_vals.max()))
    if hi <= 0.0:
        hi = 1.0
    return histogram(q_vals, 0.0, hi, bins), histogram(r_vals, 0.0, hi, bins)


def kl_divergence(q: Histogram, r: Histogram) -> float:
    """KL(q || r) in nats."""
    if q.bins != r.bins or q.lo != r.lo or q.hi != r.hi:
        raise UsageError("histograms must share bins and range")
    qm, rm = q.masses, r.masses
    if np.any(qm <= 0) or np.any(rm <= 0):
        raise UsageError("KL divergence needs strictly positive masses")
    return float(np.sum(qm * np.log(qm / rm)))


@dataclass
class KLRow:
    filter: int
    fau: int
    kl: float | None
    support_s: int
    support_sc: int
    is_top: bool = False

    @property
    def supported(self) -> bool:
        return self.kl is not None


@dataclass
class KLReport:
    rows: list[KLRow] = field(default_factory=list)

    def top(self) -> dict[int, int]:
        """filter -> FAU with the largest divergence."""
        return {r.filter: r.fau for r in self.rows if r.is_top}

    def for_filter(self, f: int) -> list[KLRow]:
        return [r for r in self.rows if r.filter == f]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["filter", "fau", "kl", "support_S", "support_Sc", "is_top"])
            for r in self.rows:
                w.writerow([r.filter, r.fau, "" if r.kl is None else repr(r.kl), r.support_s,
                            r.support_sc, int(r.is_top)])


def analyze_records(records: list[ActivationRecord], dataset: Dataset, faus=None,
                    bins: int = DEFAULT_BINS, min_support: int = MIN_SUPPORT) -> KLReport:
    """Run the split/histogram/KL procedure for every (record, FAU) pair."""
    if bins < 2:
        raise UsageError(f"need at least 2 bins, got {bins}")
    faus = dataset.fau_ids() if faus is None else list(faus)
    parts = {j: partition_by_fau(dataset, j) for j in faus}
    report = KLReport()
    any_supported = False
    for rec in records:
        rows = []
        for j in faus:
            inside, outside = parts[j]
            pair = build_histogram_pair(rec, inside, outside, bins, min_support)
            kl = kl_divergence(*pair) if pair is not None else None
            rows.append(KLRow(rec.filter, j, kl, len(inside), len(outside)))
        supported = [r for r in rows if r.supported]
        if supported:
            any_supported = True
            # ties go to the lower FAU id
            max(supported, key=lambda r: (r.kl, -r.fau)).is_top = True
        report.rows.extend(rows)
    if not any_supported:
        raise UsageError("no (filter, FAU) pair has enough support on both sides")
    return report


def fau_report(net: Network, dataset: Dataset, filters, bins: int = DEFAULT_BINS,
               layer: int = 3, min_support: int = MIN_SUPPORT, records=None) -> KLReport:
    records = collect_activations(net, dataset, layer) if records is None else records
    by_filter = {r.filter: r for r in records}
    missing = [f for f in filters if f not in by_filter]
    if missing:
        raise UsageError(f"filters {missing} not in layer {layer}")
    return analyze_records([by_filter[f] for f in filters], dataset, bins=bins, min_support=min_support)


def filter_selectivity(records: list[ActivationRecord], dataset: Dataset) -> np.ndarray:
    """Variance across classes of each filter's class-mean response."""
    labels = dataset.labels
    classes = sorted(set(labels.tolist()))
    out = np.empty(len(records))
    for i, rec in enumerate(records):
        means = [rec.values[labels == c].mean() for c in classes]
        out[i] = np.var(means)
    return out


def filter_selectivity_rank(net: Network, dataset: Dataset, layer: int = 3, records=None) -> list[int]:
    """Filters sorted by descending selectivity (stable on ties)."""
    records = collect_activations(net, dataset, layer) if records is None else records
    sel = filter_selectivity(records, dataset)
    order = sorted(range(len(records)), key=lambda i: (-sel[i], records[i].filter))
    return [records[i].filter for i in order]


def write_bar_data(report: KLReport, out_dir, names: dict[int, str] | None = None) -> list[Path]:
    """One ``filter_<i>.csv`` (fau_id, fau_name, kl) per filter."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = names or {}
    paths = []
    for f in sorted({r.filter for r in report.rows}):
        p = out_dir / f"filter_{f:03d}.csv"
        with open(p, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["fau_id", "fau_name", "kl"])
            for r in report.for_filter(f):
                w.writerow([r.fau, names.get(r.fau, f"AU{r.fau}"), "" if r.kl is None else repr(r.kl)])
        paths.append(p)
    return paths


def plot_bar_chart(report: KLReport, f: int, path, names: dict[int, str] | None = None) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = [r for r in report.for_filter(f) if r.supported]
    names = names or {}
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.bar([names.get(r.fau, f"AU{r.fau}") for r in rows], [r.kl for r in rows],
           color=["tab:red" if r.is_top else "tab:blue" for r in rows])
    ax.set_xlabel("action unit")
    ax.set_ylabel("KL divergence (nats)")
    ax.set_title(f"filter {f}")
    ax.tick_params(axis="x", rotation=45, labelsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
