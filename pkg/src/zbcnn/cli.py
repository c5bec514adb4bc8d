"""``zbcnn`` command line.

Exit codes: 0 success, 1 usage error, 2 data or file-format error, 3 numeric
failure (non-finite values, failed gradient check or invariant check).
Summaries go to stdout, diagnostics to stderr; every command writes the
resolved configuration to ``<out>/config.txt``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import fau as fau_mod
from . import gradcheck, introspect
from .config import RunConfig, load_config
from .data import Dataset, load_manifest, split_folds
from .errors import DataError, NumericError, UsageError, ZbcnnError
from .model import Network
from .synth import FAU_NAMES, SYNTH_CLASSES, synth_generate, write_synth
from .tensor import Rng
from .trainer import cross_validate, evaluate, load_model, save_model, train, write_metrics

log = logging.getLogger("zbcnn")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# flags shared by several commands; dest names match RunConfig keys
def _add_common(p):
    p.add_argument("--config", help="key = value run configuration file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--threads", type=int)


def _add_data(p):
    p.add_argument("--manifest")
    p.add_argument("--image-root", dest="image_root")
    p.add_argument("--classes", help="comma-separated class list (default: labels in the manifest)")


def _add_training(p):
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--dropout", type=float)
    p.add_argument("--widths", help="three conv widths, e.g. 64,128,256")
    p.add_argument("--hidden", type=int)
    p.add_argument("--init-scheme", dest="init_scheme")
    p.add_argument("--precision", type=int, choices=(32, 64))
    p.add_argument("--no-augment", dest="augment", action="store_false", default=None)


def _add_model(p):
    p.add_argument("--weights", required=True)
    p.add_argument("--layer", type=int)
    p.add_argument("--filters", default="auto:10", help="comma list of filter ids, 'all' or auto:K")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="zbcnn", description="Zero-bias CNN for facial expressions: training, "
                                               "visualization and action-unit analysis.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic face dataset")
    _add_common(p)
    p.add_argument("--subjects", dest="synth_subjects", type=int)
    p.add_argument("--per-subject", dest="synth_per_subject", type=int)
    p.add_argument("--classes")

    p = sub.add_parser("train", help="train a model on a manifest")
    _add_common(p)
    _add_data(p)
    _add_training(p)
    p.add_argument("--valid-manifest", dest="valid_manifest")

    p = sub.add_parser("eval", help="accuracy and confusion matrix of a trained model")
    _add_common(p)
    _add_data(p)
    p.add_argument("--weights", required=True)

    p = sub.add_parser("crossval", help="k-fold cross-validation")
    _add_common(p)
    _add_data(p)
    _add_training(p)
    p.add_argument("--protocol", choices=("ck_plus_10fold", "tfd_5fold"))
    p.add_argument("--folds", type=int)

    p = sub.add_parser("visualize", help="top-N reconstructions of conv filters")
    _add_common(p)
    _add_data(p)
    _add_model(p)
    p.add_argument("--topn", type=int)
    p.add_argument("--mode", choices=introspect.MODES, default="guided")
    p.add_argument("--overlay", choices=introspect.OVERLAYS, default="reconstruction")
    p.add_argument("--verify", action="store_true",
                   help="also render the other mode and check guided support against plain")

    p = sub.add_parser("analyze-fau", help="KL divergence between filters and action units")
    _add_common(p)
    _add_data(p)
    _add_model(p)
    p.add_argument("--bins", type=int)
    p.add_argument("--min-support", dest="min_support", type=int)
    p.add_argument("--no-plots", dest="plots", action="store_false")

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer kind")
    _add_common(p)
    return parser


_NOT_CONFIG = {"command", "verbose", "config", "weights", "mode", "overlay", "verify", "filters", "plots"}


def _resolve(args) -> RunConfig:
    overrides = {k: v for k, v in vars(args).items() if k not in _NOT_CONFIG}
    return load_config(args.config, overrides)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.txt")
    return out


def _load(cfg: RunConfig, path: str | None = None) -> Dataset:
    path = path or cfg.manifest
    if not path:
        raise UsageError("no manifest given (--manifest or 'manifest' in the config)")
    classes = cfg.class_list or None
    ds = load_manifest(path, cfg.image_root or None, classes)
    if not cfg.class_list:
        cfg.classes = ",".join(ds.classes)
    return ds


def _load_net(cfg: RunConfig, weights: str, ds: Dataset) -> Network:
    params, spec = load_model(weights)
    if spec.n_classes != len(ds.classes):
        raise UsageError(f"model has {spec.n_classes} outputs but the class list has {len(ds.classes)}")
    return Network(spec, params)


def _parse_filters(text: str, net: Network, ds: Dataset, layer: int, records) -> list[int]:
    n_filters = net.spec.shapes[net.spec.conv_index(layer) + 1][0]
    text = text.strip()
    if text == "all":
        return list(range(n_filters))
    if text.startswith("auto:"):
        try:
            k = int(text[5:])
        except ValueError:
            raise UsageError(f"bad filter selector {text!r}") from None
        if not 1 <= k <= n_filters:
            raise UsageError(f"auto:K needs 1 <= K <= {n_filters}")
        return fau_mod.filter_selectivity_rank(net, ds, layer, records=records)[:k]
    try:
        filters = [int(f) for f in text.split(",") if f.strip()]
    except ValueError:
        raise UsageError(f"bad filter list {text!r}") from None
    bad = [f for f in filters if not 0 <= f < n_filters]
    if bad or not filters:
        raise UsageError(f"filters must lie in [0, {n_filters}), got {text!r}")
    return filters


def _warn(msg: str) -> None:
    print(f"warning: {msg}", file=sys.stderr)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, cfg: RunConfig) -> int:
    classes = cfg.class_list or list(SYNTH_CLASSES)
    ds = synth_generate(cfg.synth_subjects, cfg.synth_per_subject, classes, Rng(cfg.seed))
    out = _out_dir(cfg)
    manifest = write_synth(ds, out)
    print(f"wrote {len(ds)} samples ({len(set(ds.subjects))} subjects, {len(classes)} classes) to {manifest}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    train_set = _load(cfg)
    valid_set = _load(cfg, cfg.valid_manifest) if cfg.valid_manifest else None
    tcfg = cfg.train_config()
    spec = tcfg.model_spec(len(train_set.classes))
    out = _out_dir(cfg)
    result = train(spec, train_set, valid_set, tcfg, Rng(cfg.seed))
    save_model(result.params, spec, out / "weights.zbcnn")
    write_metrics(result.history, out / "metrics.jsonl")
    last = result.history[-1]
    print(f"trained {len(result.history)} epochs; final train acc {last['train_acc']:.4f}"
          + (f"; best valid acc at epoch {result.best_epoch}" if valid_set is not None else ""))
    print(f"weights: {out / 'weights.zbcnn'}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    ds = _load(cfg)
    net = _load_net(cfg, args.weights, ds)
    out = _out_dir(cfg)
    acc, confusion = evaluate(net, ds)
    (out / "eval.json").write_text(json.dumps({"accuracy": acc, "classes": ds.classes,
                                               "confusion": confusion.tolist()}, indent=1))
    print(f"accuracy {100 * acc:.1f}% on {len(ds)} samples")
    width = max(len(c) for c in ds.classes)
    for c, row in zip(ds.classes, confusion):
        print(f"  {c:>{width}} " + " ".join(f"{v:5d}" for v in row))
    return 0


def cmd_crossval(args, cfg: RunConfig) -> int:
    ds = _load(cfg)
    rng = Rng(cfg.seed)
    if cfg.protocol == "ck_plus_10fold":
        ds = split_folds(ds, cfg.protocol, cfg.folds, rng.child(0))
    else:
        ds = split_folds(ds, cfg.protocol)
    out = _out_dir(cfg)

    def on_fold(d):
        print(f"fold {d['fold']}: {100 * d['accuracy']:.1f}% ({d['n_test']} test samples)", flush=True)

    try:
        result = cross_validate(ds, cfg.protocol, cfg.train_config(), rng.child(1), on_fold)
    except AssertionError as exc:
        raise DataError(f"fold leak: {exc}") from None
    (out / "crossval.json").write_text(json.dumps({"protocol": cfg.protocol, "mean": result.mean,
                                                   "std": result.std, "folds": result.fold_details},
                                                  indent=1))
    print(f"{cfg.protocol}: {result.summary()}")
    return 0


def _verify_support(net: Network, ds: Dataset, filters, entries, layer: int) -> int:
    inputs = ds.inputs(net.params.dtype)
    row_of = {sid: i for i, sid in enumerate(ds.sample_ids)}
    bad = 0
    for e in entries:
        cache = introspect.ForwardCache(net, inputs[row_of[e["sample_id"]]], layer)
        neuron = introspect.NeuronRef(layer, e["filter"], *e["position"])
        if not introspect.guided_within_plain(cache, neuron):
            bad += 1
            _warn(f"guided support escapes plain support for {neuron}")
    return bad


def cmd_visualize(args, cfg: RunConfig) -> int:
    ds = _load(cfg)
    net = _load_net(cfg, args.weights, ds)
    out = _out_dir(cfg)
    topn = cfg.topn
    if topn > len(ds):
        _warn(f"--topn {topn} exceeds the {len(ds)} samples; showing all of them")
        topn = len(ds)
    maxima = introspect.activation_maxima(net, ds.inputs(net.params.dtype), cfg.layer)
    records = [fau_mod.ActivationRecord(f, maxima[0][:, f].astype(np.float64), ds.sample_ids)
               for f in range(maxima[0].shape[1])]
    filters = _parse_filters(args.filters, net, ds, cfg.layer, records)
    modes = introspect.MODES if args.verify else (args.mode,)
    for mode in modes:
        cells, inputs, entries = introspect.visualize_filters(net, ds, filters, topn, cfg.layer, mode, maxima)
        path = out / f"grid_{mode}.png"
        introspect.render_grid(cells, path, args.overlay, inputs, entries=entries)
        print(f"wrote {len(filters)}x{topn} grid to {path}")
    if args.verify:
        bad = _verify_support(net, ds, filters, entries, cfg.layer)
        if bad:
            raise NumericError(f"{bad} of {len(entries)} neurons violate guided-within-plain support")
        print(f"verified guided support within plain support on {len(entries)} neurons")
    return 0


def cmd_analyze_fau(args, cfg: RunConfig) -> int:
    ds = _load(cfg)
    net = _load_net(cfg, args.weights, ds)
    if cfg.bins < 2:
        raise UsageError(f"--bins must be >= 2, got {cfg.bins}")
    out = _out_dir(cfg)
    records = fau_mod.collect_activations(net, ds, cfg.layer)
    filters = _parse_filters(args.filters, net, ds, cfg.layer, records)
    report = fau_mod.fau_report(net, ds, filters, cfg.bins, cfg.layer, cfg.min_support, records)
    report.write_csv(out / "kl_report.csv")
    synthetic = (Path(cfg.manifest).parent / "factors.csv").is_file()
    names = FAU_NAMES if synthetic else None
    fau_mod.write_bar_data(report, out / "bars", names)
    if args.plots:
        for f in filters:
            fau_mod.plot_bar_chart(report, f, out / "bars" / f"filter_{f:03d}.png", names)
    unsupported = sum(1 for r in report.rows if not r.supported)
    if unsupported:
        _warn(f"{unsupported} (filter, FAU) pairs lack support on one side and were skipped")
    for f, j in sorted(report.top().items()):
        label = (names or {}).get(j, f"AU{j}")
        print(f"filter {f:3d}: top unit {label}")
    print(f"report: {out / 'kl_report.csv'}")
    return 0


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    results = gradcheck.run_suite(cfg.seed)
    for r in results:
        print(r)
    (out / "gradcheck.json").write_text(json.dumps(
        [{"layer": r.layer, "max_rel_err": r.max_rel_err, "n_checked": r.n_checked, "passed": r.passed}
         for r in results], indent=1))
    failed = [r.layer for r in results if not r.passed]
    if failed:
        raise NumericError(f"gradient check failed for: {', '.join(failed)}")
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "crossval": cmd_crossval,
            "visualize": cmd_visualize, "analyze-fau": cmd_analyze_fau, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        if args.command is None:
            raise UsageError("no command given; see zbcnn --help")
        cfg = _resolve(args)
        if cfg.threads < 1:
            raise UsageError("--threads must be >= 1")
        return COMMANDS[args.command](args, cfg)
    except ZbcnnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return NumericError.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
