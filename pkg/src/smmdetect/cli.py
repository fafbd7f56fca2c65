"""Command-line entry point.

Every command writes its outputs plus a ``manifest.txt`` (key=value, values
JSON-encoded) into ``--out``; ``smmdetect replay <manifest>`` re-runs it.
Exit codes: 0 success, 1 usage, 2 data, 3 numeric.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dataio import (CsvSchemaError, build_sequences, generate_synthetic, load_csv, load_dataset,
                     loso_splits, prepare_dataset, save_dataset, write_csv)
from .experiments import (EnsembleSpec, ExperimentConfig, TransferConfig, compute_metrics,
                          load_ensemble, run_baselines, run_dynamic, run_ensemble,
                          run_feature_learning, run_transfer, save_ensemble, train_cnn,
                          train_cnn_lstm, train_ensemble, write_results_csv)
from .models import NumericError, build_cnn, load_model, predict_labels, save_model
from .optim import ParamFileError, ShapeMismatchError, load_params
from .signal import window_length, window_overlap
from .tensorcore import Rng

log = logging.getLogger("smmdetect")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- manifest -------------------------------------------------------------------------

def write_manifest(out: Path, args: argparse.Namespace, outputs: dict, extra: dict | None = None):
    lines = [f"version={json.dumps(__version__)}"]
    for k, v in sorted(vars(args).items()):
        if k in ("func", "config"):
            continue
        lines.append(f"arg.{k}={json.dumps(v)}")
    for k, v in (extra or {}).items():
        lines.append(f"{k}={json.dumps(v)}")
    for k, v in outputs.items():
        lines.append(f"output.{k}={json.dumps(str(v))}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")


def read_manifest(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        k, v = line.split("=", 1)
        out[k] = json.loads(v)
    return out


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _exp_config(args, **over) -> ExperimentConfig:
    keys = ExperimentConfig.__dataclass_fields__
    vals = {k: getattr(args, k) for k in keys if hasattr(args, k)}
    vals.update(over)
    return ExperimentConfig(**vals)


def _check_finite(table_or_values):
    vals = np.asarray(table_or_values, dtype=float)
    if not np.all(np.isfinite(vals)):
        raise NumericError("non-finite value in results")


def _table_values(tables):
    return [v for t in tables for v in t.summary().values()]


# --- commands ---------------------------------------------------------------------------

def cmd_synth(args):
    if not 0.0 < args.smm < 1.0:
        raise UsageError(f"--smm must be in (0, 1), got {args.smm}")
    if args.subjects < 1 or args.minutes <= 0 or args.rate <= 0:
        raise UsageError("--subjects, --minutes and --rate must be positive")
    out = _out_dir(args)
    recs = generate_synthetic(Rng(args.seed), args.subjects, args.minutes * 60.0, args.rate,
                              args.smm, tuple(args.band))
    outputs = {}
    total = smm = 0
    for rec in recs:
        path = out / f"{rec.subject_id}.csv"
        write_csv(rec, path)
        outputs[rec.subject_id] = path
        mask = rec.smm_mask()
        total += mask.size
        smm += int(mask.sum())
    frac = smm / total
    print(f"wrote {len(recs)} recordings to {out}; realised SMM fraction {frac:.4f}")
    write_manifest(out, args, outputs, {"realised_smm_fraction": frac})


def _load_recordings(inputs):
    paths = []
    for p in inputs:
        p = Path(p)
        paths.extend(sorted(p.glob("*.csv")) if p.is_dir() else [p])
    if not paths:
        raise FileNotFoundError(f"no CSV recordings found in {inputs}")
    return [load_csv(p) for p in paths]


def cmd_preprocess(args):
    out = _out_dir(args)
    recs = _load_recordings(args.inputs)
    data = prepare_dataset(recs, args.window, args.step, args.cutoff, args.resample, args.provenance,
                           args.threshold)
    w = window_length(args.window, data.rate)
    overlap = window_overlap(w, args.step)
    save_dataset(data, out / "windows.npz")
    stats = data.per_subject_stats()
    with open(out / "stats.csv", "w") as fh:
        fh.write("subject,no_smm,smm,all,smm_ratio\n")
        for r in stats:
            fh.write(f"{r['subject']},{r['no_smm']},{r['smm']},{r['all']},{r['smm_ratio']!r}\n")
        n0, n1 = data.class_counts()
        fh.write(f"total,{n0},{n1},{n0 + n1},{n1 / (n0 + n1)!r}\n")
    print(f"rate={data.rate:g} Hz window={w} samples step={args.step} overlap={overlap:.3f}")
    for r in stats:
        print(f"  {r['subject']}: {r['all']} windows, SMM ratio {r['smm_ratio']:.3f}")
    write_manifest(out, args, {"windows": out / "windows.npz", "stats": out / "stats.csv"},
                   {"rate": data.rate, "overlap": overlap})


def cmd_train(args):
    out = _out_dir(args)
    data = load_dataset(args.data)
    cfg = _exp_config(args)
    outputs = {}
    tables = []
    if args.arch == "cnn":
        tables.append(run_feature_learning(data, cfg))
        model, _ = train_cnn(data, cfg, Rng(cfg.seed).child(999))
    else:
        tables.append(run_dynamic(data, cfg))
        model, _ = train_cnn_lstm(data, cfg, Rng(cfg.seed).child(999))
    if args.baselines:
        tables.extend(run_baselines(data, cfg))
    _check_finite(_table_values(tables))
    write_results_csv(tables, out / "results.csv")
    save_model(model, out / "model.params")
    outputs.update(results=out / "results.csv", model=out / "model.params")
    for t in tables:
        print(f"{t.config}: mean F1 {t.mean_f1:.3f}")
        for r in t.rows:
            print(f"  {r.subject}: {r.mean_f1:.3f} +/- {r.std_f1:.3f}")
    write_manifest(out, args, outputs, {"config_hash": cfg.hash()})


def _subject_predictions(model, sub):
    """(predictions, labels) of a CNN, CNN+LSTM or ensemble on one subject."""
    if isinstance(model, EnsembleSpec):
        seqs = build_sequences(sub, model.tau)
        return model.predict(seqs), seqs.labels
    if model.config["arch"] == "cnn":
        return predict_labels(model, sub.X), sub.y
    inputs, labels = model.make_inputs(build_sequences(sub, model.tau))
    return predict_labels(model, inputs), labels


def cmd_eval(args):
    out = _out_dir(args)
    data = load_dataset(args.data)
    model = load_ensemble(args.model) if args.model.endswith(".json") else load_model(args.model)
    rows = []
    for s in data.subjects:
        sub = data.subset(np.flatnonzero(data.subject == s))
        rows.append((s, compute_metrics(*_subject_predictions(model, sub))))
    _check_finite([[mt.precision, mt.recall, mt.f1] for _, mt in rows])
    with open(out / "metrics.csv", "w") as fh:
        fh.write("subject,tp,fp,fn,tn,precision,recall,f1\n")
        for s, mt in rows:
            fh.write(f"{s},{mt.tp},{mt.fp},{mt.fn},{mt.tn},{mt.precision!r},{mt.recall!r},{mt.f1!r}\n")
    for s, mt in rows:
        print(f"  {s}: F1 {mt.f1:.3f} precision {mt.precision:.3f} recall {mt.recall:.3f}")
    write_manifest(out, args, {"metrics": out / "metrics.csv"})


def cmd_transfer(args):
    out = _out_dir(args)
    data = load_dataset(args.data)
    cfg = _exp_config(args)
    source = load_params(args.source)
    tcfg = TransferConfig(source, Path(args.source).name, Path(args.data).name,
                          "all_layers" if args.scope == "all" else "conv_only")
    table = run_transfer(tcfg, data, cfg)
    _check_finite(_table_values([table]))
    write_results_csv(table, out / "results.csv")
    names = tcfg.names(build_cnn(*data.X.shape[1:]))
    model, _ = train_cnn(data, cfg, Rng(cfg.seed).child(999), init_params=source, init_names=names)
    save_model(model, out / "model.params")
    print(f"{table.config}: mean F1 {table.mean_f1:.3f}")
    write_manifest(out, args, {"results": out / "results.csv", "model": out / "model.params"},
                   {"config_hash": cfg.hash()})


def cmd_ensemble(args):
    out = _out_dir(args)
    data = load_dataset(args.data)
    cfg = _exp_config(args)
    ens, single = run_ensemble(data, cfg)
    _check_finite(_table_values([ens, single]))
    write_results_csv([ens, single], out / "results.csv")
    full = train_ensemble(data, cfg.l, cfg.tau, cfg.q, Rng(cfg.seed).child(999), cfg)
    spec_path = save_ensemble(full, out / "ensemble")
    subjects = [sp.test_subject for sp in loso_splits(data) for _ in range(cfg.repeats)]
    with open(out / "selection.csv", "w") as fh:
        fh.write("test_subject,repeat,b\n")
        for i, (s, b) in enumerate(zip(subjects, ens.extra["b"])):
            fh.write(f"{s},{i % cfg.repeats},{b}\n")
    print(f"{ens.config}: mean F1 {ens.mean_f1:.3f} (single learner {single.mean_f1:.3f}); "
          f"full-data ensemble keeps b={full.b} of {cfg.l}")
    write_manifest(out, args, {"results": out / "results.csv", "selection": out / "selection.csv",
                               "ensemble": spec_path}, {"config_hash": cfg.hash()})


def cmd_replay(args):
    manifest = read_manifest(args.manifest)
    ns = argparse.Namespace(**{k[4:]: v for k, v in manifest.items() if k.startswith("arg.")})
    if args.out:
        ns.out = args.out
    ns.func = COMMANDS[ns.command]
    ns.func(ns)


COMMANDS = {"synth": cmd_synth, "preprocess": cmd_preprocess, "train": cmd_train, "eval": cmd_eval,
            "transfer": cmd_transfer, "ensemble": cmd_ensemble}


# --- parser -------------------------------------------------------------------------------

def _training_flags(p, repeats=10):
    p.add_argument("--data", required=True, help="window archive from `preprocess`")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeats", type=int, default=repeats)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--pool-mode", dest="pool_mode", choices=("max", "average"), default="max")
    p.add_argument("--lstm-epochs", dest="lstm_epochs", type=int, default=10)
    p.add_argument("--lstm-lr", dest="lstm_lr", type=float, default=1e-3)
    p.add_argument("--tau", type=int, default=25)
    p.add_argument("--q", type=int, default=10)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--joint", dest="freeze_cnn", action="store_false",
                   help="fine-tune the CNN together with the LSTM")
    bal = p.add_mutually_exclusive_group()
    bal.add_argument("--balanced", dest="balanced", action="store_true", default=True)
    bal.add_argument("--unbalanced", dest="balanced", action="store_false")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="smmdetect", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--config", help="JSON file whose keys mirror the command's flags")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate synthetic IMU recordings as CSV")
    p.add_argument("--subjects", type=int, default=5)
    p.add_argument("--minutes", type=float, default=30.0)
    p.add_argument("--rate", type=float, default=100.0)
    p.add_argument("--smm", type=float, default=0.27)
    p.add_argument("--band", type=float, nargs=2, default=[2.0, 4.0], metavar=("LO", "HI"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("preprocess", help="filter, resample and segment recordings into windows")
    p.add_argument("inputs", nargs="+", help="CSV files or directories of CSV files")
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=float, default=1.0, help="window length in seconds")
    p.add_argument("--step", type=int, default=10, help="window step in samples")
    p.add_argument("--cutoff", type=float, default=0.1, help="high-pass cutoff in Hz")
    p.add_argument("--resample", type=float, default=None, help="target rate in Hz")
    p.add_argument("--threshold", type=float, default=0.5, help="SMM share needed to label a window")
    p.add_argument("--provenance", default="synthetic", choices=("simulated", "real1", "real2", "synthetic"))

    p = sub.add_parser("train", help="leave-one-subject-out training of a CNN or CNN+LSTM")
    _training_flags(p)
    p.add_argument("--arch", choices=("cnn", "cnn_lstm"), default="cnn")
    p.add_argument("--baselines", action="store_true", help="also run raw and handcrafted SVM baselines")

    p = sub.add_parser("eval", help="evaluate a saved model or ensemble.json on every subject")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("transfer", help="train with CNN weights pre-initialised from a source model")
    _training_flags(p)
    p.add_argument("--source", required=True, help="parameter file of the source CNN")
    p.add_argument("--scope", choices=("all", "conv"), default="all")

    p = sub.add_parser("ensemble", help="best-b majority-vote ensemble of CNN+LSTM learners")
    _training_flags(p)
    p.add_argument("--l", type=int, default=10, help="pool size")
    p.set_defaults(tau=25, q=40)

    p = sub.add_parser("replay", help="re-run a command from its manifest")
    p.add_argument("manifest")
    p.add_argument("--out", default=None, help="write to this directory instead")

    for name, fn in {**COMMANDS, "replay": cmd_replay}.items():
        sub.choices[name].set_defaults(func=fn)
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        cfg = json.loads(Path(args.config).read_text())
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub.set_defaults(**cfg)
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"smmdetect: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"smmdetect: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CsvSchemaError, ParamFileError, ShapeMismatchError, OSError, KeyError, ValueError) as exc:
        print(f"smmdetect: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
