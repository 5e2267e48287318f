"""Command line: data generation, training, variant sweeps and neuron analysis.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
The output root for run directories can be set with ``INHIBMOE_OUTPUT_ROOT``.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from collections import Counter
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import analysis, data
from .config import ConfigError, RunConfig, load_config, parse_ini, replace_model, replace_train, to_ini
from .inhibition import MODES, NoGateError
from .train import TrainConfig, load_checkpoint, load_run_data, train

logger = logging.getLogger("inhibmoe")

OUTPUT_ROOT_ENV = "INHIBMOE_OUTPUT_ROOT"
EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _output_root(cfg: RunConfig, override: Optional[str]) -> Path:
    return Path(override or os.environ.get(OUTPUT_ROOT_ENV) or cfg.output_dir)


def _load(path: Optional[str]) -> RunConfig:
    return load_config(path) if path else RunConfig()


def cmd_print_defaults(args) -> int:
    sys.stdout.write(to_ini(RunConfig()))
    return EXIT_OK


def cmd_export_mnist_sample(args) -> int:
    try:
        img, lbl = data.export_sample_mnist(args.out)
    except ImportError as err:
        raise UsageError("the bundled MNIST sample needs mlxtend (pip install 'artifact[sample]')") from err
    print(f"wrote {img} and {lbl}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    try:
        images_path, labels_path = data.find_mnist_files(args.mnist_dir)
    except FileNotFoundError as err:
        raise UsageError(f"missing MNIST file: {err}") from err
    mnist = data.load_mnist_idx(images_path, labels_path)
    squares = data.gen_squares(len(mnist), seed=args.seed)
    mixed, split = data.build_mixed_dataset(mnist, squares, seed=args.seed)
    data.write_mixn(args.out, mixed)
    types = mixed.type_tags()
    print(f"wrote {len(mixed)} samples to {args.out}")
    for t, name in data.TYPE_NAMES.items():
        counts = Counter(int(v) for v in mixed.labels[types == t])
        per_label = " ".join(f"{k}:{counts.get(k, 0)}" for k in range(10))
        print(f"  {name}: {int(np.sum(types == t))}  [{per_label}]")
    print("  split train/val/test: {}/{}/{}".format(*split.sizes()))
    return EXIT_OK


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "inhibition", None):
        cfg = replace_model(cfg, inhibition=args.inhibition)
    if getattr(args, "head", None):
        cfg = replace_model(cfg, head=args.head)
    if getattr(args, "seed", None) is not None:
        cfg = replace_train(cfg, seeds=(args.seed,))
    if getattr(args, "epochs", None):
        cfg = replace_train(cfg, epochs=args.epochs)
    if getattr(args, "dataset", None):
        cfg = replace_train(cfg, dataset=args.dataset)
    return cfg


def _run_dir(cfg: RunConfig, args, name: str) -> Path:
    run_dir = _output_root(cfg, getattr(args, "out_dir", None)) / name
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.ini").write_text(to_ini(cfg), encoding="utf-8")
    return run_dir


def cmd_train(args) -> int:
    cfg = _apply_overrides(_load(args.config), args)
    if not Path(cfg.train.dataset).is_file():
        raise UsageError(f"dataset not found: {cfg.train.dataset}")
    name = args.run_name or f"{cfg.run_name}-{cfg.train.model.head}-{cfg.train.model.inhibition}"
    run_dir = _run_dir(cfg, args, name)
    report = train(cfg.train, run_dir=run_dir)
    accs = ", ".join(f"{a:.4f}" for a in report.test_accuracies)
    print(f"run directory: {run_dir}")
    print(f"test accuracy per seed: {accs}")
    print(f"test accuracy: {report.mean_accuracy:.4f} +/- {report.std_accuracy:.4f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    base = _apply_overrides(_load(args.config), args)
    if not Path(base.train.dataset).is_file():
        raise UsageError(f"dataset not found: {base.train.dataset}")
    sweep_dir = _output_root(base, args.out_dir) / (args.run_name or f"{base.run_name}-sweep")
    sweep_dir.mkdir(parents=True, exist_ok=True)
    samples, split = load_run_data(base.train)
    rows: List[dict] = []
    for variant in args.variants:
        head, mode = ("baseline", "none") if variant == "baseline" else ("moe", variant)
        cfg = replace_model(base, head=head, inhibition=mode)
        run_dir = sweep_dir / variant
        run_dir.mkdir(exist_ok=True)
        (run_dir / "config.ini").write_text(to_ini(cfg), encoding="utf-8")
        report = train(cfg.train, samples=samples, split=split, run_dir=run_dir)
        for r in report.results:
            rows.append({"variant": variant, "seed": r.seed, "test_accuracy": r.test_accuracy,
                         "test_nll": r.test_nll})
        print(f"{variant:>10}: {report.mean_accuracy:.4f} +/- {report.std_accuracy:.4f}", flush=True)
    table = sweep_dir / "table1.csv"
    with open(table, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "seed", "test_accuracy", "test_nll"])
        for row in rows:
            w.writerow([row["variant"], row["seed"], repr(row["test_accuracy"]), repr(row["test_nll"])])
    print(f"wrote {table} ({len(rows)} rows)")
    return EXIT_OK


def _checkpoint_config(path: Path, explicit: Optional[str]) -> Optional[RunConfig]:
    if explicit:
        return load_config(explicit)
    snapshot = path.parent / "config.ini"
    return parse_ini(snapshot.read_text(encoding="utf-8")) if snapshot.is_file() else None


def cmd_analyze(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")
    if not Path(args.dataset).is_file():
        raise UsageError(f"dataset not found: {args.dataset}")
    cfg = _checkpoint_config(ckpt, args.config)
    model_cfg = cfg.train.model if cfg else None
    if model_cfg is not None and model_cfg.inhibition in ("none", "dropout"):
        raise UsageError(f"checkpoint was trained with inhibition={model_cfg.inhibition!r}, which has no "
                         f"learned gate; analysis needs one of glu, pretext, posttext, global")
    model = load_checkpoint(ckpt, model_cfg)
    if not model.has_gate:
        raise UsageError("checkpoint has no inhibition gate parameters (mode none or dropout); analysis needs "
                         "one of glu, pretext, posttext, global")
    train_cfg = replace_train(cfg, dataset=args.dataset).train if cfg else TrainConfig(dataset=args.dataset)
    samples, split = load_run_data(train_cfg)
    stats = analysis.neuron_report(model, samples, split.test, train_cfg.eval_batch)
    thresholds = analysis.default_thresholds()
    sweep = analysis.threshold_sweep(stats, thresholds)
    out_dir = Path(args.out_dir) if args.out_dir else ckpt.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    analysis.write_figure2(out_dir / "figure2.csv", stats)
    analysis.write_figure3(out_dir / "figure3.csv", thresholds, sweep)
    n_disc = sum(s.cls == "discriminative" for s in stats)
    below = sum(nc >= nd for nc, nd in sweep)
    print(f"wrote {out_dir / 'figure2.csv'} and {out_dir / 'figure3.csv'}")
    print(f"neurons: {len(stats) - n_disc} common, {n_disc} discriminative; "
          f"common >= discriminative at {below}/{len(sweep)} thresholds")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="inhibmoe", description=__doc__.splitlines()[0])
    parser.add_argument("--print-defaults", action="store_true", help="print the default config file and exit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("export-mnist-sample", help="write the 5,000-digit MNIST sample from mlxtend as IDX files")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_mnist_sample)

    p = sub.add_parser("gen-data", help="build the mixed-numbers MIXN file")
    p.add_argument("--mnist-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    for name, func, helptext in (("train", cmd_train, "train one configuration over its seeds"),
                                 ("sweep", cmd_sweep, "train every variant and collect test accuracy in table1.csv")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config")
        p.add_argument("--dataset")
        p.add_argument("--seed", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--out-dir")
        p.add_argument("--run-name")
        if name == "train":
            p.add_argument("--inhibition", choices=MODES)
            p.add_argument("--head", choices=("baseline", "moe"))
        else:
            p.add_argument("--variants", nargs="+", choices=MODES + ("baseline",), default=list(MODES))
        p.set_defaults(func=func)

    p = sub.add_parser("analyze", help="per-neuron correlation and threshold-sweep CSVs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--config")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if args.print_defaults:
        return cmd_print_defaults(args)
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, ConfigError, NoGateError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as err:  # noqa: BLE001
        logger.exception("command failed")
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
