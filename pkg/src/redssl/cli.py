"""Command-line entry points for the experiment lifecycle.

Subcommands: ``simulate`` (write a mixture CSV), ``train``, ``probe``,
``eval`` (kNN/linear on dumped embeddings), ``export-embeddings``, and
``grad-check``. Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import data as data_mod
from . import jsonio
from . import probes
from . import runner
from .model import load_checkpoint


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="redssl",
                     description="Self-supervised learning lab for vector data")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("simulate", help="generate a mixture dataset CSV")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--config", help="config JSON (defaults used when omitted)")
    p.add_argument("--set", action="append", default=[], dest="overrides",
                   metavar="KEY=VALUE", help="override a config field")

    for name in ("train", "probe", "export-embeddings"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=(name == "train"),
                       help="config JSON path")
        p.add_argument("--set", action="append", default=[], dest="overrides",
                       metavar="KEY=VALUE", help="override a config field")
        if name != "train":
            p.add_argument("--checkpoint", required=True)
        if name == "probe":
            p.add_argument("--out", required=True, help="report directory")
        if name == "export-embeddings":
            p.add_argument("--out-prefix", required=True)

    p = sub.add_parser("eval", help="evaluate dumped embedding CSVs")
    p.add_argument("--train-csv", required=True)
    p.add_argument("--test-csv", required=True)
    p.add_argument("--method", choices=["knn", "linear"], default="knn")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.1)

    p = sub.add_parser("grad-check", help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--batch", type=int, default=8)
    return parser


def _load_config(path: str | None, overrides: list[str]) -> runner.TrainConfig:
    if path is None:
        doc = runner.TrainConfig().to_dict()
    else:
        if not os.path.exists(path):
            raise UsageError(f"config file not found: {path}")
        with open(path, "r", encoding="utf-8") as fh:
            doc = jsonio.loads(fh.read())
    runner.apply_overrides(doc, overrides)
    return runner.TrainConfig.from_dict(doc)


def _cmd_simulate(args) -> int:
    config = _load_config(args.config, args.overrides)
    dataset = config.data.load(config.seed)
    data_mod.save_csv(dataset, args.out)
    print(f"wrote {len(dataset)} samples, {dataset.num_classes} classes to {args.out}")
    return 0


def _cmd_train(args) -> int:
    config = _load_config(args.config, args.overrides)
    result = runner.run_training(config, quiet=False)
    print(f"final knn accuracy {result.final_knn_accuracy:.4f}")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics: {result.metrics_path}")
    return 0


def _cmd_probe(args) -> int:
    config = _load_config(args.config, args.overrides)
    report = runner.run_probe(args.checkpoint, config, args.out)
    print(f"knn accuracy: representation {report.knn_accuracy_representation:.4f}, "
          f"projection {report.knn_accuracy_projection:.4f}")
    print(f"entropy: representation {report.entropy_representation.entropy:.4f}, "
          f"projection {report.entropy_projection.entropy:.4f}")
    print(f"report written to {args.out}")
    return 0


def _cmd_export(args) -> int:
    config = _load_config(args.config, args.overrides)
    model = load_checkpoint(args.checkpoint)
    dataset = config.data.load(config.seed)
    train_set, test_set = data_mod.train_test_split(
        dataset, config.data.test_fraction, config.seed)
    for split_name, split in (("train", train_set), ("test", test_set)):
        repr_e, proj_e = model.embed(split.points)
        for layer, matrix in (("repr", repr_e), ("proj", proj_e)):
            path = f"{args.out_prefix}.{layer}.{split_name}.csv"
            data_mod.save_csv(data_mod.Dataset(matrix, split.labels), path)
            print(f"wrote {path}")
    return 0


def _cmd_eval(args) -> int:
    train = data_mod.load_csv(args.train_csv)
    test = data_mod.load_csv(args.test_csv)
    if args.method == "knn":
        acc = probes.knn_classify(train.points, train.labels,
                                  test.points, test.labels, args.k)
    else:
        acc = probes.linear_probe(train.points, train.labels,
                                  test.points, test.labels,
                                  args.epochs, args.lr)
    print(f"{args.method} accuracy: {acc:.17g}")
    return 0


def _cmd_grad_check(args) -> int:
    summary = runner.run_gradient_check_suite(seeds=args.seeds, batch=args.batch)
    for name, err in sorted(summary.per_case.items()):
        print(f"  {name:24s} max rel error {err:.3e}")
    print(f"max relative error {summary.max_rel_error:.3e} "
          f"({summary.skipped} kink/tie coordinates skipped, "
          f"{summary.elapsed_seconds:.1f}s)")
    if not summary.passed:
        print("FAILED: max relative error above 1e-4", file=sys.stderr)
        return 2
    return 0


_COMMANDS = {
    "simulate": _cmd_simulate,
    "train": _cmd_train,
    "probe": _cmd_probe,
    "export-embeddings": _cmd_export,
    "eval": _cmd_eval,
    "grad-check": _cmd_grad_check,
}


def cli_dispatch(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 1
        return _COMMANDS[args.command](args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ValueError, OSError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
