"""Command-line entry point: ``regionckge <command> [options]``.

Commands: continual, train, eval, gen-snapshots, baseline.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import checkpoint as ckpt
from .continual import SnapshotOrderError
from .dataset import DatasetError, GenerationError, generate_snapshots, load_dataset, read_base_triples
from .runner import BASELINES, EVAL_MODES, OutputLayout, RunConfig, run_continual, run_eval, run_train
from .training import ABLATIONS, UPDATE_SCOPES, NumericalError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

logger = logging.getLogger("regionckge")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# config key -> (type, help); flags are the kebab-case keys
_TRAIN_FLAGS = {
    "dim": (int, "embedding dimension"),
    "lr": (float, "Adam learning rate"),
    "batch_size": (int, "positives per batch"),
    "k_neg": (int, "negatives per positive"),
    "gamma": (float, "score margin"),
    "alpha": (float, "head weight of the balance loss"),
    "beta": (float, "tail weight of the balance loss"),
    "epochs": (int, "epochs per snapshot"),
    "patience": (int, "early-stopping patience in evaluations (<=0 disables)"),
    "eval_every": (int, "epochs between validation evaluations"),
    "seed": (int, "master seed"),
    "update_scope": (str, f"trainable parts of old entities: {', '.join(UPDATE_SCOPES)}"),
    "reservoir_size": (int, "old facts kept per past snapshot"),
    "degree_cap": (int, "cap on association-set size for backward updates (0 = none)"),
    "aggregate": (str, "neighbour offset aggregation: sum or mean"),
    "offset_init": (float, "half-range of the uniform offset initialisation"),
    "relation_base_init": (float, "half-range of the uniform relation base initialisation"),
    "dtype": (str, "parameter storage type: float32 or float64"),
}
_RUN_FLAGS = {
    "data": (str, "dataset root with numbered snapshot directories"),
    "snapshots": (int, "number of snapshots to use (0 = all)"),
    "out": (str, "output directory"),
    "eval_mode": (str, f"ranking filter: {', '.join(EVAL_MODES)}"),
    "baseline": (str, f"engine: {', '.join(BASELINES)}"),
    "threads": (int, "numeric library threads when not deterministic"),
}


def _add_run_options(p: argparse.ArgumentParser, train: bool = True) -> None:
    p.add_argument("--config", help="key=value file; command-line flags override it")
    for name, (typ, help_) in _RUN_FLAGS.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None, help=help_)
    p.add_argument("--deterministic", dest="deterministic", action="store_true", default=None,
                   help="single-threaded, timing-free reports (default)")
    p.add_argument("--no-deterministic", dest="deterministic", action="store_false")
    if train:
        for name, (typ, help_) in _TRAIN_FLAGS.items():
            p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None,
                           help=help_)
        p.add_argument("--ablate", dest="ablations", action="append", choices=ABLATIONS,
                       default=None, help="disable a component (repeatable)")
        p.add_argument("--paired-regions", dest="paired_regions", action="store_true",
                       default=None, help="separate head and tail region per relation")
        p.add_argument("--shared-entity-pairing", dest="shared_entity_pairing",
                       action="store_true", default=None,
                       help="pair new facts with old facts that share an entity")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="regionckge", description="Continual region-based KG embedding.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("continual", help="train and evaluate over a snapshot sequence")
    _add_run_options(p)

    p = sub.add_parser("baseline", help="translation baseline with naive fine-tuning")
    _add_run_options(p)

    p = sub.add_parser("train", help="continue training a checkpoint")
    _add_run_options(p, train=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--epochs", type=int, default=None, help="epochs to run in this call")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_run_options(p, train=False)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("gen-snapshots", help="cut a static KG into a snapshot sequence")
    p.add_argument("--base", required=True, help="triple file or dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--snapshots", type=int, default=5)
    p.add_argument("--growth-profile", default="equal", choices=("equal", "higher", "lower"))
    p.add_argument("--multihop-ratio", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    items: dict[str, str] = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise DatasetError(f"missing config file: {path}")
        items.update({k.replace("-", "_"): v for k, v in ckpt.read_kv(path).items()})
    for name in list(_RUN_FLAGS) + list(_TRAIN_FLAGS) + ["deterministic", "paired_regions",
                                                           "shared_entity_pairing", "checkpoint"]:
        value = getattr(args, name, None)
        if value is not None:
            items[name] = ckpt.format_value(value)
    ablations = getattr(args, "ablations", None)
    if ablations is not None:
        items["ablations"] = ",".join(sorted(set(ablations)))
    try:
        return RunConfig.from_items(items)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _limits(config: RunConfig):
    if config.deterministic:
        return threadpool_limits(1)
    if config.threads > 0:
        return threadpool_limits(config.threads)
    return contextlib.nullcontext()


def _load(config: RunConfig):
    if not config.data:
        raise UsageError("--data is required")
    return load_dataset(config.data, config.snapshots or None)


def cmd_continual(args) -> int:
    config = resolve_config(args)
    if args.command == "baseline" and config.baseline == "none":
        config = config.replace(baseline="transe-finetune")
    snapshots, vocab = _load(config)
    with _limits(config):
        result = run_continual(config, snapshots, vocab, out=config.out)
    if result.combined is not None:
        print(f"MRR={result.combined['MRR']:.4f} FWT={result.fwt} BWT={result.bwt}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = resolve_config(args)
    snapshots, vocab = _load(config)
    OutputLayout(config.out).create().write_config(config)
    with _limits(config):
        model, log = run_train(args.checkpoint, snapshots, vocab, config.out, epochs=args.epochs,
                               eval_mode=config.eval_mode)
    print(f"snapshot={model.snapshot} epoch={model.epoch} epochs_run={len(log)}")
    return EXIT_OK


def cmd_eval(args) -> int:
    config = resolve_config(args)
    snapshots, _ = _load(config)
    OutputLayout(config.out).create().write_config(config)
    with _limits(config):
        metrics = run_eval(args.checkpoint, snapshots, config.out, config.eval_mode,
                           config.deterministic)
    for key, m in metrics.items():
        if m is not None:
            print(f"{key}: MRR={m['MRR']:.6f}")
    return EXIT_OK


def cmd_gen_snapshots(args) -> int:
    report = generate_snapshots(read_base_triples(args.base), args.snapshots, args.out,
                                growth_profile=args.growth_profile,
                                multihop_ratio=args.multihop_ratio, seed=args.seed)
    print(json.dumps({"dropped_entities": report["dropped_entities"],
                      "dropped_triples": report["dropped_triples"],
                      "snapshots": len(report["snapshots"])}))
    return EXIT_OK


COMMANDS = {
    "continual": cmd_continual,
    "baseline": cmd_continual,
    "train": cmd_train,
    "eval": cmd_eval,
    "gen-snapshots": cmd_gen_snapshots,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DatasetError, GenerationError, ckpt.CheckpointError, SnapshotOrderError,
            FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
