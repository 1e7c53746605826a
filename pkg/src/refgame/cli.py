"""Command-line front end: ``refgame <command> [options]``.

Exit status is 0 on success, 1 for configuration or usage errors and 2 when
a run fails at runtime.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import harness
from .config import LOSSES, ConfigError, ExperimentConfig, load_config, paper_params
from .datasets import DatasetError, read_labels, save_embeddings, save_labels, select_subset

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
OUT_ENV = "REFGAME_OUT"

log = logging.getLogger("refgame")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _common(p: argparse.ArgumentParser, grid: bool = False) -> None:
    p.add_argument("--config", help="TOML file with ExperimentConfig fields")
    p.add_argument("--paper-params", action="store_true",
                   help="start from the full-scale preset (V=40, L=2, hidden 768, 15 seeds)")
    p.add_argument("--seed", type=int, help="run a single seed")
    p.add_argument("--seeds", type=_int_list, help="comma-separated seeds")
    p.add_argument("--loss", choices=LOSSES)
    if grid:
        p.add_argument("--vocab", type=_int_list, help="vocabulary sizes to sweep")
        p.add_argument("--max-len", type=_int_list, help="message lengths to sweep")
    else:
        p.add_argument("--vocab", type=int, help="vocabulary size including EOS")
        p.add_argument("--max-len", type=int, help="maximum message length")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", help=f"output root (default: ${OUT_ENV} or the config's 'out')")
    p.add_argument("--workers", type=int, help="parallel seed runs")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="refgame", description="Referential game experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train agents for each seed")
    _common(p)

    p = sub.add_parser("evaluate", help="re-evaluate a trained run from its checkpoints")
    p.add_argument("run_dir")
    p.add_argument("--seed", type=int, help="only this seed (default: all in the run)")

    p = sub.add_parser("sweep", help="grid over vocabulary size and message length")
    _common(p, grid=True)

    p = sub.add_parser("ablate", help="matched ce vs ce_rsa runs")
    _common(p)

    p = sub.add_parser("report", help="tables and plots from finished runs")
    p.add_argument("inputs", nargs="+", help="run, sweep or ablation directories")
    p.add_argument("--out", help="report directory (default: <output root>/report)")
    p.add_argument("--svg", action="store_true", help="also render SVG figures")

    p = sub.add_parser("import-embeddings", help="convert an embedding matrix to EMB1 + labels")
    p.add_argument("embeddings", help=".npy matrix or CSV of floats, one row per item")
    p.add_argument("labels", help="CSV with 'index,category' (optionally 'group') columns")
    p.add_argument("--out", required=True, help="destination .emb file; labels go next to it")
    p.add_argument("--subset", action="store_true",
                   help="keep categories with >100 items, then 100 items per group")
    p.add_argument("--seed", type=int, default=0)
    return parser


def output_root(args, config: ExperimentConfig) -> Path:
    return Path(args.out or os.environ.get(OUT_ENV) or config.out)


def resolve_config(args, grid: bool = False) -> ExperimentConfig:
    """Defaults, then preset, then file, then flags; flags win."""
    config = load_config(args.config) if args.config else ExperimentConfig()
    if args.paper_params:
        config = paper_params(config)
    changes = {}
    if args.loss:
        changes["loss"] = args.loss
    if not grid:
        if args.vocab is not None:
            changes["vocab_size"] = args.vocab
        if args.max_len is not None:
            changes["max_len"] = args.max_len
    if args.seeds:
        changes["seeds"] = args.seeds
    if args.seed is not None:
        changes["seeds"] = [args.seed]
    if args.epochs is not None:
        changes["epochs"] = args.epochs
    if args.workers is not None:
        changes["workers"] = args.workers
    config = config.replace(**changes)
    config = config.replace(out=str(output_root(args, config)))
    return config.validate()


def run_name(config: ExperimentConfig) -> str:
    return f"{config.loss}-V{config.vocab_size}-L{config.max_len}"


def cmd_train(args) -> int:
    config = resolve_config(args)
    run_dir = harness.run_experiment(config, Path(config.out) / run_name(config))
    agg = json.loads((run_dir / "summary.json").read_text())["aggregate"]
    print(run_dir)
    for key, stats in agg.items():
        print(f"  {key}: {stats['mean']:.4f} +/- {stats['std']:.4f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    run_dir = Path(args.run_dir)
    cfg_path = run_dir / "config.toml"
    if not cfg_path.exists():
        raise ConfigError(f"{run_dir} has no config.toml")
    config = load_config(cfg_path).validate()
    seeds = [args.seed] if args.seed is not None else config.seeds
    results = {str(s): harness.evaluate_checkpoint(run_dir, s, config) for s in seeds}
    print(json.dumps(results, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = resolve_config(args, grid=True)
    grid = harness.SweepGrid(tuple(args.vocab) if args.vocab else harness.SWEEP_VOCAB,
                             tuple(args.max_len) if args.max_len else harness.SWEEP_MAX_LEN)
    losses = (args.loss,) if args.loss else LOSSES
    sweep_dir = Path(config.out) / "sweep"
    summary = harness.run_sweep(config, sweep_dir, grid, losses)
    print(sweep_dir)
    print(f"  cells per loss: {summary['cells_per_loss']}, runs: {summary['completed_runs']}, "
          f"failed: {summary['failed_runs']}")
    for loss, best in summary["best"].items():
        print(f"  best {loss}: V={best['vocab_size']} L={best['max_len']} "
              f"val_accuracy={best['val_accuracy']:.4f}")
    return EXIT_RUNTIME if summary["failed_runs"] else EXIT_OK


def cmd_ablate(args) -> int:
    config = resolve_config(args)
    out = Path(config.out) / f"ablation-V{config.vocab_size}-L{config.max_len}"
    summary = harness.run_ablation(config, out)
    print(out)
    print(f"  max relative ce divergence: {summary['max_ce_divergence']:.4f}")
    return EXIT_OK


def cmd_report(args) -> int:
    out = Path(args.out) if args.out else Path(os.environ.get(OUT_ENV) or "runs") / "report"
    bundle = harness.report(args.inputs, out, svg=args.svg)
    print(out)
    for note in bundle["notes"]:
        print(f"  {note}")
    return EXIT_OK


def _read_matrix(path: Path) -> np.ndarray:
    if path.suffix == ".npy":
        return np.load(path)
    return np.loadtxt(path, delimiter=",", ndmin=2)


def cmd_import(args) -> int:
    X = _read_matrix(Path(args.embeddings))
    labels = read_labels(args.labels)
    if len(labels) != len(X):
        raise DatasetError(f"{len(labels)} labels for {len(X)} embeddings")
    if args.subset:
        with open(args.labels, newline="") as fh:
            rows = list(csv.DictReader(fh))
        groups = [row.get("group") or row["category"] for row in rows]
        keep = select_subset(labels, groups, seed=args.seed)
        X, labels = X[keep], [labels[i] for i in keep]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_embeddings(out, X)
    labels_path = out.with_suffix(".labels.csv")
    save_labels(labels_path, labels)
    print(f"{out} ({X.shape[0]} x {X.shape[1]})")
    print(labels_path)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "evaluate": cmd_evaluate, "sweep": cmd_sweep,
            "ablate": cmd_ablate, "report": cmd_report, "import-embeddings": cmd_import}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        log.debug("run failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
