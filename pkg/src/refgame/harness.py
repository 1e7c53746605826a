"""Run directories, sweeps, ablations and report bundles.

Layout of a run directory::

    config.toml          fully resolved configuration
    summary.json         per-seed summaries plus aggregates
    seed_<s>/metrics.csv per-epoch rows (epoch 0 is the untrained evaluation)
    seed_<s>/checkpoint.npz
    seed_<s>/summary.json

Every seed is independent: its data, initialization and sampling derive
only from the seed, so results do not depend on which other seeds ran or
on the worker count.  A seed whose ``summary.json`` exists is skipped on
re-run.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import metrics
from .config import LOSSES, SWEEP_MAX_LEN, SWEEP_VOCAB, ExperimentConfig, save_config
from .datasets import (EmbeddingDataset, FixedPairSet, generate_synthetic, load_embeddings,
                       noise_pairs, winoground_analog)
from .game import Trainer
from .layers import load_checkpoint, save_checkpoint
from .metrics import CSV_FIELDS, MetricsRecord

log = logging.getLogger(__name__)

FIXED_SETS = ("noise", "winoground")


# file helpers


def atomic_write(path: str | os.PathLike, data: str | bytes) -> None:
    """Write to a temporary sibling, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"newline": ""})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def records_to_csv(records: Iterable[MetricsRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    for rec in records:
        row = rec.as_row()
        writer.writerow([_fmt(row[k]) for k in CSV_FIELDS])
    return buf.getvalue()


def read_metrics_csv(path: str | os.PathLike) -> list[MetricsRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_FIELDS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return [MetricsRecord.from_row(row) for row in reader]


def write_table(path: str | os.PathLike, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    atomic_write(path, buf.getvalue())


def write_json(path: str | os.PathLike, data) -> None:
    atomic_write(path, json.dumps(data, indent=2, sort_keys=True) + "\n")


# single seed


def build_dataset(config: ExperimentConfig, seed: int) -> EmbeddingDataset:
    if config.embeddings_path:
        return load_embeddings(config.embeddings_path, config.labels_path, seed)
    return generate_synthetic(config.synthetic_spec(), np.random.default_rng(seed))


def fixed_pair_sets(config: ExperimentConfig, ds: EmbeddingDataset, seed: int) -> dict[str, FixedPairSet]:
    """Noise pairs always; composition-swap pairs only for synthetic data."""
    sets = {}
    if config.n_noise_pairs:
        sets["noise"] = noise_pairs(config.n_noise_pairs, ds.dim, np.random.default_rng([seed, 1]))
    if config.n_fixed_pairs and ds.spec is not None:
        sets["winoground"] = winoground_analog(ds.spec, config.n_fixed_pairs,
                                               np.random.default_rng([seed, 2]))
    return sets


def seed_dir(run_dir: str | os.PathLike, seed: int) -> Path:
    return Path(run_dir) / f"seed_{seed}"


def run_seed(config: ExperimentConfig, seed: int, run_dir: str | os.PathLike,
             progress: Callable[[MetricsRecord], None] | None = None) -> dict:
    """Train one seed and write its metrics, checkpoint and summary."""
    out = seed_dir(run_dir, seed)
    summary_path = out / "summary.json"
    if summary_path.exists():
        return json.loads(summary_path.read_text())
    ds = build_dataset(config, seed)
    trainer = Trainer(config, ds.dim, seed)
    records = [trainer.evaluate(ds, "train"), trainer.evaluate(ds, "validation")]
    for _ in range(config.epochs):
        records.append(trainer.train_epoch(ds))
        records.append(trainer.evaluate(ds, "validation"))
        if progress:
            progress(records[-1])
    fixed = {name: trainer.evaluate_pairs(pairs, config.fixed_pairs_both_directions)
             for name, pairs in fixed_pair_sets(config, ds, seed).items()}
    atomic_write(out / "metrics.csv", records_to_csv(records))
    if config.checkpoints:
        tmp = out / ".checkpoint.tmp.npz"
        save_checkpoint(tmp, trainer.agents.state_dict())
        os.replace(tmp, out / "checkpoint.npz")
    val = [r for r in records if r.split == "validation"]
    summary = {
        "seed": seed,
        "loss": config.loss,
        "vocab_size": config.vocab_size,
        "max_len": config.max_len,
        "epochs": config.epochs,
        "first_epoch": val[1].as_row() if len(val) > 1 else val[0].as_row(),
        "final": {"train": records[-2].as_row() if config.epochs else records[0].as_row(),
                  "validation": val[-1].as_row()},
        "fixed": {name: rec.as_row() for name, rec in fixed.items()},
        "l_rsa": val[-1].l_rsa,
    }
    write_json(summary_path, summary)
    return summary


def _seed_job(config_dict: dict, seed: int, run_dir: str) -> dict:
    return run_seed(ExperimentConfig.from_dict(config_dict), seed, run_dir)


def _guarded_job(config_dict: dict, seed: int, run_dir: str) -> dict:
    try:
        return {"ok": True, "summary": _seed_job(config_dict, seed, run_dir)}
    except Exception as exc:  # recorded by the sweep, which carries on
        return {"ok": False, "error": f"{type(exc).__name__}: {exc}"}


def _map_jobs(fn, jobs: list[tuple], workers: int) -> list:
    """Run ``fn(*job)`` for every job, in order, on a bounded process pool."""
    if workers <= 1 or len(jobs) <= 1:
        return [fn(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        futures = [pool.submit(fn, *job) for job in jobs]
        return [f.result() for f in futures]


def aggregate(summaries: Sequence[dict]) -> dict:
    """Mean and standard deviation of the headline final metrics over seeds."""
    if not summaries:
        return {}
    keys = {
        "train_accuracy": lambda s: s["final"]["train"]["accuracy"],
        "val_accuracy": lambda s: s["final"]["validation"]["accuracy"],
        "topsim": lambda s: s["final"]["validation"]["topsim"],
        "rsa_sl": lambda s: s["final"]["validation"]["rsa_sl"],
        "rsa_si": lambda s: s["final"]["validation"]["rsa_si"],
        "rsa_li": lambda s: s["final"]["validation"]["rsa_li"],
        "l_rsa": lambda s: s["l_rsa"],
    }
    for name in FIXED_SETS:
        if all(name in s["fixed"] for s in summaries):
            keys[f"{name}_accuracy"] = lambda s, n=name: s["fixed"][n]["accuracy"]
    out = {}
    for key, get in keys.items():
        values = np.array([get(s) for s in summaries], dtype=float)
        out[key] = {"mean": float(values.mean()), "std": float(values.std())}
    return out


def run_experiment(config: ExperimentConfig, run_dir: str | os.PathLike,
                   workers: int | None = None) -> Path:
    """Train every seed of ``config`` into ``run_dir``."""
    config.validate()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(config, run_dir / "config.toml")
    jobs = [(config.to_dict(), seed, str(run_dir)) for seed in config.seeds]
    summaries = _map_jobs(_seed_job, jobs, workers or config.workers)
    write_json(run_dir / "summary.json", {"seeds": list(config.seeds), "runs": summaries,
                                          "aggregate": aggregate(summaries)})
    return run_dir


def load_trainer(run_dir: str | os.PathLike, seed: int, config: ExperimentConfig) -> Trainer:
    """Rebuild a trainer and restore the agents from a seed's checkpoint."""
    path = seed_dir(run_dir, seed) / "checkpoint.npz"
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    ds = build_dataset(config, seed)
    trainer = Trainer(config, ds.dim, seed)
    trainer.agents.load_state_dict(load_checkpoint(path))
    trainer.epoch = config.epochs
    return trainer


def evaluate_checkpoint(run_dir: str | os.PathLike, seed: int, config: ExperimentConfig) -> dict:
    trainer = load_trainer(run_dir, seed, config)
    ds = build_dataset(config, seed)
    out = {"validation": trainer.evaluate(ds, "validation").as_row()}
    for name, pairs in fixed_pair_sets(config, ds, seed).items():
        out[name] = trainer.evaluate_pairs(pairs, config.fixed_pairs_both_directions).as_row()
    return out


# sweep


@dataclass(frozen=True)
class SweepGrid:
    vocab_sizes: tuple[int, ...] = SWEEP_VOCAB
    max_lens: tuple[int, ...] = SWEEP_MAX_LEN

    def cells(self) -> list[tuple[int, int]]:
        return list(itertools.product(self.vocab_sizes, self.max_lens))

    def __len__(self) -> int:
        return len(self.vocab_sizes) * len(self.max_lens)


def cell_dir(sweep_dir: str | os.PathLike, loss: str, vocab: int, max_len: int) -> Path:
    return Path(sweep_dir) / loss / f"V{vocab}_L{max_len}"


def _validation_curve(run_dir: Path, seed: int) -> list[MetricsRecord]:
    return [r for r in read_metrics_csv(seed_dir(run_dir, seed) / "metrics.csv")
            if r.split == "validation"]


def run_sweep(base: ExperimentConfig, sweep_dir: str | os.PathLike, grid: SweepGrid = SweepGrid(),
              losses: Sequence[str] = LOSSES, workers: int | None = None) -> dict:
    """Train every (loss, V, L, seed) combination and write heatmap tables.

    Failed runs are listed in the summary and leave gaps (empty cells) in
    the tables; the remaining runs still complete.
    """
    base.validate()
    sweep_dir = Path(sweep_dir)
    sweep_dir.mkdir(parents=True, exist_ok=True)
    save_config(base, sweep_dir / "base_config.toml")
    jobs, keys = [], []
    for loss in losses:
        for vocab, max_len in grid.cells():
            cfg = base.replace(loss=loss, vocab_size=vocab, max_len=max_len)
            try:
                cfg.validate()
            except ValueError as exc:
                log.warning("skipping invalid cell %s V=%d L=%d: %s", loss, vocab, max_len, exc)
                continue
            run_dir = cell_dir(sweep_dir, loss, vocab, max_len)
            run_dir.mkdir(parents=True, exist_ok=True)
            save_config(cfg, run_dir / "config.toml")
            for seed in cfg.seeds:
                jobs.append((cfg.to_dict(), seed, str(run_dir)))
                keys.append((loss, vocab, max_len, seed))
    results = _map_jobs(_guarded_job, jobs, workers or base.workers)

    index, failures = [], []
    by_cell: dict[tuple[str, int, int], list[dict]] = {}
    for (loss, vocab, max_len, seed), res in zip(keys, results):
        entry = {"loss": loss, "vocab_size": vocab, "max_len": max_len, "seed": seed,
                 "path": str(seed_dir(cell_dir(sweep_dir, loss, vocab, max_len), seed)
                             .relative_to(sweep_dir))}
        if res["ok"]:
            by_cell.setdefault((loss, vocab, max_len), []).append(res["summary"])
            index.append(entry)
        else:
            failures.append({**entry, "error": res["error"]})
    write_json(sweep_dir / "index.json", {"runs": index, "failures": failures})

    best = {}
    for loss in losses:
        acc_rows, ts_rows, trend_rows = [], [], []
        for vocab, max_len in grid.cells():
            runs = by_cell.get((loss, vocab, max_len), [])
            agg = aggregate(runs)
            acc = agg.get("val_accuracy", {}).get("mean", "")
            ts = agg.get("topsim", {}).get("mean", "")
            acc_rows.append((vocab, max_len, len(runs), acc))
            ts_rows.append((vocab, max_len, len(runs), ts))
            if runs and (loss not in best or acc > best[loss]["val_accuracy"]):
                best[loss] = {"vocab_size": vocab, "max_len": max_len, "val_accuracy": acc}
            if runs:
                run_dir = cell_dir(sweep_dir, loss, vocab, max_len)
                curves = [_validation_curve(run_dir, s["seed"]) for s in runs]
                for e in range(min(len(c) for c in curves)):
                    trend_rows.append((vocab, max_len, curves[0][e].epoch,
                                       *(float(np.mean([getattr(c[e], k) for c in curves]))
                                         for k in ("rsa_sl", "rsa_si", "rsa_li"))))
        write_table(sweep_dir / f"heatmap_accuracy_{loss}.csv",
                    ("vocab_size", "max_len", "n_seeds", "val_accuracy"), acc_rows)
        write_table(sweep_dir / f"heatmap_topsim_{loss}.csv",
                    ("vocab_size", "max_len", "n_seeds", "topsim"), ts_rows)
        write_table(sweep_dir / f"rsa_trend_{loss}.csv",
                    ("vocab_size", "max_len", "epoch", "rsa_sl", "rsa_si", "rsa_li"), trend_rows)
    summary = {"cells_per_loss": len(grid), "losses": list(losses), "seeds": list(base.seeds),
               "completed_runs": len(index), "failed_runs": len(failures), "best": best,
               "failures": failures}
    write_json(sweep_dir / "summary.json", summary)
    return summary


# ablation


def relative_divergence(a: Sequence[float], b: Sequence[float]) -> float:
    """mean |a - b| / mean |a| over paired curve points."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape or a.size == 0:
        raise ValueError("curves must be non-empty and of equal length")
    scale = np.abs(a).mean()
    return float(np.abs(a - b).mean() / scale) if scale > 0 else 0.0


def run_ablation(config: ExperimentConfig, out_dir: str | os.PathLike,
                 workers: int | None = None) -> dict:
    """Matched-seed ce vs ce_rsa runs and their training-ce divergence."""
    config.validate()
    out_dir = Path(out_dir)
    run_dirs = {}
    jobs = []
    for loss in LOSSES:
        cfg = config.replace(loss=loss)
        run_dirs[loss] = out_dir / loss
        run_dirs[loss].mkdir(parents=True, exist_ok=True)
        save_config(cfg, run_dirs[loss] / "config.toml")
        jobs.extend((cfg.to_dict(), seed, str(run_dirs[loss])) for seed in config.seeds)
    _map_jobs(_seed_job, jobs, workers or config.workers)

    rows, per_seed = [], {}
    for seed in config.seeds:
        curves = {loss: read_metrics_csv(seed_dir(run_dirs[loss], seed) / "metrics.csv")
                  for loss in LOSSES}
        for loss in LOSSES:
            for rec in curves[loss]:
                rows.append((seed, loss, rec.epoch, rec.split, rec.ce, rec.accuracy))
        train_ce = {loss: [r.ce for r in curves[loss] if r.split == "train" and r.epoch > 0]
                    for loss in LOSSES}
        first = {loss: [r for r in curves[loss] if r.epoch == 0] for loss in LOSSES}
        per_seed[str(seed)] = {
            "ce_divergence": relative_divergence(train_ce["ce"], train_ce["ce_rsa"]),
            "epoch0_identical": first["ce"] == first["ce_rsa"],
        }
    write_table(out_dir / "curves.csv", ("seed", "loss", "epoch", "split", "ce", "accuracy"), rows)
    summary = {"seeds": list(config.seeds), "per_seed": per_seed,
               "max_ce_divergence": max(v["ce_divergence"] for v in per_seed.values())}
    write_json(out_dir / "summary.json", summary)
    return summary


# report


def find_seed_runs(roots: Sequence[str | os.PathLike]) -> list[Path]:
    """Seed directories under ``roots`` that hold a completed run, sorted."""
    found = set()
    for root in roots:
        root = Path(root)
        if (root / "metrics.csv").exists() and (root / "summary.json").exists():
            found.add(root.resolve())
        for path in root.rglob("metrics.csv"):
            if (path.parent / "summary.json").exists():
                found.add(path.parent.resolve())
    return sorted(found)


def _run_label(path: Path, roots: Sequence[Path]) -> str:
    for root in roots:
        try:
            rel = path.relative_to(root)
        except ValueError:
            continue
        return f"{root.name}/{rel}" if str(rel) != "." else root.name
    return str(path)


def report(inputs: Sequence[str | os.PathLike], out_dir: str | os.PathLike, svg: bool = False) -> dict:
    """Correlation tables, learning curves and per-dataset bars from finished runs."""
    roots = [Path(p).resolve() for p in inputs]
    for root in roots:
        if not root.exists():
            raise FileNotFoundError(f"no such run or sweep directory: {root}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed_runs = find_seed_runs(roots)
    summaries = [json.loads((p / "summary.json").read_text()) for p in seed_runs]
    labels = [_run_label(p, roots) for p in seed_runs]
    notes = [f"runs found: {len(seed_runs)}"]

    finals = [{"run": lab, "loss": s["loss"], "seed": s["seed"], "vocab_size": s["vocab_size"],
               "max_len": s["max_len"], "topsim": s["final"]["validation"]["topsim"],
               "rsa_sl": s["final"]["validation"]["rsa_sl"],
               "val_accuracy": s["final"]["validation"]["accuracy"]}
              for lab, s in zip(labels, summaries)]
    write_table(out_dir / "final_metrics.csv",
                ("run", "loss", "seed", "vocab_size", "max_len", "topsim", "rsa_sl", "val_accuracy"),
                [tuple(f.values()) for f in finals])

    correlations = {}
    for loss in sorted({f["loss"] for f in finals}):
        runs = [f for f in finals if f["loss"] == loss]
        if len(runs) < 3:
            notes.append(f"{loss}: {len(runs)} runs, correlations need at least 3; omitted")
            continue
        table = metrics.correlation_report(runs)
        atomic_write(out_dir / f"correlations_{loss}.csv", metrics.format_correlations(table))
        correlations[loss] = [{"x": c.x, "y": c.y, "n": c.n, "r": c.r, "p": c.p} for c in table]

    # learning curves: mean over runs per (loss, split, epoch)
    curve_keys = ("accuracy", "rsa_sl", "rsa_si", "rsa_li", "topsim", "ce", "l_rsa")
    groups: dict[tuple[str, str, int], list[MetricsRecord]] = {}
    for path, s in zip(seed_runs, summaries):
        for rec in read_metrics_csv(path / "metrics.csv"):
            groups.setdefault((s["loss"], rec.split, rec.epoch), []).append(rec)
    curve_rows = [(loss, split, epoch, len(recs),
                   *(float(np.mean([getattr(r, k) for r in recs])) for k in curve_keys))
                  for (loss, split, epoch), recs in sorted(groups.items())]
    write_table(out_dir / "learning_curves.csv",
                ("loss", "split", "epoch", "n_runs", *curve_keys), curve_rows)

    # bar summary: final accuracy per loss and evaluation set
    bars = []
    for loss in sorted({s["loss"] for s in summaries}):
        mine = [s for s in summaries if s["loss"] == loss]
        sets = {"validation": [s["final"]["validation"]["accuracy"] for s in mine]}
        for name in FIXED_SETS:
            values = [s["fixed"][name]["accuracy"] for s in mine if name in s["fixed"]]
            if values:
                sets[name] = values
        for name, values in sets.items():
            bars.append((loss, name, len(values), float(np.mean(values)), float(np.std(values))))
    write_table(out_dir / "bar_summary.csv", ("loss", "dataset", "n_runs", "mean_accuracy", "std"), bars)

    if svg:
        from .plots import render_all
        render_all(out_dir, curve_rows, curve_keys, bars, finals)
    atomic_write(out_dir / "report.txt", "\n".join(notes) + "\n")
    bundle = {"runs": len(seed_runs), "correlations": correlations, "notes": notes}
    write_json(out_dir / "report.json", bundle)
    return bundle

