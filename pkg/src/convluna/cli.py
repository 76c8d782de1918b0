"""Command-line entry point: ``convluna run | compare | diagnose``.

Exit codes: 0 success, 2 usage error, 3 configuration error, 4 input error,
5 numeric failure (non-finite loss).

Run directory layout::

    <root>/<run_name>/[m<memory_size>/]seed<seed>/
        config.yaml        resolved single-run configuration
        metrics.jsonl      metric log, one JSON record per line
        snapshots/         memory value/gradient snapshots (checkpoint format)
        checkpoints/       init.ckpt, best.ckpt, final.ckpt, state.ckpt
        report/            summary.json, plus diagnose output tables
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .blocks import Model
from .config import ExperimentConfig, dump_experiment, load_experiment, parse_experiment
from .diagnostics import (
    compare_treatments,
    degradation_series,
    load_snapshot,
    write_table,
)
from .errors import ConvLunaError, UsageError
from .tasks import build_task
from .training import RunArtifacts, read_metrics, train

log = logging.getLogger("convluna")

OUTPUT_ENV = "CONVLUNA_OUTPUT_ROOT"


def expand_suite(cfg: ExperimentConfig) -> list[tuple[str, ExperimentConfig]]:
    """One ``(relative_dir, single-run config)`` pair per memory size and seed."""
    sizes = cfg.memory_sizes if cfg.memory_sizes else [None]
    out = []
    for size in sizes:
        for seed in cfg.seeds:
            model = cfg.model if size is None else dataclasses.replace(cfg.model, memory_size=size)
            single = dataclasses.replace(
                cfg,
                model=model,
                train=dataclasses.replace(cfg.train, seed=seed),
                seeds=[seed],
                memory_sizes=None,
            )
            rel = Path(cfg.run_name) / (f"m{size}" if size is not None else "") / f"seed{seed}"
            out.append((str(rel), single))
    return out


def run_single(cfg: ExperimentConfig, run_dir: Path, resume: bool = False) -> RunArtifacts:
    summary = run_dir / "report" / "summary.json"
    if not resume and run_dir.exists() and any(run_dir.iterdir()):
        state = "completed" if summary.exists() else "partial"
        raise UsageError(f"{run_dir} already holds a {state} run; use --resume or another --output")
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(dump_experiment(cfg))
    with T.precision(cfg.train.precision):
        task = build_task(cfg.task)
        model = Model(cfg.model, seed=cfg.train.seed)
        return train(model, task, cfg.train, run_dir, resume=resume)


def cmd_run(args) -> int:
    cfg = load_experiment(args.config, args.set)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seeds=[args.seed])
    root = Path(args.output or os.environ.get(OUTPUT_ENV) or cfg.output_dir)
    for rel, single in expand_suite(cfg):
        run_dir = root / rel
        log.info("training %s", run_dir)
        arts = run_single(single, run_dir, resume=args.resume)
        print(f"{run_dir}\tfinal_val_accuracy={arts.final_val_accuracy}\tbest_val_accuracy={arts.best_val_accuracy}")
    return 0


def _find_runs(paths: list[str]) -> list[Path]:
    runs: list[Path] = []
    for p in map(Path, paths):
        if (p / "config.yaml").exists():
            runs.append(p)
        else:
            found = sorted(c.parent for c in p.rglob("config.yaml"))
            if not found:
                raise UsageError(f"{p}: no runs found")
            runs.extend(found)
    return runs


def collect_scores(run_dirs: list[Path], metric: str) -> tuple[dict[str, np.ndarray], list, list]:
    """Group runs into ``n_seeds x n_memory_sizes`` matrices, one per (arch, task)."""
    key = {"final": "final_val_accuracy", "best": "best_val_accuracy"}[metric]
    cells: dict[str, dict[int, dict[int, float]]] = {}
    for rd in run_dirs:
        cfg = parse_experiment((rd / "config.yaml").read_text())
        summary_path = rd / "report" / "summary.json"
        if not summary_path.exists():
            raise UsageError(f"{rd}: run has no report/summary.json (incomplete)")
        value = json.loads(summary_path.read_text())[key]
        if value is None:
            raise UsageError(f"{rd}: no {key} recorded")
        family = f"{cfg.model.arch}/{cfg.task.kind}"
        cells.setdefault(family, {}).setdefault(cfg.model.memory_size or 0, {})[cfg.train.seed] = float(value)
    families: dict[str, np.ndarray] = {}
    treatments: list = []
    blocks: list = []
    for family, by_size in sorted(cells.items()):
        sizes = sorted(by_size)
        seeds = sorted(by_size[sizes[0]])
        if any(sorted(by_size[s]) != seeds for s in sizes):
            raise UsageError(f"{family}: seed sets differ across memory sizes")
        if len(sizes) < 2 or len(seeds) < 2:
            raise UsageError(f"{family}: need >= 2 memory sizes and >= 2 seeds, got {sizes} x {seeds}")
        if treatments and (sizes != treatments or seeds != blocks):
            raise UsageError(f"{family}: treatments/blocks differ from other families")
        treatments, blocks = sizes, seeds
        families[family] = np.array([[by_size[s][seed] for s in sizes] for seed in seeds])
    return families, treatments, blocks


def cmd_compare(args) -> int:
    families, treatments, blocks = collect_scores(_find_runs(args.run_dirs), args.metric)
    report = compare_treatments(families, treatments, blocks, exact=args.exact)
    out = Path(args.output)
    header = ["hypothesis", "chi2", "p_raw", "p_holm"]
    write_table(out / "friedman.tsv", header, report.rows())
    score_rows = [[fam, seed, size, m[i, j]] for fam, m in families.items() for i, seed in enumerate(blocks) for j, size in enumerate(treatments)]
    write_table(out / "scores.tsv", ["hypothesis", "seed", "memory_size", args.metric + "_accuracy"], score_rows)
    print("\t".join(header))
    for row in report.rows():
        print("\t".join(str(v) for v in row))
    return 0


def cmd_diagnose(args) -> int:
    run_dir = Path(args.run_dir)
    snap_paths = sorted((run_dir / "snapshots").glob("*.ckpt"))
    if not snap_paths:
        raise UsageError(f"{run_dir}: no memory snapshots to diagnose")
    snaps = [load_snapshot(p) for p in snap_paths]
    series = degradation_series(snaps, args.tol)
    deg_rows = [[r.step, r.block, r.tag, r.mean_pairwise_cosine, r.numerical_rank, r.unique_vector_count, int(r.degenerate)] for r in series]
    ent_rows = []
    metrics_path = run_dir / "metrics.jsonl"
    if metrics_path.exists():
        for rec in read_metrics(metrics_path):
            if rec["metric"].startswith("attention_entropy/"):
                ent_rows.append([rec["step"], rec["metric"].split("/", 1)[1], rec["value"]])
    last = max((s for s in snaps if s.tag == "value"), key=lambda s: s.step, default=snaps[-1])
    heat_rows = [[last.step, i, j, float(v)] for (i, j), v in np.ndenumerate(last.matrix)]
    out = Path(args.output) if args.output else run_dir / "report"
    write_table(out / "degradation.tsv", ["step", "block", "tag", "mean_pairwise_cosine", "numerical_rank", "unique_vector_count", "degenerate"], deg_rows)
    write_table(out / "attention_entropy.tsv", ["step", "block", "normalized_entropy"], ent_rows)
    write_table(out / "memory_heatmap.tsv", ["step", "row", "col", "value"], heat_rows)
    print(f"{len(deg_rows)} snapshot rows, {len(ent_rows)} entropy rows -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="convluna", description="Luna / ConvLuna memory-attention lab")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train every (memory size, seed) run of an experiment config")
    run.add_argument("--config", required=True)
    run.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted-path override, repeatable")
    run.add_argument("--output", help=f"output root (default: ${OUTPUT_ENV} or output_dir from the config)")
    run.add_argument("--seed", type=int, help="run only this seed")
    run.add_argument("--resume", action="store_true", help="continue runs from checkpoints/state.ckpt")
    run.set_defaults(func=cmd_run)

    cmp_ = sub.add_parser("compare", help="Friedman test across memory sizes + Holm correction")
    cmp_.add_argument("run_dirs", nargs="+")
    cmp_.add_argument("--metric", choices=("final", "best"), default="final")
    cmp_.add_argument("--output", default="comparison")
    cmp_.add_argument("--exact", action="store_true", help="permutation p-values instead of chi-square")
    cmp_.set_defaults(func=cmd_compare)

    diag = sub.add_parser("diagnose", help="memory degradation and attention entropy tables")
    diag.add_argument("run_dir")
    diag.add_argument("--output", help="directory for the tables (default: <run_dir>/report)")
    diag.add_argument("--tol", type=float, default=1e-3)
    diag.set_defaults(func=cmd_diagnose)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConvLunaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
