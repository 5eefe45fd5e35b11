"""Command-line experiment driver.

Subcommands: ``train`` (fit one checkpoint per training variant and seed),
``eval`` (sweep fault kinds, rates and policies over trained checkpoints),
``props`` (run the certificate suite, nonzero exit on any failure), and
``plotdata`` (aggregate run CSVs into tidy per-panel series).

Run CSVs carry a versioned ``# schema:`` comment line. All columns except
``wall_time`` are deterministic for a fixed config; checkpoints and the
aggregate CSV are byte-identical across reruns on one platform.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .certs import format_report, run_all
from .config import (ExperimentConfig, build_dataset, build_method_graph,
                     build_partition, build_train_config, load_config,
                     parse_seed_list)
from .data import make_splits
from .errors import ConfigError
from .faults import FaultModel
from .metrics import evaluate_policies
from .training import fit, load_checkpoint, save_checkpoint

RUNS_SCHEMA = "# schema: mags/runs/v1"
RUNS_HEADER = ["method", "graph", "fault_kind", "fault_rate", "policy", "seed",
               "accuracy", "comm_mean", "wall_time"]
AGG_SCHEMA = "# schema: mags/aggregate/v1"
AGG_HEADER = ["method", "graph", "fault_kind", "fault_rate", "policy",
              "mean", "std", "comm_mean", "seed_count"]
PLOT_SCHEMA = "# schema: mags/plotdata/v1"
PLOT_ALL_HEADER = ["fault_kind", "graph", "policy", "method", "fault_rate", "mean", "err"]
PLOT_PANEL_HEADER = ["method", "fault_rate", "mean", "err"]


def checkpoint_path(out_dir: Path, train_name: str, seed: int) -> Path:
    return out_dir / "checkpoints" / f"{train_name}-seed{seed}.ckpt"


def _train_task(cfg: ExperimentConfig, train_name: str, seed: int) -> str:
    spec = next(s for s in cfg.train_variants() if s.train_name == train_name)
    train_full, _ = build_dataset(cfg)
    partition = build_partition(cfg, train_full)
    graph = build_method_graph(cfg, spec)
    train, val = make_splits(train_full, seed)
    tc = build_train_config(cfg, spec, seed)
    path = checkpoint_path(cfg.out_dir, spec.train_name, seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    curve = path.with_name(f"{spec.train_name}-seed{seed}-curve.csv")
    curve.unlink(missing_ok=True)  # curves append; rewrite for idempotent reruns
    ckpt = fit(tc, train, val, partition, graph, curve_path=curve)
    ckpt.config["method"] = spec.train_name
    save_checkpoint(ckpt, path)
    return str(path)


def cmd_train(cfg: ExperimentConfig, workers: int = 1) -> int:
    tasks = [(spec.train_name, seed)
             for spec in cfg.train_variants() for seed in cfg.seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {name_seed: pool.submit(_train_task, cfg, *name_seed)
                       for name_seed in tasks}
            paths = [futures[t].result() for t in tasks]
    else:
        paths = [_train_task(cfg, name, seed) for name, seed in tasks]
    for p in paths:
        print(p)
    return 0


def _eval_task(cfg: ExperimentConfig, method_name: str, kind: str, rate: float, seed: int):
    spec = next(s for s in cfg.method_specs() if s.name == method_name)
    _, test = build_dataset(cfg)
    partition = build_partition(cfg, test)
    graph = build_method_graph(cfg, spec)
    ckpt = load_checkpoint(checkpoint_path(cfg.out_dir, spec.train_name, seed))
    if list(ckpt.config.get("aggregators", [])) != list(graph.aggregators):
        raise ConfigError(
            f"checkpoint {spec.train_name}-seed{seed} aggregators do not match config graph")
    start = time.perf_counter()
    result = evaluate_policies(ckpt.model, test.features, test.labels, partition,
                               graph, FaultModel(kind, rate), cfg.policies,
                               spec.gossip_rounds, seed, batch_size=cfg.batch_size,
                               trials=cfg.trials)
    wall = time.perf_counter() - start
    rows = []
    for policy in cfg.policies:
        undefined = spec.aggregator_count == 1 and policy in ("active_best", "active_worst")
        acc = "nan" if undefined else f"{result.accuracy[policy]:.6f}"
        rows.append([method_name, cfg.graph_kind, kind, f"{rate:g}", policy,
                     str(seed), acc, f"{result.comm_mean:.4f}", f"{wall:.3f}"])
    return rows


def cmd_eval(cfg: ExperimentConfig, workers: int = 1) -> int:
    cells = [(m.name, kind, rate, seed)
             for m in cfg.method_specs()
             for kind in cfg.fault_kinds
             for rate in cfg.fault_rates
             for seed in cfg.seeds]
    for m in cfg.method_specs():
        for seed in cfg.seeds:
            p = checkpoint_path(cfg.out_dir, m.train_name, seed)
            if not p.exists():
                raise ConfigError(f"missing checkpoint {p}; run `mags train` first")

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {cell: pool.submit(_eval_task, cfg, *cell) for cell in cells}
            results = {cell: futures[cell].result() for cell in cells}
    else:
        results = {cell: _eval_task(cfg, *cell) for cell in cells}

    method_order = {m.name: i for i, m in enumerate(cfg.method_specs())}
    kind_order = {k: i for i, k in enumerate(cfg.fault_kinds)}
    policy_order = {p: i for i, p in enumerate(cfg.policies)}
    rows = [row for cell in cells for row in results[cell]]
    rows.sort(key=lambda r: (method_order[r[0]], kind_order[r[2]], float(r[3]),
                             policy_order[r[4]], int(r[5])))

    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    runs_path = cfg.out_dir / "runs.csv"
    with open(runs_path, "w", newline="") as f:
        f.write(RUNS_SCHEMA + "\n")
        w = csv.writer(f)
        w.writerow(RUNS_HEADER)
        w.writerows(rows)

    agg_rows = aggregate_rows(rows)
    agg_path = cfg.out_dir / "aggregate.csv"
    with open(agg_path, "w", newline="") as f:
        f.write(AGG_SCHEMA + "\n")
        w = csv.writer(f)
        w.writerow(AGG_HEADER)
        w.writerows(agg_rows)

    print(runs_path)
    print(agg_path)
    return 0


def aggregate_rows(rows):
    """Collapse per-seed rows to mean/std keyed by (method, kind, rate, policy),
    preserving first-appearance order."""
    groups, order = {}, []
    for r in rows:
        key = (r[0], r[1], r[2], r[3], r[4])
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(r)
    out = []
    for key in order:
        accs = [float(r[6]) for r in groups[key]]
        comms = [float(r[7]) for r in groups[key]]
        arr = np.array(accs)
        if np.isnan(arr).any():
            mean_s, std_s = "nan", "nan"
        else:
            std = arr.std(ddof=1) if len(arr) > 1 else 0.0
            mean_s, std_s = f"{arr.mean():.6f}", f"{std:.6f}"
        out.append([key[0], key[1], key[2], key[3], key[4],
                    mean_s, std_s, f"{np.mean(comms):.4f}", str(len(accs))])
    return out


def cmd_props(seed: int = 0, out: str | None = None) -> int:
    results = run_all(seed)
    report = format_report(results)
    print(report)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(report + "\n")
    return 0 if all(r.passed for r in results) else 1


def read_runs_csv(path):
    with open(path) as f:
        first = f.readline().strip()
        if first != RUNS_SCHEMA:
            raise ConfigError(f"{path}: expected schema line {RUNS_SCHEMA!r}, got {first!r}")
        reader = csv.reader(f)
        header = next(reader, None)
        if header != RUNS_HEADER:
            raise ConfigError(f"{path}: unexpected runs header {header}")
        return [row for row in reader if row]


def cmd_plotdata(csv_paths, out_dir) -> int:
    rows = []
    for p in csv_paths:
        rows.extend(read_runs_csv(p))
    agg = aggregate_rows(rows)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    all_path = out / "plot_all.csv"
    with open(all_path, "w", newline="") as f:
        f.write(PLOT_SCHEMA + "\n")
        w = csv.writer(f)
        w.writerow(PLOT_ALL_HEADER)
        for a in agg:
            w.writerow([a[2], a[1], a[4], a[0], a[3], a[5], a[6]])
    written = [all_path]

    panels, order = {}, []
    for a in agg:
        key = (a[2], a[1], a[4])  # fault kind, graph, policy
        if key not in panels:
            panels[key] = []
            order.append(key)
        panels[key].append([a[0], a[3], a[5], a[6]])
    for kind, graph, policy in order:
        path = out / f"plot_{kind}_{graph}_{policy}.csv"
        with open(path, "w", newline="") as f:
            f.write(PLOT_SCHEMA + "\n")
            w = csv.writer(f)
            w.writerow(PLOT_PANEL_HEADER)
            w.writerows(panels[(kind, graph, policy)])
        written.append(path)
    for p in written:
        print(p)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="mags",
        description="Fault-tolerant decentralized collaborative inference experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, doc in (("train", "train checkpoints for every method variant and seed"),
                      ("eval", "sweep fault kinds/rates/policies over trained checkpoints")):
        p = sub.add_parser(name, help=doc)
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--out", help="output directory (overrides [run] out)")
        p.add_argument("--seeds", help="seed list like 1,2,3 or 1..16 (overrides config)")
        p.add_argument("--workers", type=int, default=1, help="worker processes")

    p = sub.add_parser("props", help="run the certificate suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="also write the report to this file")

    p = sub.add_parser("plotdata", help="aggregate run CSVs into plot series")
    p.add_argument("csvs", nargs="+", help="run CSV files")
    p.add_argument("--out", required=True, help="output directory")

    args = parser.parse_args(argv)
    try:
        if args.command in ("train", "eval"):
            seeds = parse_seed_list(args.seeds) if args.seeds else None
            cfg = load_config(args.config, seeds_override=seeds, out_override=args.out)
            if args.command == "train":
                return cmd_train(cfg, workers=args.workers)
            return cmd_eval(cfg, workers=args.workers)
        if args.command == "props":
            return cmd_props(args.seed, args.out)
        return cmd_plotdata(args.csvs, args.out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
