"""Command-line entry point: ``edgeleak <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import dpgraph, experiment
from .errors import EdgeLeakError
from .gcn import Blackbox, TrainConfig, load_model, save_model, train
from .graph import (
    NormKind,
    Stratum,
    auto_thresholds,
    degree_stratified_sample,
    load_dataset,
    load_edgelist,
    make_er_dataset,
    make_sbm_dataset,
    normalize,
    save_dataset,
)
from .linkteller import ATTACKERS, DEFAULT_DELTA, run_attacker
from .metrics import PairGroundTruth, evaluate_attack, utility_report


def cmd_gen(args) -> int:
    if args.kind == "er":
        ds = make_er_dataset(args.n, args.k, args.seed, num_classes=args.classes, feature_dim=args.feature_dim)
    else:
        blocks = [int(b) for b in args.blocks.split(",")]
        ds = make_sbm_dataset(
            blocks, args.p_in, args.p_out, args.seed,
            feature_dim=args.feature_dim, feature_signal=args.feature_signal,
            centroid_seed=args.centroid_seed,
        )
    save_dataset(ds, args.out)
    print(f"wrote {args.out}: n={ds.n} m={ds.graph.m} density={ds.graph.density:.6g}")
    return 0


def cmd_train(args) -> int:
    ds = load_dataset(args.data)
    cfg = TrainConfig(
        learning_rate=args.lr,
        epochs=args.epochs,
        dropout=args.dropout,
        hidden_dims=tuple(int(h) for h in args.hidden.split(",")) if args.hidden else (),
        norm_kind=args.norm,
        seed=args.seed,
        optimizer=args.optimizer,
    )
    model = train(ds, normalize(ds.graph, cfg.norm_kind), cfg)
    save_model(model, args.out)
    h = model.history
    val = h.val_accuracy[-1] if h.val_accuracy else float("nan")
    print(f"loss {h.train_loss[0]:.4f} -> {h.train_loss[-1]:.4f}; val accuracy {val:.4f}; saved {args.out}")
    return 0


def cmd_attack(args) -> int:
    ds = load_dataset(args.data)
    model = load_model(args.model)
    bb = Blackbox(model, ds.graph)
    pool = np.arange(ds.n) if args.pool == "all" else ds.test
    threshold = args.threshold
    if args.stratum != "unconstrained" and threshold is None:
        lo, hi = auto_thresholds(ds.graph, min(2 * args.n_targets, len(pool)), pool)
        threshold = lo if args.stratum == "low" else hi
    stratum = Stratum(args.stratum, threshold if args.stratum != "unconstrained" else None)
    targets = degree_stratified_sample(ds.graph, stratum, args.n_targets, args.seed, pool)
    truth = PairGroundTruth.from_graph(ds.graph, targets)
    k_hat = args.k_hat if args.k_hat is not None else args.k_mult * truth.density
    report = run_attacker(args.attacker, bb, targets, ds.features[targets], k_hat, args.delta,
                          stratum=str(stratum), seed=args.seed)
    metrics = evaluate_attack(report, truth)
    report.notes["num_queries"] = bb.num_queries
    report.notes["utility_accuracy"] = utility_report(bb, ds, "test").accuracy if len(ds.test) else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.save_json(out / "report.json")
    report.save_pair_csv(out / "pairs.csv", truth)
    auc = "n/a" if metrics["auc"] is None else f"{metrics['auc']:.4f}"
    print(
        f"{args.attacker} on {stratum}: density={truth.density:.4g} k_hat={k_hat:.4g} "
        f"precision={metrics['precision']:.4f} recall={metrics['recall']:.4f} "
        f"f1={metrics['f1']:.4f} auc={auc}"
    )
    return 0


def cmd_perturb(args) -> int:
    graph = load_edgelist(args.graph)
    budget = dpgraph.DpBudget(args.eps, args.mechanism)
    pg = dpgraph.perturb(graph, budget, args.seed, count_fraction=args.count_fraction)
    dpgraph.save_perturbed(pg, args.out)
    print(f"{args.mechanism} eps={args.eps}: {graph.m} -> {pg.graph.m} edges; wrote {args.out}")
    return 0


def cmd_bound(args) -> int:
    print(f"{dpgraph.precision_bound(args.eps, args.density):.4f}")
    return 0


def cmd_report(args) -> int:
    rows = []
    for path in args.inputs:
        rows.extend(experiment.read_csv_rows(path))
    out = Path(args.out)
    experiment.atomic_write(out / "merged.csv", experiment.rows_to_csv(rows))
    series = experiment.tradeoff_series(rows)
    experiment.atomic_write(out / "tradeoff.csv", experiment.rows_to_csv(series, experiment.TRADEOFF_COLUMNS))
    if args.utility_threshold is not None:
        sel = experiment.select_epsilon(series, args.utility_threshold)
        experiment.atomic_write(
            out / "selected_epsilon.csv",
            experiment.rows_to_csv(sel, ["mechanism", "selected_epsilon", "utility_threshold"]),
        )
    print(f"merged {len(rows)} rows from {len(args.inputs)} file(s) into {out}")
    return 0


def cmd_run(args) -> int:
    result = experiment.run_experiment(args.config, args.out, jobs=args.jobs, seed_offset=args.seed_offset)
    n_ok = sum(1 for r in result["rows"] if r["status"] == "ok")
    print(f"{n_ok} result rows, {len(result['failed'])} failed cell(s); wrote {result['out_dir']}")
    for tag in result["failed"]:
        print(f"  failed: {tag}", file=sys.stderr)
    return 1 if result["failed"] else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="edgeleak", description="Edge re-identification attacks and edge-DP defenses for GCNs.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a synthetic dataset directory")
    g.add_argument("--kind", choices=["er", "sbm"], default="sbm")
    g.add_argument("--n", type=int, default=500)
    g.add_argument("--k", type=float, default=0.02, help="ER density")
    g.add_argument("--classes", type=int, default=2, help="ER label count")
    g.add_argument("--blocks", default="125,125,125,125")
    g.add_argument("--p-in", type=float, default=0.2)
    g.add_argument("--p-out", type=float, default=0.01)
    g.add_argument("--feature-dim", type=int, default=16)
    g.add_argument("--feature-signal", type=float, default=1.0)
    g.add_argument("--centroid-seed", type=int, default=None)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a GCN on a dataset directory and save it")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--lr", type=float, default=0.01)
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--dropout", type=float, default=0.5)
    t.add_argument("--hidden", default="64", help="comma-separated hidden widths")
    t.add_argument("--norm", choices=[k.value for k in NormKind], default=NormKind.FIRST_ORDER_GCN.value)
    t.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("attack", help="run one attack against a saved model")
    a.add_argument("--data", required=True, help="dataset directory holding the private inference graph")
    a.add_argument("--model", required=True)
    a.add_argument("--attacker", choices=ATTACKERS, default="linkteller")
    a.add_argument("--stratum", choices=["low", "unconstrained", "high"], default="unconstrained")
    a.add_argument("--threshold", type=int, default=None)
    a.add_argument("--pool", choices=["all", "test"], default="all")
    a.add_argument("--n-targets", type=int, default=100)
    kg = a.add_mutually_exclusive_group()
    kg.add_argument("--k-hat", type=float, default=None)
    kg.add_argument("--k-mult", type=float, default=1.0)
    a.add_argument("--delta", type=float, default=DEFAULT_DELTA)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_attack)

    pt = sub.add_parser("perturb", help="apply an edge-DP mechanism to an edge-list file")
    pt.add_argument("--graph", required=True)
    pt.add_argument("--mechanism", choices=list(dpgraph.MECHANISMS), required=True)
    pt.add_argument("--eps", type=float, required=True)
    pt.add_argument("--seed", type=int, default=0)
    pt.add_argument("--count-fraction", type=float, default=dpgraph.DEFAULT_COUNT_FRACTION)
    pt.add_argument("--out", required=True)
    pt.set_defaults(func=cmd_perturb)

    b = sub.add_parser("bound", help="print the precision ceiling exp(eps) * density")
    b.add_argument("--eps", type=float, required=True)
    b.add_argument("--density", type=float, required=True)
    b.set_defaults(func=cmd_bound)

    r = sub.add_parser("report", help="merge result CSVs and emit plot-ready series")
    r.add_argument("inputs", nargs="+")
    r.add_argument("--out", required=True)
    r.add_argument("--utility-threshold", type=float, default=None)
    r.set_defaults(func=cmd_report)

    x = sub.add_parser("run", help="run a full experiment grid from a JSON config")
    x.add_argument("--config", required=True)
    x.add_argument("--out", default=None)
    x.add_argument("--jobs", type=int, default=1)
    x.add_argument("--seed-offset", type=int, default=0)
    x.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (EdgeLeakError, OSError) as exc:
        print(f"edgeleak {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
