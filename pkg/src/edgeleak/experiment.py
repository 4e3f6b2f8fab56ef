"""Config-driven attack/defense sweeps.

A grid *cell* is one (defense variant, seed) pair: the graph is perturbed
(unless the variant is vanilla), a GCN is trained, and then every attacker
runs for every (stratum, density-belief multiplier) combination. Each cell
contributes one CSV row per (stratum, multiplier, attacker). A cell that fails
contributes a single status row instead.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from copy import deepcopy
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np

from . import dpgraph
from .errors import EdgeLeakError, InputError
from .gcn import Blackbox, TrainConfig, train
from .graph import (
    Dataset,
    Stratum,
    auto_thresholds,
    degree_stratified_sample,
    load_dataset,
    make_sbm_dataset,
    normalize,
    round_msd,
)
from .linkteller import run_attacker
from .metrics import PairGroundTruth, evaluate_attack, utility_report

log = logging.getLogger(__name__)

CONFIG_VERSION = 1
VANILLA = "none"

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["version"],
    "additionalProperties": False,
    "properties": {
        "version": {"const": CONFIG_VERSION},
        "name": {"type": "string"},
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["sbm", "files"]},
                "block_sizes": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
                "p_in": {"type": "number", "minimum": 0, "maximum": 1},
                "p_out": {"type": "number", "minimum": 0, "maximum": 1},
                "feature_dim": {"type": "integer", "minimum": 1},
                "feature_signal": {"type": "number", "minimum": 0},
                "splits": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 3, "maxItems": 3},
                "inductive": {"type": "boolean"},
                "seed": {"type": "integer", "minimum": 0},
                "train_dir": {"type": "string"},
                "infer_dir": {"type": ["string", "null"]},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "epochs": {"type": "integer", "minimum": 1},
                "dropout": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "hidden_dims": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                "norm_kind": {"enum": ["FirstOrderGCN", "AugNormAdj", "BingGeNormAdj", "AugRWalk"]},
                "optimizer": {"enum": ["adam", "sgd"]},
            },
        },
        "attack": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "strata": {
                    "type": "array",
                    "minItems": 1,
                    "items": {
                        "type": "object",
                        "required": ["kind"],
                        "additionalProperties": False,
                        "properties": {
                            "kind": {"enum": ["low", "unconstrained", "high"]},
                            "threshold": {"type": ["integer", "null"]},
                        },
                    },
                },
                "n_targets": {"type": "integer", "minimum": 2},
                "k_hat_multipliers": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
                "delta": {"type": "number", "exclusiveMinimum": 0},
                "attackers": {
                    "type": "array",
                    "minItems": 1,
                    "items": {"enum": ["linkteller", "lsa2-post", "lsa2-attr", "random"]},
                },
            },
        },
        "defense": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mechanisms": {"type": "array", "items": {"enum": list(dpgraph.MECHANISMS)}},
                "epsilons": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
                "edgerand_max_cells": {"type": ["integer", "null"], "minimum": 0},
                "edgerand_max_density": {"type": "number"},
                "lapgraph_count_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            },
        },
        "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
        "output_dir": {"type": "string"},
    },
}

DEFAULT_CONFIG = {
    "version": CONFIG_VERSION,
    "name": "sbm-desk",
    "dataset": {
        "kind": "sbm",
        "block_sizes": [125, 125, 125, 125],
        "p_in": 0.2,
        "p_out": 0.01,
        "feature_dim": 16,
        "feature_signal": 1.0,
        "splits": [0.3, 0.2, 0.5],
        "inductive": True,
        "seed": 0,
    },
    "train": {
        "learning_rate": 0.01,
        "epochs": 200,
        "dropout": 0.5,
        "hidden_dims": [64],
        "norm_kind": "FirstOrderGCN",
        "optimizer": "adam",
    },
    "attack": {
        "strata": [{"kind": "low"}, {"kind": "unconstrained"}, {"kind": "high"}],
        "n_targets": 100,
        "k_hat_multipliers": [0.25, 0.5, 1, 2, 4],
        "delta": 1e-4,
        "attackers": ["linkteller", "lsa2-post", "lsa2-attr", "random"],
    },
    "defense": {
        "mechanisms": ["EdgeRand", "LapGraph"],
        "epsilons": [1, 2, 3, 4, 5, 6, 7, 8, 9, 10],
        "edgerand_max_cells": None,
        "edgerand_max_density": dpgraph.DEFAULT_MAX_DENSITY,
        "lapgraph_count_fraction": dpgraph.DEFAULT_COUNT_FRACTION,
    },
    "seeds": [1, 2, 3],
    "output_dir": "results",
}

CSV_COLUMNS = [
    "experiment",
    "mechanism",
    "epsilon",
    "seed",
    "stratum",
    "n_targets",
    "k_mult",
    "k_hat",
    "density",
    "density_rounded",
    "attacker",
    "status",
    "error",
    "precision",
    "recall",
    "f1",
    "auc",
    "num_predicted",
    "num_true",
    "num_queries",
    "precision_bound",
    "utility_accuracy",
    "utility_micro_f1",
    "utility_rare_f1",
    "val_accuracy",
    "train_graph_edges",
    "infer_graph_edges",
]

SUMMARY_METRICS = ["precision", "recall", "f1", "auc", "utility_accuracy", "utility_rare_f1", "precision_bound"]


def _merge(base: dict, override: dict) -> dict:
    out = deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = deepcopy(v)
    return out


def load_config(path) -> dict:
    """Read, validate and fill defaults for an experiment config. Relative paths resolve against the config's directory."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from None
    return validate_config(raw, base_dir=path.parent)


def validate_config(raw: dict, base_dir=".") -> dict:
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise InputError(f"config error at {where}: {exc.message}") from None
    cfg = _merge(DEFAULT_CONFIG, raw)
    ds = cfg["dataset"]
    if ds["kind"] == "files":
        for key in ("train_dir", "infer_dir"):
            if ds.get(key):
                p = Path(ds[key])
                if not p.is_absolute():
                    p = Path(base_dir) / p
                for fname in ("graph.txt", "features.csv", "labels.txt", "splits.txt"):
                    if not (p / fname).exists():
                        raise InputError(f"config error at dataset/{key}: missing {p / fname}")
                ds[key] = str(p)
        if not ds.get("train_dir"):
            raise InputError("config error at dataset: kind 'files' needs train_dir")
    elif not ds["p_out"] <= ds["p_in"]:
        raise InputError("config error at dataset: need p_out <= p_in")
    return cfg


# --------------------------------------------------------------------------
# grid
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Cell:
    mechanism: str
    epsilon: float | None
    seed: int

    @property
    def tag(self) -> str:
        if self.mechanism == VANILLA:
            return f"{VANILLA}_seed{self.seed}"
        return f"{self.mechanism}_eps{self.epsilon:g}_seed{self.seed}"


def grid_cells(cfg: dict, seed_offset: int = 0) -> list[Cell]:
    variants = [(VANILLA, None)]
    for mech in cfg["defense"]["mechanisms"]:
        for eps in cfg["defense"]["epsilons"]:
            variants.append((mech, float(eps)))
    return [Cell(m, e, int(s) + seed_offset) for m, e in variants for s in cfg["seeds"]]


def build_datasets(cfg: dict) -> tuple[Dataset, Dataset]:
    """(training dataset, inference dataset); the same object when transductive."""
    ds = cfg["dataset"]
    if ds["kind"] == "files":
        train_ds = load_dataset(ds["train_dir"])
        infer_ds = load_dataset(ds["infer_dir"], train_ds.num_classes) if ds.get("infer_dir") else train_ds
        return train_ds, infer_ds
    kw = dict(
        block_sizes=ds["block_sizes"],
        p_in=ds["p_in"],
        p_out=ds["p_out"],
        feature_dim=ds["feature_dim"],
        feature_signal=ds["feature_signal"],
        splits=ds["splits"],
        centroid_seed=ds["seed"],
    )
    train_ds = make_sbm_dataset(seed=ds["seed"], **kw)
    if not ds["inductive"]:
        return train_ds, train_ds
    infer_ds = make_sbm_dataset(seed=ds["seed"] + 1_000_003, **kw)
    return train_ds, infer_ds


def target_pool(train_ds: Dataset, infer_ds: Dataset) -> np.ndarray:
    """Candidate target nodes: the test split when transductive, every node otherwise."""
    if infer_ds is train_ds:
        return train_ds.test
    return np.arange(infer_ds.n)


def resolve_strata(cfg: dict, infer_ds: Dataset, pool: np.ndarray) -> list[Stratum]:
    n_c = cfg["attack"]["n_targets"]
    auto = None
    out = []
    for spec in cfg["attack"]["strata"]:
        kind, thr = spec["kind"], spec.get("threshold")
        if kind != "unconstrained" and thr is None:
            if auto is None:
                auto = auto_thresholds(infer_ds.graph, min(2 * n_c, len(pool)), pool)
            thr = auto[0] if kind == "low" else auto[1]
        out.append(Stratum(kind, thr if kind != "unconstrained" else None))
    return out


def _train_config(cfg: dict, seed: int) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        learning_rate=t["learning_rate"],
        epochs=t["epochs"],
        dropout=t["dropout"],
        hidden_dims=tuple(t["hidden_dims"]),
        norm_kind=t["norm_kind"],
        seed=seed,
        optimizer=t["optimizer"],
    )


def _empty_row(cfg: dict, cell: Cell) -> dict:
    row = {c: "" for c in CSV_COLUMNS}
    row.update(
        experiment=cfg["name"],
        mechanism=cell.mechanism,
        epsilon="" if cell.epsilon is None else cell.epsilon,
        seed=cell.seed,
    )
    return row


def run_cell(cfg: dict, cell: Cell) -> tuple[list[dict], dict]:
    """Execute one grid cell; returns its CSV rows and a JSON-able report."""
    train_ds, infer_ds = build_datasets(cfg)
    pool = target_pool(train_ds, infer_ds)
    strata = resolve_strata(cfg, infer_ds, pool)
    tcfg = _train_config(cfg, cell.seed)
    report = {"cell": cell.tag, "mechanism": cell.mechanism, "epsilon": cell.epsilon, "seed": cell.seed}
    try:
        if cell.mechanism == VANILLA:
            model = train(train_ds, normalize(train_ds.graph, tcfg.norm_kind), tcfg)
            train_graph, infer_graph = train_ds.graph, infer_ds.graph
            bb_factory = lambda: Blackbox(model, infer_graph)  # noqa: E731
        else:
            d = cfg["defense"]
            pipe = dpgraph.dp_train_and_infer(
                train_ds,
                dpgraph.DpBudget(cell.epsilon, cell.mechanism),
                tcfg,
                cell.seed,
                infer_dataset=None if infer_ds is train_ds else infer_ds,
                max_cells=d["edgerand_max_cells"],
                max_density=d["edgerand_max_density"],
                count_fraction=d["lapgraph_count_fraction"],
            )
            model = pipe.model
            train_graph, infer_graph = pipe.train_graph.graph, pipe.infer_graph.graph
            report["train_graph_provenance"] = pipe.train_graph.provenance()
            report["infer_graph_provenance"] = pipe.infer_graph.provenance()
            bb_factory = lambda: Blackbox(model, infer_graph, provenance=pipe.infer_graph.token)  # noqa: E731
    except EdgeLeakError as exc:
        row = _empty_row(cfg, cell)
        row.update(status="error", error=f"{type(exc).__name__}: {exc}")
        report["status"] = "error"
        report["error"] = row["error"]
        return [row], report

    util = utility_report(bb_factory(), _utility_view(train_ds, infer_ds), "test", degree_graph=infer_ds.graph)
    val_acc = model.history.val_accuracy[-1] if model.history and model.history.val_accuracy else float("nan")
    report.update(status="ok", utility=util.to_dict(), val_accuracy=val_acc, attacks=[])

    base = _empty_row(cfg, cell)
    base.update(
        status="ok",
        utility_accuracy=util.accuracy,
        utility_micro_f1=util.micro_f1,
        utility_rare_f1=util.rare_class_f1,
        val_accuracy=val_acc,
        train_graph_edges=train_graph.m,
        infer_graph_edges=infer_graph.m,
    )
    eps = math.inf if cell.epsilon is None else cell.epsilon
    a = cfg["attack"]
    rows = []
    for stratum in strata:
        try:
            targets = degree_stratified_sample(infer_ds.graph, stratum, a["n_targets"], cell.seed, pool)
        except EdgeLeakError as exc:
            row = dict(base, stratum=str(stratum), status="error", error=f"{type(exc).__name__}: {exc}")
            rows.append(row)
            continue
        # ground truth always comes from the unperturbed private graph
        truth = PairGroundTruth.from_graph(infer_ds.graph, targets)
        k = truth.density
        feats = infer_ds.features[targets]
        for mult in a["k_hat_multipliers"]:
            k_hat = mult * k
            for name in a["attackers"]:
                bb = bb_factory()
                r = run_attacker(name, bb, targets, feats, k_hat, a["delta"], stratum=str(stratum), seed=cell.seed)
                met = evaluate_attack(r, truth)
                rows.append(
                    dict(
                        base,
                        stratum=str(stratum),
                        n_targets=len(targets),
                        k_mult=mult,
                        k_hat=k_hat,
                        density=k,
                        density_rounded=round_msd(k),
                        attacker=name,
                        precision=met["precision"],
                        recall=met["recall"],
                        f1=met["f1"],
                        auc="" if met["auc"] is None else met["auc"],
                        num_predicted=met["num_predicted"],
                        num_true=met["num_true"],
                        num_queries=bb.num_queries,
                        precision_bound=dpgraph.precision_bound(eps, k),
                    )
                )
                entry = r.to_dict(include_pairs=False)
                entry["k_mult"] = mult
                report["attacks"].append(entry)
    return rows, report


def _utility_view(train_ds: Dataset, infer_ds: Dataset) -> Dataset:
    """Dataset whose ``test`` split is what utility is measured on.

    Transductive: the test split. Inductive: every node of the inference graph.
    """
    if infer_ds is train_ds:
        return infer_ds
    empty = np.empty(0, dtype=np.int64)
    return Dataset(infer_ds.graph, infer_ds.features, infer_ds.labels, empty, empty, np.arange(infer_ds.n), infer_ds.num_classes)


# --------------------------------------------------------------------------
# output
# --------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return repr(v)
    return str(v)


def rows_to_csv(rows: list[dict], columns=CSV_COLUMNS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row.get(c, "")) for c in columns])
    return buf.getvalue()


def atomic_write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _as_float(x):
    try:
        return float(x)
    except (TypeError, ValueError):
        return None


def summarize(rows: list[dict]) -> list[dict]:
    """Mean and population std over seeds per (mechanism, epsilon, stratum, k_mult, attacker)."""
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        if row.get("status") != "ok" or row.get("attacker") in ("", None):
            continue
        key = (row["mechanism"], str(row["epsilon"]), row["stratum"], str(row["k_mult"]), row["attacker"])
        groups.setdefault(key, []).append(row)
    out = []
    for key, members in groups.items():
        rec = dict(zip(["mechanism", "epsilon", "stratum", "k_mult", "attacker"], key))
        rec["n_seeds"] = len(members)
        for metric in SUMMARY_METRICS:
            vals = [v for v in (_as_float(m.get(metric)) for m in members) if v is not None]
            rec[f"{metric}_mean"] = float(np.mean(vals)) if vals else ""
            rec[f"{metric}_std"] = float(np.std(vals)) if vals else ""
        out.append(rec)
    return out


SUMMARY_COLUMNS = ["mechanism", "epsilon", "stratum", "k_mult", "attacker", "n_seeds"] + [
    f"{m}_{s}" for m in SUMMARY_METRICS for s in ("mean", "std")
]


def _run_cell_job(args):
    cfg, cell = args
    return run_cell(cfg, cell)


def run_experiment(config, out_dir=None, jobs: int = 1, seed_offset: int = 0) -> dict:
    """Run the whole grid and write results.csv, summary.csv and per-cell JSON reports.

    Returns ``{"rows": ..., "summary": ..., "failed": [...], "out_dir": ...}``.
    """
    cfg = config if isinstance(config, dict) else load_config(config)
    out = Path(out_dir or cfg["output_dir"])
    cells = grid_cells(cfg, seed_offset)
    work = [(cfg, c) for c in cells]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell_job, work))
    else:
        results = [_run_cell_job(w) for w in work]

    rows, failed = [], []
    for cell, (cell_rows, report) in zip(cells, results):
        atomic_write(out / "reports" / f"{cell.tag}.json", json.dumps(report, indent=2, sort_keys=True, default=_json_default) + "\n")
        if any(r["status"] != "ok" for r in cell_rows):
            failed.append(cell.tag)
            log.warning("cell %s: %s", cell.tag, next(r["error"] for r in cell_rows if r["status"] != "ok"))
        rows.extend(cell_rows)
    summary = summarize(rows)
    atomic_write(out / "results.csv", rows_to_csv(rows))
    atomic_write(out / "summary.csv", rows_to_csv(summary, SUMMARY_COLUMNS))
    atomic_write(out / "config.resolved.json", json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return {"rows": rows, "summary": summary, "failed": failed, "out_dir": out}


def _json_default(o):
    if isinstance(o, (np.integer, np.floating)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------


def read_csv_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def tradeoff_series(rows: list[dict]) -> list[dict]:
    """Mean utility vs mean attack F1 per (mechanism, epsilon, stratum, k_mult, attacker), epsilon ascending."""
    summary = summarize(rows)
    summary.sort(key=lambda r: (r["mechanism"], r["stratum"], float(r["k_mult"]), r["attacker"],
                                float(r["epsilon"]) if r["epsilon"] not in ("", None) else math.inf))
    return [
        {
            "mechanism": r["mechanism"],
            "epsilon": r["epsilon"],
            "stratum": r["stratum"],
            "k_mult": r["k_mult"],
            "attacker": r["attacker"],
            "utility": r["utility_accuracy_mean"],
            "attack_f1": r["f1_mean"],
            "precision_bound": r["precision_bound_mean"],
        }
        for r in summary
    ]


TRADEOFF_COLUMNS = ["mechanism", "epsilon", "stratum", "k_mult", "attacker", "utility", "attack_f1", "precision_bound"]


def select_epsilon(series: list[dict], utility_threshold: float) -> list[dict]:
    """Smallest epsilon per mechanism whose mean utility reaches ``utility_threshold``."""
    best: dict[str, float] = {}
    for r in series:
        if r["mechanism"] == VANILLA or r["utility"] in ("", None):
            continue
        if float(r["utility"]) >= utility_threshold:
            eps = float(r["epsilon"])
            best[r["mechanism"]] = min(best.get(r["mechanism"], math.inf), eps)
    return [{"mechanism": m, "selected_epsilon": e, "utility_threshold": utility_threshold} for m, e in sorted(best.items())]
