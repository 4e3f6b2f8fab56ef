"""Attack metrics and model-utility metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata
from sklearn.metrics import f1_score, precision_recall_fscore_support

from .errors import InputError, UndefinedMetricError
from .graph import Dataset, SparseGraph


@dataclass(frozen=True, eq=False)
class PairGroundTruth:
    """True edges among target nodes, with ``is_edge`` aligned to lexicographic pair order."""

    nodes: np.ndarray
    is_edge: np.ndarray

    @classmethod
    def from_graph(cls, graph: SparseGraph, nodes: Sequence[int]) -> "PairGroundTruth":
        nodes = np.sort(np.asarray(nodes, dtype=np.int64))
        sub = graph.subgraph(nodes)
        return cls(nodes, sub.cell_mask())

    @property
    def num_edges(self) -> int:
        return int(self.is_edge.sum())

    @property
    def density(self) -> float:
        return self.num_edges / len(self.is_edge) if len(self.is_edge) else 0.0

    def labels_for(self, pairs: np.ndarray) -> np.ndarray:
        pos = np.searchsorted(self.nodes, pairs)
        k = len(self.nodes)
        a, b = pos[:, 0], pos[:, 1]
        idx = a * k - a * (a + 1) // 2 + (b - a - 1)
        return self.is_edge[idx]


def _check_same_nodes(report, truth):
    if len(report.nodes) != len(truth.nodes) or not np.array_equal(np.sort(report.nodes), truth.nodes):
        raise InputError("attack report and ground truth cover different node sets")


def attack_metrics(report, truth: PairGroundTruth) -> dict:
    """Precision, recall and F1 of the predicted edge set.

    No predictions gives precision 0; no true edges gives recall 0 and sets
    ``no_true_edges``.
    """
    _check_same_nodes(report, truth)
    labels = truth.labels_for(report.pairs)
    tp = int(np.sum(report.predicted & labels))
    n_pred = int(report.predicted.sum())
    n_true = int(labels.sum())
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_true if n_true else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return {
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "tp": tp,
        "num_predicted": n_pred,
        "num_true": n_true,
        "no_true_edges": n_true == 0,
    }


def attack_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """ROC-AUC as the Mann-Whitney statistic; tied scores earn half credit."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC is undefined when all pairs share one label")
    ranks = rankdata(scores, method="average")
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def evaluate_attack(report, truth: PairGroundTruth) -> dict:
    """Fill ``report.metrics`` with precision/recall/f1/auc and return it."""
    m = attack_metrics(report, truth)
    if m["no_true_edges"]:
        report.warnings.append("no_true_edges: recall defined as 0")
    try:
        m["auc"] = attack_auc(report.scores, truth.labels_for(report.pairs))
    except UndefinedMetricError:
        m["auc"] = None
    m["density"] = truth.density
    report.metrics.update(m)
    return report.metrics


# --------------------------------------------------------------------------
# utility
# --------------------------------------------------------------------------

DEGREE_BINS = [(0, 0)] + [(lo, lo + 4) for lo in range(1, 50, 5)] + [(51, None)]


def degree_bin_label(lo: int, hi: int | None) -> str:
    if hi is None:
        return f"{lo}+"
    return str(lo) if lo == hi else f"{lo}-{hi}"


@dataclass
class UtilityReport:
    accuracy: float
    micro_f1: float
    rare_class: int
    rare_class_f1: float
    per_class: dict = field(default_factory=dict)
    degree_bins: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "micro_f1": self.micro_f1,
            "rare_class": self.rare_class,
            "rare_class_f1": self.rare_class_f1,
            "per_class": self.per_class,
            "degree_bins": self.degree_bins,
        }


def utility_from_predictions(
    pred: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    degrees: np.ndarray,
    rare_class: int,
) -> UtilityReport:
    classes = list(range(num_classes))
    p, r, f, support = precision_recall_fscore_support(labels, pred, labels=classes, zero_division=0)
    per_class = {
        int(c): {"precision": float(p[c]), "recall": float(r[c]), "f1": float(f[c]), "support": int(support[c])}
        for c in classes
    }
    micro = float(f1_score(labels, pred, labels=classes, average="micro", zero_division=0))
    bins = []
    for lo, hi in DEGREE_BINS:
        sel = (degrees >= lo) if hi is None else (degrees >= lo) & (degrees <= hi)
        count = int(sel.sum())
        row = {"bin": degree_bin_label(lo, hi), "count": count, "micro_f1": None, "accuracy": None}
        if count:
            row["micro_f1"] = float(f1_score(labels[sel], pred[sel], labels=classes, average="micro", zero_division=0))
            row["accuracy"] = float(np.mean(pred[sel] == labels[sel]))
        bins.append(row)
    return UtilityReport(
        accuracy=float(np.mean(pred == labels)),
        micro_f1=micro,
        rare_class=int(rare_class),
        rare_class_f1=float(f[rare_class]),
        per_class=per_class,
        degree_bins=bins,
    )


def rarest_label(labels: np.ndarray, num_classes: int) -> int:
    """Least frequent label; ties go to the smallest label."""
    counts = np.bincount(labels, minlength=num_classes)
    return int(np.argmin(counts))


def utility_report(blackbox, dataset: Dataset, split: str = "test", degree_graph: SparseGraph | None = None) -> UtilityReport:
    """Classification utility on ``split`` through the blackbox.

    The whole node set of ``dataset`` is queried, as a benign user of the
    inference API would; predictions are then read off the split rows.
    Degrees for binning come from ``degree_graph`` (default: the dataset graph).
    """
    idx = {"train": dataset.train, "val": dataset.val, "test": dataset.test}[split]
    if len(idx) == 0:
        raise InputError(f"{split} split is empty")
    logits = blackbox.query(np.arange(dataset.n), dataset.features)
    pred = np.argmax(logits[idx], axis=1)
    labels = dataset.labels[idx]
    g = dataset.graph if degree_graph is None else degree_graph
    rare = rarest_label(dataset.labels, dataset.num_classes)
    return utility_from_predictions(pred, labels, dataset.num_classes, g.degrees[idx], rare)
