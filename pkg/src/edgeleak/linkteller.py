"""Edge re-identification attacks that see the model only through a blackbox.

LinkTeller perturbs one node's features at a time and measures how much every
other node's logits move; pairs with large influence are predicted as edges.
The baselines are a Bernoulli random guesser and the two LSA2 variants, which
rank pairs by correlation distance of posteriors or raw attributes.

A blackbox is any object with ``query(nodes, features) -> logits``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ParameterError, ShapeError
from .gcn import softmax
from .rng import make_rng

DEFAULT_DELTA = 1e-4

# correlation distance assigned when a row has zero variance
WORST_DISTANCE = 2.0


def _canonical_nodes(target_nodes: Sequence[int]) -> np.ndarray:
    nodes = np.asarray(target_nodes, dtype=np.int64).ravel()
    if len(np.unique(nodes)) != len(nodes):
        raise ParameterError("target nodes must be distinct")
    return np.sort(nodes)


def pair_positions(k: int) -> tuple[np.ndarray, np.ndarray]:
    """Index pairs ``(a, b)``, ``a < b``, over ``k`` sorted nodes, lexicographic."""
    return np.triu_indices(k, k=1)


def prediction_count(k_hat: float, num_pairs: int) -> tuple[int, bool]:
    """``round(k_hat * num_pairs)`` clamped to ``num_pairs``; flag is True when clamped."""
    if k_hat < 0:
        raise ParameterError(f"density belief must be non-negative, got {k_hat}")
    m = int(np.rint(k_hat * num_pairs))
    if m > num_pairs:
        return num_pairs, True
    return m, False


def rank_pairs(scores: np.ndarray) -> np.ndarray:
    """Pair indices by descending score, ties broken by pair index."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(len(scores)), -scores))


@dataclass
class AttackReport:
    """Outcome of one attack over target nodes ``nodes`` (sorted ids).

    ``pairs`` lists every unordered pair of target nodes in lexicographic order;
    ``scores`` and ``predicted`` are aligned with it.
    """

    attacker: str
    nodes: np.ndarray
    pairs: np.ndarray
    scores: np.ndarray
    predicted: np.ndarray
    k_hat: float
    m: int
    delta: float | None = None
    stratum: str | None = None
    seed: int | None = None
    warnings: list[str] = field(default_factory=list)
    notes: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)

    @property
    def predicted_edges(self) -> set[tuple[int, int]]:
        return {(int(i), int(j)) for i, j in self.pairs[self.predicted]}

    def to_dict(self, include_pairs: bool = True) -> dict:
        out = {
            "schema": "edgeleak.attack_report/1",
            "attacker": self.attacker,
            "config": {
                "k_hat": self.k_hat,
                "m": self.m,
                "delta": self.delta,
                "stratum": self.stratum,
                "seed": self.seed,
            },
            "nodes": [int(v) for v in self.nodes],
            "predicted_edges": [[int(i), int(j)] for i, j in self.pairs[self.predicted]],
            "metrics": {k: _jsonable(v) for k, v in self.metrics.items()},
            "warnings": list(self.warnings),
            "notes": {k: _jsonable(v) for k, v in self.notes.items()},
        }
        if include_pairs:
            out["pair_scores"] = [
                [int(i), int(j), float(s)] for (i, j), s in zip(self.pairs, self.scores)
            ]
        return out

    def save_json(self, path, include_pairs: bool = True) -> None:
        Path(path).write_text(json.dumps(self.to_dict(include_pairs), indent=2, sort_keys=True) + "\n")

    def save_pair_csv(self, path, truth=None) -> None:
        """Flat per-pair CSV: ``u,v,score,predicted[,is_edge]``."""
        labels = None if truth is None else truth.labels_for(self.pairs)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["u", "v", "score", "predicted"] + (["is_edge"] if labels is not None else []))
            for k, ((i, j), s, p) in enumerate(zip(self.pairs, self.scores, self.predicted)):
                row = [int(i), int(j), repr(float(s)), int(p)]
                if labels is not None:
                    row.append(int(labels[k]))
                w.writerow(row)


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    return v


def _threshold_report(attacker, nodes, scores, k_hat, **extra) -> AttackReport:
    a, b = pair_positions(len(nodes))
    pairs = np.stack([nodes[a], nodes[b]], axis=1)
    m, clamped = prediction_count(k_hat, len(pairs))
    predicted = np.zeros(len(pairs), dtype=bool)
    predicted[rank_pairs(scores)[:m]] = True
    report = AttackReport(attacker, nodes, pairs, np.asarray(scores, dtype=np.float64), predicted, float(k_hat), m, **extra)
    if clamped:
        report.warnings.append("k_hat_clamped: requested more predictions than pairs")
    return report


def _resolve_query_set(target_nodes, nodes: np.ndarray, query_nodes, features):
    """Return the query node list and, for each sorted target node, its row in the query.

    Without ``query_nodes`` the targets themselves, in the caller's order, are queried.
    """
    given = target_nodes if query_nodes is None else query_nodes
    q = np.asarray(given, dtype=np.int64).ravel()
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != len(q):
        raise ShapeError(f"need one feature row per query node ({len(q)}), got {x.shape}")
    pos = {int(v): k for k, v in enumerate(q)}
    missing = [int(v) for v in nodes if int(v) not in pos]
    if missing:
        raise ParameterError(f"target nodes not in the query set: {missing[:5]}")
    return q, x, np.array([pos[int(v)] for v in nodes], dtype=np.int64)


# --------------------------------------------------------------------------
# LinkTeller
# --------------------------------------------------------------------------


def influence_matrix(blackbox, query_nodes, features, v: int, delta: float = DEFAULT_DELTA) -> np.ndarray:
    """Finite-difference influence of node ``v`` on every queried node's logits.

    Issues exactly two blackbox queries: the original features, then the same
    features with ``v``'s row scaled by ``1 + delta``. Returns ``(P' - P) / delta``.
    """
    if not delta > 0:
        raise ParameterError(f"delta must be positive, got {delta}")
    q = np.asarray(query_nodes, dtype=np.int64).ravel()
    hits = np.flatnonzero(q == v)
    if len(hits) != 1:
        raise ParameterError(f"probe node {v} is not in the query set")
    x = np.asarray(features, dtype=np.float64)
    p = blackbox.query(q, x)
    x_scaled = x.copy()
    x_scaled[hits[0]] *= 1.0 + delta
    p_scaled = blackbox.query(q, x_scaled)
    return (p_scaled - p) / delta


@dataclass
class InfluenceTable:
    """``values[a, b]`` is the influence of ``nodes[a]`` on ``nodes[b]``: the l2 norm
    of row ``nodes[b]`` of the influence matrix probed at ``nodes[a]``.
    The diagonal is unused and held at 0."""

    nodes: np.ndarray
    values: np.ndarray
    delta: float

    def value(self, u: int, v: int) -> float:
        """Influence of probe ``v`` on node ``u``."""
        a = int(np.searchsorted(self.nodes, v))
        b = int(np.searchsorted(self.nodes, u))
        k = len(self.nodes)
        if a == b or a >= k or b >= k or self.nodes[a] != v or self.nodes[b] != u:
            raise KeyError((u, v))
        return float(self.values[a, b])

    def pair_scores(self) -> np.ndarray:
        """Symmetrized score ``max(i_uv, i_vu)`` per unordered pair, lexicographic order."""
        a, b = pair_positions(len(self.nodes))
        return np.maximum(self.values[a, b], self.values[b, a])


def influence_table(blackbox, target_nodes, features, delta: float = DEFAULT_DELTA, query_nodes=None) -> InfluenceTable:
    nodes = _canonical_nodes(target_nodes)
    q, x, rows = _resolve_query_set(target_nodes, nodes, query_nodes, features)
    k = len(nodes)
    values = np.zeros((k, k))
    for a, v in enumerate(nodes):
        infl = influence_matrix(blackbox, q, x, int(v), delta)
        values[a] = np.linalg.norm(infl[rows], axis=1)
        values[a, a] = 0.0
    return InfluenceTable(nodes, values, float(delta))


def linkteller_attack(
    blackbox,
    target_nodes,
    features,
    k_hat: float,
    delta: float = DEFAULT_DELTA,
    query_nodes=None,
    stratum: str | None = None,
    seed: int | None = None,
) -> AttackReport:
    """Predict the ``round(k_hat * C(n_c, 2))`` pairs with the largest influence as edges.

    ``features`` are aligned with ``query_nodes``; when ``query_nodes`` is None
    the targets themselves are queried, in the order given.
    """
    nodes = _canonical_nodes(target_nodes)
    if len(nodes) < 2:
        raise ParameterError("need at least two target nodes")
    table = influence_table(blackbox, target_nodes, features, delta, query_nodes)
    report = _threshold_report(
        "linkteller", nodes, table.pair_scores(), k_hat, delta=float(delta), stratum=stratum, seed=seed
    )
    report.notes["pair_score"] = "max(i_uv, i_vu)"
    return report


# --------------------------------------------------------------------------
# baselines
# --------------------------------------------------------------------------


def correlation_distances(rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Correlation distance for every row pair (lexicographic), and a mask of undefined pairs.

    Distances are rounded to 12 decimals so that mathematically equal values
    compare equal and fall through to the deterministic tie-break.
    """
    x = np.asarray(rows, dtype=np.float64)
    c = x - x.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(c, axis=1)
    flat = norms == 0
    safe = np.where(flat, 1.0, norms)
    u = c / safe[:, None]
    a, b = pair_positions(len(x))
    dist = 1.0 - np.einsum("ij,ij->i", u[a], u[b])
    dist = np.clip(np.round(dist, 12), 0.0, WORST_DISTANCE)
    undefined = flat[a] | flat[b]
    dist[undefined] = WORST_DISTANCE
    return dist, undefined


def lsa2_attack(
    blackbox,
    target_nodes,
    features,
    k_hat: float,
    variant: str = "post",
    query_nodes=None,
    stratum: str | None = None,
    seed: int | None = None,
) -> AttackReport:
    """LSA2 baseline: rank pairs by negated correlation distance.

    ``variant="post"`` compares softmax posteriors from a single blackbox query;
    ``variant="attr"`` compares raw feature rows and never queries.
    """
    if variant not in ("post", "attr"):
        raise ParameterError(f"unknown LSA2 variant {variant!r}")
    nodes = _canonical_nodes(target_nodes)
    if len(nodes) < 2:
        raise ParameterError("need at least two target nodes")
    q, x, rows = _resolve_query_set(target_nodes, nodes, query_nodes, features)
    if variant == "post":
        signal = softmax(blackbox.query(q, x))[rows]
    else:
        signal = x[rows]
    dist, undefined = correlation_distances(signal)
    report = _threshold_report(f"lsa2-{variant}", nodes, -dist, k_hat, stratum=stratum, seed=seed)
    if variant == "post":
        report.notes["posteriors"] = "softmax of returned logits"
    if undefined.any():
        report.notes["undefined_pairs"] = int(undefined.sum())
        report.warnings.append(f"zero_variance: {int(undefined.sum())} pairs scored as worst distance")
    return report


def random_attack(target_nodes, k_hat: float, seed: int, stratum: str | None = None) -> AttackReport:
    """Predict each pair independently with probability ``k_hat``.

    The score of a pair is ``-u`` for its uniform draw ``u``, so the predicted
    set is exactly the pairs scoring above ``-k_hat``.
    """
    if not 0.0 <= k_hat <= 1.0:
        raise ParameterError(f"k_hat must lie in [0, 1] for the random attack, got {k_hat}")
    nodes = _canonical_nodes(target_nodes)
    a, b = pair_positions(len(nodes))
    pairs = np.stack([nodes[a], nodes[b]], axis=1)
    u = make_rng(seed, "random_attack").random(len(pairs))
    predicted = u < k_hat
    return AttackReport(
        "random", nodes, pairs, -u, predicted, float(k_hat), int(predicted.sum()), stratum=stratum, seed=seed
    )


ATTACKERS = ("linkteller", "lsa2-post", "lsa2-attr", "random")


def run_attacker(name: str, blackbox, target_nodes, features, k_hat: float, delta: float = DEFAULT_DELTA,
                 query_nodes=None, stratum: str | None = None, seed: int = 0) -> AttackReport:
    """Dispatch by attacker name; ``random`` clamps ``k_hat`` to 1."""
    if name == "linkteller":
        return linkteller_attack(blackbox, target_nodes, features, k_hat, delta, query_nodes, stratum, seed)
    if name in ("lsa2-post", "lsa2-attr"):
        return lsa2_attack(blackbox, target_nodes, features, k_hat, name.split("-")[1], query_nodes, stratum, seed)
    if name == "random":
        report = random_attack(target_nodes, min(k_hat, 1.0), seed, stratum)
        if k_hat > 1.0:
            report.warnings.append("k_hat_clamped: random attack probability capped at 1")
        return report
    raise ParameterError(f"unknown attacker {name!r}; choose from {ATTACKERS}")
