"""Edge-DP input perturbation for GCNs and the attack-precision ceiling.

Both mechanisms randomize the adjacency matrix once; training and every
later inference are post-processing of that fixed perturbed graph, so
repeated queries spend no further budget.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParameterError, ResourceError
from .gcn import Blackbox, GcnModel, TrainConfig, train
from .graph import Dataset, SparseGraph, load_edgelist, normalize, save_edgelist
from .rng import laplace, make_rng

EDGERAND = "EdgeRand"
LAPGRAPH = "LapGraph"
MECHANISMS = (EDGERAND, LAPGRAPH)

CELL_CAP_ENV = "EDGELEAK_EDGERAND_MAX_CELLS"
DEFAULT_MAX_CELLS = 10_000_000
DEFAULT_MAX_DENSITY = 0.45
DEFAULT_COUNT_FRACTION = 0.01


@dataclass(frozen=True)
class DpBudget:
    epsilon: float
    mechanism: str = EDGERAND

    def __post_init__(self):
        if not (self.epsilon > 0):
            raise ParameterError(f"epsilon must be positive, got {self.epsilon}")
        if self.mechanism not in MECHANISMS:
            raise ParameterError(f"unknown mechanism {self.mechanism!r}; choose from {MECHANISMS}")


@dataclass(frozen=True, eq=False)
class PerturbedGraph:
    graph: SparseGraph
    mechanism: str
    epsilon: float
    seed: int
    params: dict = field(default_factory=dict)

    @property
    def token(self) -> str:
        """Digest identifying this exact perturbation (mechanism, budget, seed, output edges)."""
        h = hashlib.sha256()
        h.update(json.dumps(self.provenance(with_token=False), sort_keys=True).encode())
        h.update(self.graph.edges.tobytes())
        return h.hexdigest()[:16]

    def provenance(self, with_token: bool = True) -> dict:
        out = {
            "mechanism": self.mechanism,
            "epsilon": self.epsilon,
            "seed": self.seed,
            "n": self.graph.n,
            "m": self.graph.m,
            **self.params,
        }
        if with_token:
            out["token"] = self.token
        return out


def edgerand_s_from_eps(epsilon: float) -> float:
    """Smallest sampling rate ``s`` for which EdgeRand is epsilon-edge-DP: ``2 / (e^eps + 1)``."""
    if not epsilon > 0:
        raise ParameterError(f"epsilon must be positive, got {epsilon}")
    # exp overflows past ~709; s is 0 to double precision long before that
    s = 2.0 / (math.exp(epsilon) + 1.0) if epsilon < 700 else 0.0
    return min(max(s, 0.0), 1.0)


def edgerand_eps_from_s(s: float) -> float:
    if not 0.0 < s <= 1.0:
        raise ParameterError(f"s must lie in (0, 1], got {s}")
    return math.log(2.0 / s - 1.0)


def edgerand_expected_density(k: float, s: float) -> float:
    return (1.0 - s) * k + s / 2.0


def _max_cells(max_cells: int | None) -> int:
    if max_cells is not None:
        return int(max_cells)
    env = os.environ.get(CELL_CAP_ENV)
    return int(float(env)) if env else DEFAULT_MAX_CELLS


def edgerand(
    graph: SparseGraph,
    epsilon: float,
    seed: int,
    s: float | None = None,
    max_cells: int | None = None,
    max_density: float = DEFAULT_MAX_DENSITY,
) -> PerturbedGraph:
    """Randomized response over every upper-triangular cell.

    Each cell is kept with probability ``1 - s`` and otherwise replaced by a
    fair coin. Refuses (``ResourceError``) when the graph has more than
    ``max_cells`` cells and the expected output density exceeds ``max_density``.
    """
    s_min = edgerand_s_from_eps(epsilon)
    if s is None:
        s = s_min
    elif not (s_min <= s <= 1.0):
        raise ParameterError(f"s={s} does not give {epsilon}-edge-DP; need s >= {s_min}")
    cells = graph.num_cells
    expected = edgerand_expected_density(graph.density, s)
    cap = _max_cells(max_cells)
    if cells > cap and expected > max_density:
        raise ResourceError(
            f"EdgeRand at eps={epsilon} would produce density ~{expected:.3f} over {cells} cells "
            f"(cap: {cap} cells above density {max_density})"
        )
    rng = make_rng(seed, "edgerand")
    keep = rng.random(cells) >= s
    coin = rng.random(cells) < 0.5
    mask = np.where(keep, graph.cell_mask(), coin)
    out = SparseGraph.from_cell_mask(graph.n, mask)
    return PerturbedGraph(out, EDGERAND, float(epsilon), int(seed), {"s": float(s)})


def lapgraph(
    graph: SparseGraph,
    epsilon: float,
    seed: int,
    count_fraction: float = DEFAULT_COUNT_FRACTION,
) -> PerturbedGraph:
    """Laplace noise on every cell, then keep the ``T`` largest noisy cells.

    ``T`` is the edge count plus ``Lap(1 / eps1)`` with ``eps1 = count_fraction * eps``,
    rounded half-to-even and clamped to ``[0, cells]``. Cell noise is
    ``Lap(1 / eps2)`` with ``eps2 = eps - eps1``. Ties go to the lower cell index.
    """
    if not epsilon > 0:
        raise ParameterError(f"epsilon must be positive, got {epsilon}")
    if not 0.0 < count_fraction < 1.0:
        raise ParameterError(f"count_fraction must lie in (0, 1), got {count_fraction}")
    eps1 = count_fraction * epsilon
    eps2 = epsilon - eps1
    cells = graph.num_cells
    noisy_count = graph.m + float(laplace(make_rng(seed, "lapgraph", "count"), 1.0 / eps1))
    t = int(min(max(np.rint(noisy_count), 0), cells))
    noisy = graph.cell_mask().astype(np.float64)
    noisy += laplace(make_rng(seed, "lapgraph", "cells"), 1.0 / eps2, cells)
    order = np.lexsort((np.arange(cells), -noisy))
    mask = np.zeros(cells, dtype=bool)
    mask[order[:t]] = True
    out = SparseGraph.from_cell_mask(graph.n, mask)
    params = {"eps1": eps1, "eps2": eps2, "T": t, "noisy_count": noisy_count}
    return PerturbedGraph(out, LAPGRAPH, float(epsilon), int(seed), params)


def perturb(
    graph: SparseGraph,
    budget: DpBudget,
    seed: int,
    max_cells: int | None = None,
    max_density: float = DEFAULT_MAX_DENSITY,
    count_fraction: float = DEFAULT_COUNT_FRACTION,
) -> PerturbedGraph:
    """Apply ``budget.mechanism``; options not used by that mechanism are ignored."""
    if budget.mechanism == EDGERAND:
        return edgerand(graph, budget.epsilon, seed, max_cells=max_cells, max_density=max_density)
    return lapgraph(graph, budget.epsilon, seed, count_fraction=count_fraction)


def precision_bound(epsilon: float, k_c: float) -> float:
    """Ceiling ``min(1, e^eps * k_c)`` on any attack's precision against an eps-edge-DP GCN."""
    if epsilon < 0 or k_c < 0:
        raise ParameterError("epsilon and density must be non-negative")
    if k_c == 0:
        return 0.0
    if epsilon > 700:  # exp overflow; the bound is saturated long before
        return 1.0
    return min(1.0, math.exp(epsilon) * k_c)


# --------------------------------------------------------------------------
# perturb -> train -> infer
# --------------------------------------------------------------------------


@dataclass(eq=False)
class DpPipeline:
    """Trained model plus the blackbox that serves it over the perturbed inference graph."""

    model: GcnModel
    train_graph: PerturbedGraph
    infer_graph: PerturbedGraph
    blackbox: Blackbox
    transductive: bool


def dp_train_and_infer(
    dataset: Dataset,
    budget: DpBudget,
    train_config: TrainConfig,
    seed: int,
    infer_dataset: Dataset | None = None,
    **perturb_options,
) -> DpPipeline:
    """Perturb, train on the perturbed training graph, serve inference on a perturbed graph.

    Transductive when ``infer_dataset`` is None or the same object: the single
    perturbed graph serves both steps. Otherwise the inference graph is
    perturbed separately; the two graphs share no edges, so the budget is not
    split between them.
    """
    train_pg = perturb(dataset.graph, budget, seed, **perturb_options)
    model = train(dataset.with_graph(train_pg.graph), normalize(train_pg.graph, train_config.norm_kind), train_config)
    transductive = infer_dataset is None or infer_dataset is dataset
    if transductive:
        infer_pg = train_pg
    else:
        infer_pg = perturb(infer_dataset.graph, budget, _inference_seed(seed), **perturb_options)
    bb = Blackbox(model, infer_pg.graph, provenance=infer_pg.token)
    return DpPipeline(model, train_pg, infer_pg, bb, transductive)


def _inference_seed(seed: int) -> int:
    return int(make_rng(seed, "inference_graph").integers(0, 2**31 - 1))


# --------------------------------------------------------------------------
# files
# --------------------------------------------------------------------------


def save_perturbed(pg: PerturbedGraph, path) -> Path:
    """Write the edge list to ``path`` and provenance to ``<path>.provenance.json``."""
    path = Path(path)
    save_edgelist(pg.graph, path)
    sidecar = path.with_name(path.name + ".provenance.json")
    sidecar.write_text(json.dumps(pg.provenance(), indent=2, sort_keys=True) + "\n")
    return sidecar


def load_perturbed(path) -> PerturbedGraph:
    path = Path(path)
    graph = load_edgelist(path)
    prov = json.loads(path.with_name(path.name + ".provenance.json").read_text())
    params = {k: v for k, v in prov.items() if k not in ("mechanism", "epsilon", "seed", "n", "m", "token")}
    return PerturbedGraph(graph, prov["mechanism"], prov["epsilon"], prov["seed"], params)
