"""Graph data model, synthetic generators, degree sampling and normalization.

A :class:`SparseGraph` is the private object under attack: an undirected,
unweighted, loop-free graph on ``n`` nodes stored as sorted ``(i, j)`` pairs
with ``i < j``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import FormatError, ParameterError, SamplingError
from .rng import make_rng


def upper_cells(n: int) -> tuple[np.ndarray, np.ndarray]:
    """All unordered cells ``(i, j)``, ``i < j``, in lexicographic order."""
    if n <= 1024:
        return _small_upper_cells(n)
    return np.triu_indices(n, k=1)


@lru_cache(maxsize=16)
def _small_upper_cells(n: int) -> tuple[np.ndarray, np.ndarray]:
    rows, cols = np.triu_indices(n, k=1)
    rows.flags.writeable = False
    cols.flags.writeable = False
    return rows, cols


def cell_index(i: np.ndarray, j: np.ndarray, n: int) -> np.ndarray:
    """Position of cell ``(i, j)`` (``i < j``) in :func:`upper_cells` order."""
    i = np.asarray(i, dtype=np.int64)
    j = np.asarray(j, dtype=np.int64)
    return i * n - i * (i + 1) // 2 + (j - i - 1)


@dataclass(frozen=True, eq=False)
class SparseGraph:
    """Undirected simple graph; ``edges`` is an ``(m, 2)`` array, rows sorted, ``i < j``.

    Instances are immutable. Use :meth:`from_edges` to build one from
    arbitrary (unsorted, either-orientation) pairs.
    """

    n: int
    edges: np.ndarray

    def __post_init__(self):
        if int(self.n) < 1:
            raise ParameterError(f"node count must be positive, got {self.n}")
        e = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if len(e):
            if e.min() < 0 or e.max() >= self.n:
                raise ParameterError("edge endpoint out of range")
            if np.any(e[:, 0] >= e[:, 1]):
                raise ParameterError("edges must satisfy i < j (no self-loops)")
            keys = e[:, 0] * self.n + e[:, 1]
            if np.any(np.diff(keys) <= 0):
                raise ParameterError("edges must be sorted and free of duplicates")
        e = e.copy()
        e.flags.writeable = False
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "edges", e)

    @classmethod
    def from_edges(cls, n: int, pairs: Iterable[Sequence[int]]) -> "SparseGraph":
        """Canonicalize pairs: orient ``i < j``, sort, drop duplicates. Self-loops are rejected."""
        e = np.asarray(list(pairs) if not isinstance(pairs, np.ndarray) else pairs, dtype=np.int64)
        e = e.reshape(-1, 2)
        if np.any(e[:, 0] == e[:, 1]):
            raise ParameterError("self-loops are not allowed")
        e = np.sort(e, axis=1)
        e = np.unique(e, axis=0)
        return cls(n, e)

    @classmethod
    def from_cell_mask(cls, n: int, mask: np.ndarray) -> "SparseGraph":
        """Build from a boolean vector over :func:`upper_cells` order."""
        rows, cols = upper_cells(n)
        mask = np.asarray(mask, dtype=bool)
        return cls(n, np.stack([rows[mask], cols[mask]], axis=1))

    @classmethod
    def empty(cls, n: int) -> "SparseGraph":
        return cls(n, np.empty((0, 2), dtype=np.int64))

    @classmethod
    def complete(cls, n: int) -> "SparseGraph":
        return cls.from_cell_mask(n, np.ones(n * (n - 1) // 2, dtype=bool))

    @property
    def m(self) -> int:
        return len(self.edges)

    @property
    def num_cells(self) -> int:
        return self.n * (self.n - 1) // 2

    @property
    def density(self) -> float:
        return self.m / self.num_cells if self.num_cells else 0.0

    @cached_property
    def _csr(self) -> sp.csr_matrix:
        e = self.edges
        data = np.ones(2 * len(e))
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        a = sp.csr_matrix((data, (rows, cols)), shape=(self.n, self.n))
        a.sort_indices()
        return a

    def adjacency(self) -> sp.csr_matrix:
        """Symmetric 0/1 adjacency as a fresh CSR matrix."""
        return self._csr.copy()

    @cached_property
    def degrees(self) -> np.ndarray:
        d = np.bincount(self.edges.ravel(), minlength=self.n).astype(np.int64)
        d.flags.writeable = False
        return d

    def neighbors(self, v: int) -> np.ndarray:
        a = self._csr
        return a.indices[a.indptr[v] : a.indptr[v + 1]]

    def has_edge(self, u: int, v: int) -> bool:
        if u == v:
            return False
        return bool(np.any(self.neighbors(u) == v))

    def cell_mask(self) -> np.ndarray:
        """Boolean vector over :func:`upper_cells` order, True where an edge exists."""
        mask = np.zeros(self.num_cells, dtype=bool)
        if self.m:
            mask[cell_index(self.edges[:, 0], self.edges[:, 1], self.n)] = True
        return mask

    def edge_set(self) -> set[tuple[int, int]]:
        return {(int(i), int(j)) for i, j in self.edges}

    def subgraph(self, nodes: Sequence[int]) -> "SparseGraph":
        """Induced subgraph, relabelled so ``nodes[k]`` becomes node ``k``."""
        nodes = np.asarray(nodes, dtype=np.int64)
        pos = np.full(self.n, -1, dtype=np.int64)
        pos[nodes] = np.arange(len(nodes))
        if len(self.edges) == 0:
            return SparseGraph.empty(len(nodes))
        pi = pos[self.edges[:, 0]]
        pj = pos[self.edges[:, 1]]
        keep = (pi >= 0) & (pj >= 0)
        return SparseGraph.from_edges(len(nodes), np.stack([pi[keep], pj[keep]], axis=1))

    def __eq__(self, other) -> bool:
        if not isinstance(other, SparseGraph):
            return NotImplemented
        return self.n == other.n and np.array_equal(self.edges, other.edges)

    def __hash__(self):
        return hash((self.n, self.edges.tobytes()))

    def __repr__(self) -> str:
        return f"SparseGraph(n={self.n}, m={self.m})"


# --------------------------------------------------------------------------
# generators
# --------------------------------------------------------------------------


def generate_er(n: int, k: float, seed: int) -> SparseGraph:
    """Erdős–Rényi G(n, k): each unordered pair present independently w.p. ``k``."""
    if n < 2:
        raise ParameterError(f"need n >= 2, got {n}")
    if not 0.0 <= k <= 1.0:
        raise ParameterError(f"density must lie in [0, 1], got {k}")
    rng = make_rng(seed, "generate_er")
    mask = rng.random(n * (n - 1) // 2) < k
    return SparseGraph.from_cell_mask(n, mask)


def generate_sbm(
    block_sizes: Sequence[int], p_in: float, p_out: float, seed: int
) -> tuple[SparseGraph, np.ndarray]:
    """Stochastic block model. Returns the graph and the block index of every node."""
    if len(block_sizes) == 0:
        raise ParameterError("block_sizes must not be empty")
    if any(int(b) < 1 for b in block_sizes):
        raise ParameterError(f"block sizes must be positive, got {list(block_sizes)}")
    if not (0.0 <= p_out <= p_in <= 1.0):
        raise ParameterError(f"need 0 <= p_out <= p_in <= 1, got p_in={p_in}, p_out={p_out}")
    blocks = np.repeat(np.arange(len(block_sizes)), block_sizes)
    n = len(blocks)
    if n == 1:
        return SparseGraph.empty(1), blocks
    rows, cols = upper_cells(n)
    p = np.where(blocks[rows] == blocks[cols], p_in, p_out)
    rng = make_rng(seed, "generate_sbm")
    mask = rng.random(len(p)) < p
    return SparseGraph.from_cell_mask(n, mask), blocks


# --------------------------------------------------------------------------
# normalization
# --------------------------------------------------------------------------


class NormKind(str, enum.Enum):
    FIRST_ORDER_GCN = "FirstOrderGCN"
    AUG_NORM_ADJ = "AugNormAdj"
    BINGGE_NORM_ADJ = "BingGeNormAdj"
    AUG_RWALK = "AugRWalk"

    @classmethod
    def parse(cls, value) -> "NormKind":
        if isinstance(value, cls):
            return value
        for kind in cls:
            if value in (kind.value, kind.name):
                return kind
        raise ParameterError(f"unknown normalization kind {value!r}")


@dataclass(frozen=True, eq=False)
class NormalizedAdjacency:
    n: int
    matrix: sp.csr_matrix
    kind: NormKind

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()


def normalize(graph: SparseGraph, kind: NormKind | str) -> NormalizedAdjacency:
    """Normalized propagation matrix used by the GCN layers.

    ``D`` below is the degree diagonal of ``A``::

        FirstOrderGCN   I + D^-1/2 A D^-1/2        (degree-0 entries of D^-1/2 are 0)
        AugNormAdj      (D+I)^-1/2 (A+I) (D+I)^-1/2
        BingGeNormAdj   I + (D+I)^-1/2 (A+I) (D+I)^-1/2
        AugRWalk        (D+I)^-1 (A+I)
    """
    kind = NormKind.parse(kind)
    n = graph.n
    a = graph.adjacency()
    deg = graph.degrees.astype(np.float64)
    eye = sp.identity(n, format="csr", dtype=np.float64)

    if kind is NormKind.FIRST_ORDER_GCN:
        inv_sqrt = np.zeros(n)
        nz = deg > 0
        inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
        s = sp.diags(inv_sqrt)
        out = eye + s @ a @ s
    elif kind is NormKind.AUG_RWALK:
        out = sp.diags(1.0 / (deg + 1.0)) @ (a + eye)
    else:
        s = sp.diags(1.0 / np.sqrt(deg + 1.0))
        out = s @ (a + eye) @ s
        if kind is NormKind.BINGGE_NORM_ADJ:
            out = eye + out
    out = sp.csr_matrix(out)
    out.sort_indices()
    return NormalizedAdjacency(n, out, kind)


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Dataset:
    graph: SparseGraph
    features: np.ndarray
    labels: np.ndarray
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    num_classes: int

    def __post_init__(self):
        n = self.graph.n
        x = np.ascontiguousarray(self.features, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] != n:
            raise ParameterError(f"feature matrix must have {n} rows, got shape {x.shape}")
        y = np.asarray(self.labels, dtype=np.int64)
        if y.shape != (n,):
            raise ParameterError(f"need {n} labels, got {y.shape}")
        if len(y) and (y.min() < 0 or y.max() >= self.num_classes):
            raise ParameterError("labels must lie in [0, num_classes)")
        splits = [np.asarray(s, dtype=np.int64) for s in (self.train, self.val, self.test)]
        allidx = np.concatenate(splits)
        if len(allidx) and (allidx.min() < 0 or allidx.max() >= n):
            raise ParameterError("split index out of range")
        if len(np.unique(allidx)) != len(allidx):
            raise ParameterError("train/val/test splits must be disjoint")
        for arr in (x, y, *splits):
            arr.flags.writeable = False
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "train", splits[0])
        object.__setattr__(self, "val", splits[1])
        object.__setattr__(self, "test", splits[2])
        object.__setattr__(self, "num_classes", int(self.num_classes))

    @property
    def n(self) -> int:
        return self.graph.n

    def with_graph(self, graph: SparseGraph) -> "Dataset":
        if graph.n != self.graph.n:
            raise ParameterError("replacement graph must keep the node count")
        return Dataset(graph, self.features, self.labels, self.train, self.val, self.test, self.num_classes)


def random_splits(n: int, fractions: Sequence[float], seed: int):
    """Random disjoint (train, val, test) index arrays, each sorted."""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or sum(fractions) > 1 + 1e-12:
        raise ParameterError(f"bad split fractions {fractions}")
    perm = make_rng(seed, "splits").permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_test = min(n - n_train - n_val, int(round(fractions[2] * n)))
    cuts = np.cumsum([n_train, n_val, n_test])
    return (
        np.sort(perm[: cuts[0]]),
        np.sort(perm[cuts[0] : cuts[1]]),
        np.sort(perm[cuts[1] : cuts[2]]),
    )


def make_sbm_dataset(
    block_sizes: Sequence[int],
    p_in: float,
    p_out: float,
    seed: int,
    feature_dim: int = 16,
    feature_signal: float = 1.0,
    splits: Sequence[float] = (0.3, 0.2, 0.5),
    centroid_seed: int | None = None,
) -> Dataset:
    """SBM graph with block labels and Gaussian features around per-class centroids.

    Centroids are random directions of length ``feature_signal``; node features
    add standard normal noise, so features alone are only weakly informative
    and neighbourhood aggregation is what makes the task learnable. Graphs that
    should share one feature model (train and inference graphs of an inductive
    setup) must share ``centroid_seed``; it defaults to ``seed``.
    """
    graph, labels = generate_sbm(block_sizes, p_in, p_out, seed)
    c = len(block_sizes)
    crng = make_rng(seed if centroid_seed is None else centroid_seed, "centroids")
    centroids = crng.standard_normal((c, feature_dim))
    centroids *= feature_signal / np.linalg.norm(centroids, axis=1, keepdims=True)
    rng = make_rng(seed, "features")
    x = centroids[labels] + rng.standard_normal((graph.n, feature_dim))
    tr, va, te = random_splits(graph.n, splits, seed)
    return Dataset(graph, x, labels, tr, va, te, c)


def make_er_dataset(
    n: int,
    k: float,
    seed: int,
    num_classes: int = 2,
    feature_dim: int = 16,
    feature_signal: float = 1.0,
    splits: Sequence[float] = (0.3, 0.2, 0.5),
) -> Dataset:
    """ER graph with uniformly random labels and centroid-plus-noise features.

    Labels are independent of the graph, so this is a structure-only stand-in
    for attack experiments rather than a learnable node-classification task.
    """
    graph = generate_er(n, k, seed)
    rng = make_rng(seed, "features")
    labels = rng.integers(0, num_classes, size=n)
    centroids = rng.standard_normal((num_classes, feature_dim))
    centroids *= feature_signal / np.linalg.norm(centroids, axis=1, keepdims=True)
    x = centroids[labels] + rng.standard_normal((n, feature_dim))
    tr, va, te = random_splits(n, splits, seed)
    return Dataset(graph, x, labels, tr, va, te, num_classes)


# --------------------------------------------------------------------------
# degree-stratified sampling
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Stratum:
    """Degree constraint for target-node sampling: ``low`` keeps deg <= threshold, ``high`` keeps deg >= threshold."""

    kind: str
    threshold: int | None = None

    def __post_init__(self):
        if self.kind not in ("low", "unconstrained", "high"):
            raise ParameterError(f"unknown stratum kind {self.kind!r}")
        if self.kind != "unconstrained" and self.threshold is None:
            raise ParameterError(f"stratum {self.kind!r} needs a degree threshold")

    def eligible(self, degrees: np.ndarray) -> np.ndarray:
        if self.kind == "low":
            return degrees <= self.threshold
        if self.kind == "high":
            return degrees >= self.threshold
        return np.ones(len(degrees), dtype=bool)

    def __str__(self) -> str:
        if self.kind == "unconstrained":
            return "unconstrained"
        return f"{self.kind}({self.threshold})"


def degree_stratified_sample(
    graph: SparseGraph,
    stratum: Stratum,
    count: int,
    seed: int,
    pool: Sequence[int] | None = None,
) -> np.ndarray:
    """Uniform sample without replacement of ``count`` nodes satisfying ``stratum``.

    ``pool`` restricts the candidates (e.g. to a test split). Returns sorted ids.
    """
    candidates = np.arange(graph.n) if pool is None else np.unique(np.asarray(pool, dtype=np.int64))
    candidates = candidates[stratum.eligible(graph.degrees[candidates])]
    if len(candidates) < count:
        raise SamplingError(
            f"stratum {stratum} has {len(candidates)} eligible nodes, need {count}"
        )
    rng = make_rng(seed, "stratified_sample", str(stratum))
    return np.sort(rng.choice(candidates, size=count, replace=False))


def auto_thresholds(graph: SparseGraph, count: int, pool: Sequence[int] | None = None) -> tuple[int, int]:
    """Pick (d_low, d_high) so each of the low/high strata has at least ``count`` eligible nodes."""
    nodes = np.arange(graph.n) if pool is None else np.asarray(pool, dtype=np.int64)
    deg = np.sort(graph.degrees[nodes])
    if len(deg) < count or count < 1:
        raise SamplingError(f"pool of {len(deg)} nodes cannot supply {count} per stratum")
    return int(deg[count - 1]), int(deg[len(deg) - count])


def round_msd(x: float) -> float:
    """Round to one significant digit, e.g. 5.61e-5 -> 6e-5."""
    if x == 0 or not np.isfinite(x):
        return float(x)
    return float(f"{x:.0e}")


# --------------------------------------------------------------------------
# file formats
# --------------------------------------------------------------------------


def save_edgelist(graph: SparseGraph, path) -> None:
    lines = [f"{graph.n} {graph.m}"]
    lines.extend(f"{i} {j}" for i, j in graph.edges)
    Path(path).write_text("\n".join(lines) + "\n")


def load_edgelist(path) -> SparseGraph:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise FormatError("empty edge-list file", path)
    try:
        n, m = (int(t) for t in lines[0].split())
    except ValueError:
        raise FormatError("header must be 'n m'", path, 1) from None
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != m:
        raise FormatError(f"header declares {m} edges, found {len(body)}", path, 1)
    edges = np.empty((m, 2), dtype=np.int64)
    seen = set()
    for k, ln in enumerate(body):
        lineno = k + 2
        parts = ln.split()
        if len(parts) != 2:
            raise FormatError("edge line must be 'i j'", path, lineno)
        try:
            i, j = int(parts[0]), int(parts[1])
        except ValueError:
            raise FormatError(f"non-integer endpoint in {ln!r}", path, lineno) from None
        if not (0 <= i < j < n):
            raise FormatError(f"edge ({i}, {j}) violates 0 <= i < j < {n}", path, lineno)
        if (i, j) in seen:
            raise FormatError(f"duplicate edge ({i}, {j})", path, lineno)
        seen.add((i, j))
        edges[k] = (i, j)
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    return SparseGraph(n, edges[order])


def save_dataset(ds: Dataset, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_edgelist(ds.graph, d / "graph.txt")
    np.savetxt(d / "features.csv", ds.features, delimiter=",", fmt="%.17g")
    (d / "labels.txt").write_text("".join(f"{int(y)}\n" for y in ds.labels))
    split_lines = [" ".join(str(int(v)) for v in s) for s in (ds.train, ds.val, ds.test)]
    (d / "splits.txt").write_text("\n".join(split_lines) + "\n")


def load_dataset(directory, num_classes: int | None = None) -> Dataset:
    d = Path(directory)
    graph = load_edgelist(d / "graph.txt")
    try:
        x = np.loadtxt(d / "features.csv", delimiter=",", ndmin=2, dtype=np.float64)
    except ValueError as exc:
        raise FormatError(str(exc), d / "features.csv") from None
    labels = []
    for k, ln in enumerate((d / "labels.txt").read_text().splitlines()):
        if not ln.strip():
            continue
        try:
            labels.append(int(ln))
        except ValueError:
            raise FormatError(f"label must be an integer, got {ln!r}", d / "labels.txt", k + 1) from None
    split_lines = (d / "splits.txt").read_text().split("\n")
    if len(split_lines) < 3:
        raise FormatError("need three split lines (train, val, test)", d / "splits.txt")
    splits = []
    for k in range(3):
        try:
            splits.append(np.array([int(t) for t in split_lines[k].split()], dtype=np.int64))
        except ValueError:
            raise FormatError("split lines hold space-separated node ids", d / "splits.txt", k + 1) from None
    labels = np.asarray(labels, dtype=np.int64)
    c = num_classes if num_classes is not None else (int(labels.max()) + 1 if len(labels) else 1)
    if x.shape[0] != graph.n:
        raise FormatError(f"{x.shape[0]} feature rows for {graph.n} nodes", d / "features.csv")
    if len(labels) != graph.n:
        raise FormatError(f"{len(labels)} labels for {graph.n} nodes", d / "labels.txt")
    return Dataset(graph, x, labels, *splits, num_classes=c)
