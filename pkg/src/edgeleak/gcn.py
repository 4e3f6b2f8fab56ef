"""Dense-weight GCN over a sparse normalized adjacency.

Layer ``l`` computes ``H_{l+1} = relu(A_hat (drop(H_l) W_l))``; the last layer
has no activation and its output is returned as raw logits.  Training is
full-batch softmax cross-entropy on the train split with hand-written
backpropagation.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, ParameterError, QueryError, ShapeError, TrainingError
from .graph import Dataset, NormalizedAdjacency, NormKind, SparseGraph, normalize
from .rng import make_rng


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)


@dataclass(frozen=True, eq=False)
class GcnModel:
    weights: tuple[np.ndarray, ...]
    norm_kind: NormKind = NormKind.FIRST_ORDER_GCN
    dropout: float = 0.0
    history: TrainHistory | None = None

    def __post_init__(self):
        ws = tuple(np.array(w, dtype=np.float64, order="C") for w in self.weights)
        if not ws:
            raise ShapeError("a GCN needs at least one layer")
        for a, b in zip(ws, ws[1:]):
            if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
                raise ShapeError(f"weight shapes do not chain: {a.shape} -> {b.shape}")
        if ws[0].ndim != 2:
            raise ShapeError("weights must be matrices")
        if not 0.0 <= self.dropout < 1.0:
            raise ParameterError(f"dropout must lie in [0, 1), got {self.dropout}")
        for w in ws:
            w.flags.writeable = False
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "norm_kind", NormKind.parse(self.norm_kind))

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def num_parameters(self) -> int:
        return sum(w.size for w in self.weights)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 200
    dropout: float = 0.5
    hidden_dims: tuple[int, ...] = (64,)
    norm_kind: NormKind = NormKind.FIRST_ORDER_GCN
    seed: int = 0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1:
            raise ParameterError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ParameterError("learning_rate must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ParameterError(f"unknown optimizer {self.optimizer!r}")
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        object.__setattr__(self, "norm_kind", NormKind.parse(self.norm_kind))


def glorot_init(dims: Sequence[int], seed: int) -> tuple[np.ndarray, ...]:
    rng = make_rng(seed, "glorot")
    out = []
    for fan_in, fan_out in zip(dims, dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        out.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
    return tuple(out)


def init_model(
    in_dim: int,
    num_classes: int,
    hidden_dims: Sequence[int] = (64,),
    norm_kind: NormKind | str = NormKind.FIRST_ORDER_GCN,
    dropout: float = 0.0,
    seed: int = 0,
) -> GcnModel:
    dims = [in_dim, *hidden_dims, num_classes]
    return GcnModel(glorot_init(dims, seed), NormKind.parse(norm_kind), dropout)


def dropout_masks(model: GcnModel, n: int, seed: int) -> list[np.ndarray | None]:
    """Inverted-dropout masks for every layer input (``None`` when dropout is 0)."""
    p = model.dropout
    if p == 0.0:
        return [None] * model.num_layers
    rng = make_rng(seed, "dropout")
    return [(rng.random((n, w.shape[0])) >= p) / (1.0 - p) for w in model.weights]


def forward(
    model: GcnModel,
    adjacency: NormalizedAdjacency,
    features: np.ndarray,
    train_mode: bool = False,
    dropout_seed: int = 0,
    masks: Sequence[np.ndarray | None] | None = None,
    return_cache: bool = False,
):
    """Logits for every node of ``adjacency``.

    In train mode dropout masks come from ``masks`` if given, otherwise from
    ``dropout_seed``. With ``return_cache`` the per-layer (input, pre-activation)
    pairs needed by :func:`backward` are returned as a second value.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != adjacency.n:
        raise ShapeError(f"features must be ({adjacency.n}, d), got {x.shape}")
    if x.shape[1] != model.weights[0].shape[0]:
        raise ShapeError(
            f"feature width {x.shape[1]} does not match input dim {model.weights[0].shape[0]}"
        )
    if train_mode and masks is None:
        masks = dropout_masks(model, adjacency.n, dropout_seed)
    a = adjacency.matrix
    h = x
    cache = []
    last = model.num_layers - 1
    for l, w in enumerate(model.weights):
        if train_mode and masks[l] is not None:
            h = h * masks[l]
        z = a @ (h @ w)
        cache.append((h, z))
        h = np.maximum(z, 0.0) if l < last else z
    if return_cache:
        return h, cache
    return h


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean softmax cross-entropy of ``logits`` rows against integer ``labels``."""
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    return float(np.mean(logsum - z[np.arange(len(labels)), labels]))


def backward(
    model: GcnModel,
    adjacency: NormalizedAdjacency,
    cache,
    logits: np.ndarray,
    labels: np.ndarray,
    idx: np.ndarray,
    masks: Sequence[np.ndarray | None] | None = None,
) -> list[np.ndarray]:
    """Gradients of the mean cross-entropy over rows ``idx`` w.r.t. every weight."""
    at = adjacency.matrix.T.tocsr()
    dz = np.zeros_like(logits)
    p = softmax(logits[idx])
    p[np.arange(len(idx)), labels[idx]] -= 1.0
    dz[idx] = p / len(idx)
    grads = [None] * model.num_layers
    for l in range(model.num_layers - 1, -1, -1):
        h_in, _ = cache[l]
        dm = at @ dz
        grads[l] = h_in.T @ dm
        if l == 0:
            break
        dh = dm @ model.weights[l].T
        if masks is not None and masks[l] is not None:
            dh = dh * masks[l]
        dz = dh * (cache[l - 1][1] > 0)
    return grads


def loss_and_grads(model, adjacency, features, labels, idx, masks=None):
    train_mode = masks is not None
    logits, cache = forward(model, adjacency, features, train_mode=train_mode, masks=masks, return_cache=True)
    loss = cross_entropy(logits[idx], labels[idx])
    return loss, backward(model, adjacency, cache, logits, labels, idx, masks)


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def train(dataset: Dataset, adjacency: NormalizedAdjacency, config: TrainConfig) -> GcnModel:
    """Full-batch training; the returned model carries a :class:`TrainHistory`."""
    if len(dataset.train) == 0:
        raise ParameterError("train split is empty")
    if adjacency.n != dataset.n:
        raise ShapeError("adjacency and dataset disagree on node count")
    model = init_model(
        dataset.features.shape[1],
        dataset.num_classes,
        config.hidden_dims,
        config.norm_kind,
        config.dropout,
        config.seed,
    )
    weights = [w.copy() for w in model.weights]
    m1 = [np.zeros_like(w) for w in weights]
    m2 = [np.zeros_like(w) for w in weights]
    history = TrainHistory()
    x, y, idx = dataset.features, dataset.labels, dataset.train
    lr = config.learning_rate
    for epoch in range(1, config.epochs + 1):
        current = GcnModel(weights, config.norm_kind, config.dropout)
        masks = dropout_masks(current, dataset.n, config.seed * 1_000_003 + epoch) if config.dropout > 0 else None
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grads = loss_and_grads(current, adjacency, x, y, idx, masks)
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
            raise TrainingError(f"non-finite loss at epoch {epoch}", epoch=epoch)
        if config.optimizer == "sgd":
            weights = [w - lr * g for w, g in zip(weights, grads)]
        else:
            b1, b2 = config.beta1, config.beta2
            new = []
            for w, g, a, b in zip(weights, grads, m1, m2):
                a *= b1
                a += (1 - b1) * g
                b *= b2
                b += (1 - b2) * g * g
                a_hat = a / (1 - b1**epoch)
                b_hat = b / (1 - b2**epoch)
                new.append(w - lr * a_hat / (np.sqrt(b_hat) + config.adam_eps))
            weights = new
        history.train_loss.append(loss)
        if len(dataset.val):
            logits = forward(GcnModel(weights, config.norm_kind, 0.0), adjacency, x)
            history.val_accuracy.append(accuracy(logits[dataset.val], y[dataset.val]))
    return GcnModel(weights, config.norm_kind, config.dropout, history)


def grad_check(
    model: GcnModel,
    adjacency: NormalizedAdjacency,
    dataset: Dataset,
    epsilon: float = 1e-5,
    masks: Sequence[np.ndarray | None] | None = None,
    idx: np.ndarray | None = None,
) -> float:
    """Max over all parameters of ``|g_fd - g_an| / max(1, |g_fd|)``.

    ``g_fd`` is the central finite difference of the training loss. Pass
    ``masks`` to check with a fixed dropout mask; omit for eval mode.
    """
    if idx is None:
        idx = dataset.train if len(dataset.train) else np.arange(dataset.n)
    x, y = dataset.features, dataset.labels
    _, analytic = loss_and_grads(model, adjacency, x, y, idx, masks)
    worst = 0.0
    base = [w.copy() for w in model.weights]
    for l, w in enumerate(base):
        for pos in np.ndindex(w.shape):
            vals = []
            for sign in (1.0, -1.0):
                ws = [b.copy() for b in base]
                ws[l][pos] += sign * epsilon
                probe = GcnModel(ws, model.norm_kind, model.dropout)
                logits = forward(probe, adjacency, x, train_mode=masks is not None, masks=masks)
                vals.append(cross_entropy(logits[idx], y[idx]))
            g_fd = (vals[0] - vals[1]) / (2 * epsilon)
            err = abs(g_fd - analytic[l][pos]) / max(1.0, abs(g_fd))
            worst = max(worst, err)
    return worst


# --------------------------------------------------------------------------
# inference boundary
# --------------------------------------------------------------------------


def blackbox_query(
    model: GcnModel,
    private_graph: SparseGraph,
    query_nodes: Sequence[int],
    query_features: np.ndarray,
) -> np.ndarray:
    """Logits for ``query_nodes`` computed on their induced subgraph.

    Rows come back in query order. Internally the nodes are processed in
    sorted order, so permuting the query permutes the output rows exactly.
    """
    return Blackbox(model, private_graph).query(query_nodes, query_features)


def _check_query(graph: SparseGraph, nodes: np.ndarray, feats: np.ndarray) -> None:
    if len(nodes) == 0:
        raise QueryError("empty query")
    if nodes.min() < 0 or nodes.max() >= graph.n:
        raise QueryError(f"query node out of range [0, {graph.n})")
    if len(np.unique(nodes)) != len(nodes):
        raise QueryError("query nodes must be distinct")
    if feats.ndim != 2 or feats.shape[0] != len(nodes):
        raise ShapeError(f"need one feature row per query node, got {feats.shape} for {len(nodes)} nodes")


class Blackbox:
    """Query-only inference API over a private graph.

    Holds the model and the graph it serves; attackers interact only through
    :meth:`query`. ``num_queries`` counts calls. ``provenance`` is an opaque
    tag describing the graph the blackbox serves (set by the DP pipeline).
    """

    def __init__(self, model: GcnModel, private_graph: SparseGraph, provenance=None):
        self._model = model
        self._graph = private_graph
        self._cached_key = None
        self._cached_adj = None
        self.provenance = provenance
        self.num_queries = 0

    @property
    def n(self) -> int:
        return self._graph.n

    def query(self, query_nodes: Sequence[int], query_features: np.ndarray) -> np.ndarray:
        self.num_queries += 1
        nodes = np.asarray(query_nodes, dtype=np.int64).ravel()
        feats = np.asarray(query_features, dtype=np.float64)
        _check_query(self._graph, nodes, feats)
        order = np.argsort(nodes, kind="stable")
        key = nodes[order].tobytes()
        # LinkTeller re-queries one node set 2|V_C| times; normalize it once
        if key != self._cached_key:
            self._cached_adj = normalize(self._graph.subgraph(nodes[order]), self._model.norm_kind)
            self._cached_key = key
        logits = forward(self._model, self._cached_adj, feats[order])
        out = np.empty_like(logits)
        out[order] = logits
        return out

    __call__ = query


class CountingBlackbox:
    """Wraps any blackbox and records every query's node list."""

    def __init__(self, inner):
        self.inner = inner
        self.calls: list[np.ndarray] = []

    @property
    def num_queries(self) -> int:
        return len(self.calls)

    def query(self, query_nodes, query_features):
        self.calls.append(np.asarray(query_nodes).copy())
        return self.inner.query(query_nodes, query_features)

    __call__ = query


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------

_MAGIC = b"EDGELEAK-GCN\n"


def save_model(model: GcnModel, path) -> None:
    """Write a self-describing model file: magic, JSON header, little-endian float64 payload."""
    header = {
        "format_version": 1,
        "norm_kind": model.norm_kind.value,
        "dims": model.dims,
        "dropout": model.dropout,
        "dtype": "float64",
        "byteorder": "little",
        "order": "row-major",
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<Q", len(raw)))
    buf.write(raw)
    for w in model.weights:
        buf.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_model(path) -> GcnModel:
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC):
        raise FormatError("not a model file (bad magic)", path)
    off = len(_MAGIC)
    (hlen,) = struct.unpack_from("<Q", data, off)
    off += 8
    try:
        header = json.loads(data[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt header: {exc}", path) from None
    off += hlen
    if header.get("dtype") != "float64":
        raise FormatError(f"unsupported dtype {header.get('dtype')!r}", path)
    dt = {"little": "<f8", "big": ">f8"}.get(header.get("byteorder"))
    if dt is None:
        raise FormatError(f"unknown byteorder {header.get('byteorder')!r}", path)
    dims = header["dims"]
    weights = []
    for a, b in zip(dims, dims[1:]):
        nbytes = a * b * 8
        if off + nbytes > len(data):
            raise FormatError("truncated weight payload", path)
        w = np.frombuffer(data, dtype=dt, count=a * b, offset=off).reshape(a, b)
        weights.append(w.astype(np.float64))
        off += nbytes
    if off != len(data):
        raise FormatError("trailing bytes after weight payload", path)
    return GcnModel(tuple(weights), NormKind.parse(header["norm_kind"]), float(header["dropout"]))
