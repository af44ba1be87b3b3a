"""Attribute embeddings, relational graph convolution, pooling and heads.

Message passing runs over the whole attribute space at once: node states are
an ``(N, d)`` tensor and each relation contributes a normalized sparse
adjacency. A behavior vector is the mean of its nodes' states.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from . import numerics as nx
from .core import AttributeSpace, BehaviorSubgraph, HeteroGraph
from .errors import DegenerateLabels, EmptyBehavior, GraphError, MissingEmbedding, NumericError, ShapeError
from .numerics import ModelParams, Tensor

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# embeddings

def _philox_key(field_name: str, token: str, seed: int) -> int:
    digest = hashlib.blake2b(f"{field_name}\x1f{token}\x1f{seed}".encode("utf-8"), digest_size=16).digest()
    return int.from_bytes(digest, "little")


def hashed_vector(field_name: str, token: str, seed: int, dim: int) -> np.ndarray:
    """Deterministic N(0, 1/dim) vector: Philox keyed by (field, token, seed), counter = coordinate."""
    gen = np.random.Generator(np.random.Philox(key=_philox_key(field_name, token, seed)))
    return gen.standard_normal(dim) / math.sqrt(dim)


def init_embeddings(space: AttributeSpace, d0: int = 768, seed: int = 0, source: str = "hashed",
                    table_path: str | Path | None = None) -> np.ndarray:
    """Initial ``(len(space), d0)`` table.

    ``hashed`` draws every row from :func:`hashed_vector`. ``imported`` reads a
    JSON list of ``{"field", "token", "vector"}`` objects that must cover every
    token of the space.
    """
    if source == "hashed":
        table = np.empty((len(space), d0))
        for i, tok in enumerate(space.tokens):
            table[i] = hashed_vector(space.fields[tok.field_id], tok.value_token, seed, d0)
        return table
    if source == "imported":
        if table_path is None:
            raise MissingEmbedding("imported embeddings need a table path")
        entries = json.loads(Path(table_path).read_text(encoding="utf-8"))
        lookup = {(e["field"], str(e["token"]).strip().casefold()): e["vector"] for e in entries}
        rows = []
        for tok in space.tokens:
            key = (space.fields[tok.field_id], tok.value_token)
            if key not in lookup:
                raise MissingEmbedding(f"no imported vector for {key[0]}={key[1]!r}")
            rows.append(lookup[key])
        table = np.asarray(rows, dtype=np.float64)
        if table.ndim != 2:
            raise MissingEmbedding("imported vectors have inconsistent dimensions")
        return table
    raise ValueError(f"unknown embedding source {source!r}")


# ---------------------------------------------------------------------------
# graph operators

def relation_matrices(graph: HeteroGraph, num_nodes: int, num_relations: int,
                      aggregation: str = "mean") -> list[sp.csr_matrix]:
    """Per-relation ``(N, N)`` neighbor operators.

    ``mean``: row i holds ``w_ij / max(1, sum_j w_ij)`` (weighted-degree mean).
    ``sum``: row i holds the raw multiplicities ``w_ij``.
    """
    rows = [[] for _ in range(num_relations)]
    cols = [[] for _ in range(num_relations)]
    vals = [[] for _ in range(num_relations)]
    for (u, v, t), w in graph.edges.items():
        if not (0 <= u < num_nodes and 0 <= v < num_nodes):
            raise GraphError(f"edge ({u},{v}) has an endpoint outside 0..{num_nodes - 1}")
        if not 0 <= t < num_relations:
            raise GraphError(f"edge type {t} outside 0..{num_relations - 1}")
        rows[t] += [u, v]
        cols[t] += [v, u]
        vals[t] += [float(w), float(w)]
    mats = []
    for t in range(num_relations):
        m = sp.csr_matrix((vals[t], (rows[t], cols[t])), shape=(num_nodes, num_nodes))
        if aggregation == "mean":
            deg = np.asarray(m.sum(axis=1)).ravel()
            m = sp.diags(1.0 / np.maximum(1.0, deg)) @ m
        elif aggregation != "sum":
            raise ValueError(f"unknown aggregation {aggregation!r}")
        mats.append(sp.csr_matrix(m))
    return mats


def pool_matrix(subgraphs: Sequence[BehaviorSubgraph], num_nodes: int) -> sp.csr_matrix:
    """``(B, N)`` operator averaging each behavior's node states."""
    rows, cols, vals = [], [], []
    for b, sg in enumerate(subgraphs):
        if not sg.nodes:
            raise EmptyBehavior(f"behavior {sg.record_id} has no attribute nodes")
        w = 1.0 / len(sg.nodes)
        for n in sg.nodes:
            if not 0 <= n < num_nodes:
                raise GraphError(f"node {n} outside the attribute space")
            rows.append(b)
            cols.append(n)
            vals.append(w)
    return sp.csr_matrix((vals, (rows, cols)), shape=(len(subgraphs), num_nodes))


def mean_pool(subgraph: BehaviorSubgraph | Sequence[int], states: Tensor) -> Tensor:
    nodes = subgraph.nodes if isinstance(subgraph, BehaviorSubgraph) else tuple(subgraph)
    if not nodes:
        raise EmptyBehavior("cannot pool an empty behavior")
    return nx.mean_rows(nx.gather_rows(states, list(nodes)))


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": nx.relu,
    "tanh": nx.tanh,
    "none": nx.identity,
}


def rgcn_layer(h: Tensor, graph: HeteroGraph | Sequence[sp.spmatrix], rel_weights: Sequence[Tensor],
               self_weight: Tensor, bias: Tensor | None = None, activation: str = "relu",
               aggregation: str = "mean", gate: tuple[Tensor, Tensor] | None = None) -> Tensor:
    """``act(H W0 + g * sum_r A_r H W_r + b)`` with optional gate ``g = sigmoid(H Wg + bg)``."""
    n = h.shape[0]
    mats = relation_matrices(graph, n, len(rel_weights), aggregation) if isinstance(graph, HeteroGraph) else list(graph)
    if len(mats) != len(rel_weights):
        raise ShapeError(f"{len(mats)} relation operators but {len(rel_weights)} relation weights")
    out = h @ self_weight
    msg = None
    for a, w in zip(mats, rel_weights):
        if a.nnz == 0:
            continue
        term = nx.spmm(a, h) @ w
        msg = term if msg is None else msg + term
    if msg is not None:
        if gate is not None:
            gw, gb = gate
            msg = nx.mul(msg, nx.sigmoid(nx.add(h @ gw, gb)))
        out = out + msg
    if bias is not None:
        out = nx.add(out, bias)
    return ACTIVATIONS[activation](out)


# ---------------------------------------------------------------------------
# configuration and models

@dataclass
class GnnConfig:
    d0: int = 768
    hidden: int = 128
    layers: int = 2
    num_relations: int = 1
    aggregation: str = "mean"
    gated: bool = False
    activation: str = "relu"
    head: tuple[int, ...] = (128, 64)
    train_embeddings: bool = True
    embed_source: str = "hashed"
    embed_table: str | None = None
    lr: float = 1e-3
    epochs: int = 200
    batch_size: int | None = None
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        self.head = tuple(self.head)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def for_rule(cls, meta_rule, **overrides) -> "GnnConfig":
        return cls(num_relations=meta_rule.num_relations, **overrides)

    def check_rule(self, meta_rule) -> None:
        if meta_rule.num_relations != self.num_relations:
            raise ValueError(f"config has {self.num_relations} relations, meta-rule has {meta_rule.num_relations}")


def _linear(params: ModelParams, rng: np.random.Generator, name: str, fan_in: int, fan_out: int,
            gain: float = 1.0) -> None:
    params.add(f"{name}.W", nx.glorot(rng, fan_in, fan_out) * gain)
    params.add(f"{name}.b", np.zeros(fan_out))


def init_encoder(params: ModelParams, rng: np.random.Generator, config: GnnConfig, table: np.ndarray) -> None:
    params.add("embed", table)
    _linear(params, rng, "proj", table.shape[1], config.hidden)
    for layer in range(config.layers):
        params.add(f"conv{layer}.self", nx.glorot(rng, config.hidden, config.hidden))
        for r in range(config.num_relations):
            params.add(f"conv{layer}.rel{r}", nx.glorot(rng, config.hidden, config.hidden))
        params.add(f"conv{layer}.b", np.zeros(config.hidden))
        if config.gated:
            _linear(params, rng, f"conv{layer}.gate", config.hidden, config.hidden)


def encode_nodes(params: ModelParams, config: GnnConfig, mats: Sequence[sp.spmatrix]) -> Tensor:
    """Node states after projection and all relational layers."""
    h = nx.add(params["embed"] @ params["proj.W"], params["proj.b"])
    for layer in range(config.layers):
        rel = [params[f"conv{layer}.rel{r}"] for r in range(config.num_relations)]
        gate = (params[f"conv{layer}.gate.W"], params[f"conv{layer}.gate.b"]) if config.gated else None
        h = rgcn_layer(h, mats, rel, params[f"conv{layer}.self"], params[f"conv{layer}.b"],
                       config.activation, config.aggregation, gate)
    return h


def init_head(params: ModelParams, rng: np.random.Generator, widths: Sequence[int], prefix: str = "head") -> None:
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        last = i == len(widths) - 2
        _linear(params, rng, f"{prefix}{i}", a, b, gain=0.01 if last else 1.0)


def mlp_head(params: ModelParams, x: Tensor, prefix: str = "head") -> Tensor:
    """Fully connected layers with ReLU between them; returns logits."""
    i = 0
    while f"{prefix}{i}.W" in params:
        if i > 0:
            x = nx.relu(x)
        x = nx.add(x @ params[f"{prefix}{i}.W"], params[f"{prefix}{i}.b"])
        i += 1
    return x


def project(table: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = table @ weight
    return nx.add(out, bias) if bias is not None else out


@dataclass
class TrainResult:
    params: ModelParams
    config: GnnConfig
    classes: list[str]
    loss_curve: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    initial_embeddings: np.ndarray | None = None
    node_embeddings: np.ndarray | None = None


def _check_finite(loss: Tensor, epoch: int) -> None:
    if not np.isfinite(loss.item()):
        raise NumericError(f"non-finite loss at epoch {epoch}")


def _class_index(labels: Sequence[str], classes: Sequence[str] | None) -> tuple[list[str], np.ndarray]:
    classes = sorted(set(labels)) if classes is None else list(classes)
    lookup = {c: i for i, c in enumerate(classes)}
    return classes, np.array([lookup[l] for l in labels], dtype=np.int64)


def _weight_decay(params: ModelParams, wd: float) -> None:
    if wd <= 0:
        return
    for name, t in params.items():
        if name.endswith(".W") or ".rel" in name or name.endswith(".self"):
            if t.grad is not None:
                t.grad += wd * t.data


class DetectionModel:
    """Embedding -> projection -> relational layers -> mean pool -> MLP head."""

    def __init__(self, params: ModelParams, config: GnnConfig, classes: list[str], seed: int = 0):
        self.params, self.config, self.classes, self.seed = params, config, classes, seed

    @classmethod
    def create(cls, space: AttributeSpace, config: GnnConfig, classes: list[str], seed: int,
               table: np.ndarray | None = None) -> "DetectionModel":
        rng = np.random.default_rng(seed)
        if table is None:
            table = init_embeddings(space, config.d0, seed, config.embed_source, config.embed_table)
        params = ModelParams()
        init_encoder(params, rng, config, table)
        init_head(params, rng, (config.hidden, *config.head, len(classes)))
        return cls(params, config, classes, seed)

    def extend(self, space: AttributeSpace) -> None:
        """Grow the embedding table to cover tokens interned after training.

        New rows get their untrained initial vectors, so unseen attributes
        behave exactly as attributes that never appeared in a training behavior.
        """
        table = self.params["embed"].data
        if len(space) == table.shape[0]:
            return
        if self.config.embed_source != "hashed":
            raise MissingEmbedding("imported embedding table does not cover the extended space")
        extra = np.empty((len(space) - table.shape[0], table.shape[1]))
        for k, i in enumerate(range(table.shape[0], len(space))):
            tok = space.tokens[i]
            extra[k] = hashed_vector(space.fields[tok.field_id], tok.value_token, self.seed, table.shape[1])
        self.params["embed"].data = np.vstack([table, extra])

    def logits(self, mats, subgraphs: Sequence[BehaviorSubgraph]) -> Tensor:
        h = encode_nodes(self.params, self.config, mats)
        pooled = nx.spmm(pool_matrix(subgraphs, h.shape[0]), h)
        return mlp_head(self.params, pooled)

    def predict_proba(self, mats, subgraphs: Sequence[BehaviorSubgraph]) -> np.ndarray:
        return nx.softmax(self.logits(mats, subgraphs).data)


def train_detect(space: AttributeSpace, graph: HeteroGraph, subgraphs: Sequence[BehaviorSubgraph],
                 labels: Sequence[str], config: GnnConfig, seed: int = 0,
                 val: tuple[Sequence[BehaviorSubgraph], Sequence[str]] | None = None,
                 classes: Sequence[str] | None = None, progress: Callable[[int, float], None] | None = None,
                 ) -> tuple[DetectionModel, TrainResult]:
    """Train a behavior classifier with softmax cross-entropy and Adam.

    ``graph`` is the message-passing graph (normally the accumulated training
    behaviors). The loss curve holds the mean training loss per epoch, measured
    before that epoch's updates.
    """
    classes, y = _class_index(labels, classes)
    if len(set(y.tolist())) < 2:
        raise DegenerateLabels("training labels contain a single class")
    model = DetectionModel.create(space, config, classes, seed)
    initial = model.params["embed"].data.copy()
    if not config.train_embeddings:
        model.params["embed"].requires_grad = False
    mats = relation_matrices(graph, len(space), config.num_relations, config.aggregation)
    opt = nx.Adam(model.params, lr=config.lr)
    rng = np.random.default_rng(seed + 1)
    result = TrainResult(model.params, config, classes, initial_embeddings=initial)
    subgraphs = list(subgraphs)
    n = len(subgraphs)
    bs = config.batch_size or n
    if val is not None:
        val_sg, val_labels = val
        val_y = np.array([classes.index(l) if l in classes else -1 for l in val_labels])
    for epoch in range(config.epochs):
        order = rng.permutation(n) if bs < n else np.arange(n)
        losses = []
        for start in range(0, n, bs):
            batch = order[start:start + bs]
            model.params.zero_grad()
            logits = model.logits(mats, [subgraphs[i] for i in batch])
            loss = nx.softmax_cross_entropy(logits, y[batch])
            _check_finite(loss, epoch)
            loss.backward()
            _weight_decay(model.params, config.weight_decay)
            opt.step()
            losses.append(loss.item() * len(batch))
        result.loss_curve.append(sum(losses) / n)
        if val is not None and len(val_sg):
            pred = model.predict_proba(mats, val_sg).argmax(axis=1)
            result.val_accuracy.append(float(np.mean(pred == val_y)))
        if progress is not None:
            progress(epoch, result.loss_curve[-1])
    model.params["embed"].requires_grad = True
    result.node_embeddings = encode_nodes(model.params, config, mats).data
    return model, result


def train_nodeclass(space: AttributeSpace, graph: HeteroGraph, nodes: Sequence[int], labels: Sequence[str],
                    config: GnnConfig, seed: int = 0, out_dim: int = 64) -> TrainResult:
    """Node classification; exposes the final per-node output embeddings.

    Layers: projection, ``config.layers`` relational layers, a linear layer to
    ``out_dim`` (the output embeddings), and a linear classifier on top.
    """
    classes, y = _class_index(labels, None)
    if len(classes) < 2:
        raise DegenerateLabels("node labels contain a single class")
    rng = np.random.default_rng(seed)
    table = init_embeddings(space, config.d0, seed, config.embed_source, config.embed_table)
    params = ModelParams()
    init_encoder(params, rng, config, table)
    _linear(params, rng, "out", config.hidden, out_dim)
    _linear(params, rng, "cls", out_dim, len(classes), gain=0.01)
    if not config.train_embeddings:
        params["embed"].requires_grad = False
    mats = relation_matrices(graph, len(space), config.num_relations, config.aggregation)
    nodes = np.asarray(nodes, dtype=np.int64)
    opt = nx.Adam(params, lr=config.lr)
    result = TrainResult(params, config, classes, initial_embeddings=table.copy())

    def embeddings() -> Tensor:
        h = encode_nodes(params, config, mats)
        return nx.add(h @ params["out.W"], params["out.b"])

    for epoch in range(config.epochs):
        params.zero_grad()
        emb = embeddings()
        logits = nx.add(nx.gather_rows(emb, nodes) @ params["cls.W"], params["cls.b"])
        loss = nx.softmax_cross_entropy(logits, y)
        _check_finite(loss, epoch)
        loss.backward()
        opt.step()
        result.loss_curve.append(loss.item())
    params["embed"].requires_grad = True
    result.node_embeddings = embeddings().data
    return result


def stratified_split(labels: Sequence[str], fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
                     seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-label seeded shuffle, then train/val/test cuts by rounded fractions."""
    rng = np.random.default_rng(seed)
    labels = list(labels)
    train, val, test = [], [], []
    for lab in sorted(set(labels)):
        idx = np.array([i for i, l in enumerate(labels) if l == lab])
        idx = idx[rng.permutation(len(idx))]
        n_train = int(round(fractions[0] * len(idx)))
        n_val = int(round(fractions[1] * len(idx)))
        train += idx[:n_train].tolist()
        val += idx[n_train:n_train + n_val].tolist()
        test += idx[n_train + n_val:].tolist()
    return np.array(sorted(train), dtype=np.int64), np.array(sorted(val), dtype=np.int64), np.array(sorted(test), dtype=np.int64)
