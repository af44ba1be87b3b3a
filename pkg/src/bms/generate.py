"""Graph VAE over behavior structures, sampling, and the fraud-strategy harness.

Decoder slots are the meta-rule's node types in canonical order, so a graph
with one node per type matches the decoder output by identity. Node attribute
classes are the global token ids of the attribute space; edge attribute classes
are the meta-rule's relation ids.
"""

from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linear_sum_assignment
from scipy.stats import rankdata

from . import gnn
from . import numerics as nx
from .core import AttributeSpace, BehaviorRecord, BehaviorSubgraph
from .errors import DataError, InfeasibleConfig, NumericError, TooManyNodes
from .graphbuild import MetaRule, accumulate, build_subgraph
from .numerics import ModelParams, Tensor

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-12


@dataclass
class GenConfig:
    d0: int = 64
    hidden: int = 64
    layers: int = 2
    latent: int = 32
    dec_hidden: int = 128
    aggregation: str = "mean"
    lambda_a: float = 1.0
    lambda_f: float = 1.0
    lambda_e: float = 1.0
    lr: float = 1e-3
    epochs: int = 200
    batch_size: int | None = None
    match: str = "identity"
    threshold: float = 0.5

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LatentCode:
    mu: np.ndarray
    logvar: np.ndarray
    z: np.ndarray
    eps: np.ndarray


@dataclass
class ProbGraph:
    """Decoded probabilities: ``adj`` (k, k), ``node`` (k, V), ``edge`` (k, k, R)."""

    adj: np.ndarray
    node: np.ndarray
    edge: np.ndarray


@dataclass
class Assignment:
    """``X`` is k x n; column i has a single 1 at the slot of input node i."""

    X: np.ndarray
    slots: np.ndarray
    fallback: bool = False


def _triu(k: int, diagonal: bool) -> tuple[np.ndarray, np.ndarray]:
    return np.triu_indices(k, 0 if diagonal else 1)


def _pair_index(k: int) -> np.ndarray:
    """``(k, k)`` lookup from an unordered slot pair to its strict-upper-triangle index."""
    idx = np.full((k, k), -1, dtype=np.int64)
    r, c = _triu(k, False)
    idx[r, c] = np.arange(len(r))
    idx[c, r] = np.arange(len(r))
    return idx


class GraphVAE:
    def __init__(self, params: ModelParams, config: GenConfig, meta_rule: MetaRule, vocab: int, seed: int = 0):
        self.params, self.config, self.meta_rule = params, config, meta_rule
        self.types = meta_rule.node_types
        self.k = len(self.types)
        self.num_relations = meta_rule.num_relations
        self.vocab = vocab
        self.seed = seed
        self._pairs = _pair_index(self.k)

    # -- construction ------------------------------------------------------

    @classmethod
    def create(cls, space: AttributeSpace, meta_rule: MetaRule, config: GenConfig, seed: int = 0) -> "GraphVAE":
        rng = np.random.default_rng(seed)
        k, r, v = len(meta_rule.node_types), meta_rule.num_relations, len(space)
        params = ModelParams()
        enc = gnn.GnnConfig(d0=config.d0, hidden=config.hidden, layers=config.layers, num_relations=r,
                            aggregation=config.aggregation)
        gnn.init_encoder(params, rng, enc, gnn.init_embeddings(space, config.d0, seed))
        for name in ("mu", "logvar"):
            params.add(f"{name}.W", nx.glorot(rng, config.hidden, config.latent) * 0.1)
            params.add(f"{name}.b", np.zeros(config.latent))
        params.add("dec.W", nx.glorot(rng, config.latent, config.dec_hidden))
        params.add("dec.b", np.zeros(config.dec_hidden))
        for name, width in (("adj", k * (k + 1) // 2), ("node", k * v), ("edge", k * (k - 1) // 2 * r)):
            params.add(f"{name}.W", nx.glorot(rng, config.dec_hidden, width) * 0.1)
            params.add(f"{name}.b", np.zeros(width))
        return cls(params, config, meta_rule, v, seed)

    def encoder_config(self) -> gnn.GnnConfig:
        c = self.config
        return gnn.GnnConfig(d0=c.d0, hidden=c.hidden, layers=c.layers, num_relations=self.num_relations,
                             aggregation=c.aggregation)

    # -- encoder -----------------------------------------------------------

    def _batch_operators(self, subgraphs: Sequence[BehaviorSubgraph]):
        """Block-diagonal relation operators over the concatenated behavior nodes."""
        offset = 0
        ids: list[int] = []
        rows = [[] for _ in range(self.num_relations)]
        cols = [[] for _ in range(self.num_relations)]
        for sg in subgraphs:
            if len(sg.nodes) > self.k:
                raise TooManyNodes(f"behavior {sg.record_id} has {len(sg.nodes)} nodes; the decoder has {self.k} slots")
            local = {n: offset + i for i, n in enumerate(sg.nodes)}
            ids.extend(sg.nodes)
            for u, v, t in sg.edges:
                if t >= self.num_relations:
                    raise DataError(f"edge type {t} outside the meta-rule's {self.num_relations} relations")
                rows[t] += [local[u], local[v]]
                cols[t] += [local[v], local[u]]
            offset += len(sg.nodes)
        mats = []
        for t in range(self.num_relations):
            m = sp.csr_matrix((np.ones(len(rows[t])), (rows[t], cols[t])), shape=(offset, offset))
            if self.config.aggregation == "mean":
                deg = np.asarray(m.sum(axis=1)).ravel()
                m = sp.csr_matrix(sp.diags(1.0 / np.maximum(1.0, deg)) @ m)
            mats.append(m)
        sizes = [len(sg.nodes) for sg in subgraphs]
        pool = sp.csr_matrix(
            (np.concatenate([np.full(n, 1.0 / n) for n in sizes]),
             (np.repeat(np.arange(len(sizes)), sizes), np.arange(offset))),
            shape=(len(sizes), offset),
        )
        return np.asarray(ids, dtype=np.int64), mats, pool

    def encode_tensors(self, subgraphs: Sequence[BehaviorSubgraph], eps: np.ndarray) -> tuple[Tensor, Tensor, Tensor]:
        p = self.params
        ids, mats, pool = self._batch_operators(subgraphs)
        h = nx.add(nx.gather_rows(p["embed"], ids) @ p["proj.W"], p["proj.b"])
        cfg = self.encoder_config()
        for layer in range(cfg.layers):
            rel = [p[f"conv{layer}.rel{r}"] for r in range(cfg.num_relations)]
            h = gnn.rgcn_layer(h, mats, rel, p[f"conv{layer}.self"], p[f"conv{layer}.b"], cfg.activation,
                               cfg.aggregation)
        pooled = nx.spmm(pool, h)
        mu = nx.add(pooled @ p["mu.W"], p["mu.b"])
        logvar = nx.add(pooled @ p["logvar.W"], p["logvar.b"])
        z = mu + nx.mul(nx.exp(nx.scale(logvar, 0.5)), Tensor(eps))
        return mu, logvar, z

    def encode(self, subgraph: BehaviorSubgraph, seed: int = 0) -> LatentCode:
        eps = np.random.default_rng(seed).standard_normal((1, self.config.latent))
        mu, logvar, z = self.encode_tensors([subgraph], eps)
        return LatentCode(mu.data[0], logvar.data[0], z.data[0], eps[0])

    # -- decoder -----------------------------------------------------------

    def decode_tensors(self, z: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Adjacency probabilities (B, k(k+1)/2) plus node (B*k, V) and edge (B*P, R) logits."""
        p = self.params
        hid = nx.relu(nx.add(z @ p["dec.W"], p["dec.b"]))
        adj = nx.sigmoid(nx.add(hid @ p["adj.W"], p["adj.b"]))
        node = nx.add(hid @ p["node.W"], p["node.b"])
        node = nx.reshape(node, (z.shape[0] * self.k, self.vocab))
        edge = nx.add(hid @ p["edge.W"], p["edge.b"])
        pairs = self.k * (self.k - 1) // 2
        edge = nx.reshape(edge, (z.shape[0] * pairs, self.num_relations)) if pairs else edge
        return adj, node, edge

    def to_prob_graphs(self, adj: np.ndarray, node: np.ndarray, edge: np.ndarray) -> list[ProbGraph]:
        b, k = adj.shape[0], self.k
        node = nx.softmax(node).reshape(b, k, self.vocab)
        pairs = k * (k - 1) // 2
        if pairs:
            edge = nx.softmax(edge).reshape(b, pairs, self.num_relations)
        out = []
        du, dv = _triu(k, True)
        su, sv = _triu(k, False)
        for i in range(b):
            a = np.zeros((k, k))
            a[du, dv] = adj[i]
            a[dv, du] = adj[i]
            e = np.zeros((k, k, self.num_relations))
            if pairs:
                e[su, sv] = edge[i]
                e[sv, su] = edge[i]
            out.append(ProbGraph(a, node[i], e))
        return out

    def decode(self, z: np.ndarray) -> ProbGraph:
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        adj, node, edge = self.decode_tensors(Tensor(z))
        return self.to_prob_graphs(adj.data, node.data, edge.data)[0]

    # -- matching and targets ---------------------------------------------

    def slot_of(self, space: AttributeSpace, node: int) -> int | None:
        ntype = self.meta_rule.nodes.get(space.field_name(node))
        return self.types.index(ntype) if ntype is not None else None

    def match(self, sg: BehaviorSubgraph, space: AttributeSpace, prob: ProbGraph | None = None,
              mode: str | None = None) -> Assignment:
        mode = mode or self.config.match
        n = len(sg.nodes)
        if n > self.k:
            raise TooManyNodes(f"{n} nodes exceed {self.k} slots")
        fallback = False
        if mode == "identity":
            slots = [self.slot_of(space, v) for v in sg.nodes]
            if None not in slots and len(set(slots)) == n:
                return Assignment(_assignment_matrix(slots, self.k), np.asarray(slots), False)
            fallback = True
            log.debug("identity matching impossible for %s; using exact assignment", sg.record_id)
        if prob is None:
            raise DataError("assignment matching needs decoded node probabilities")
        sim = np.stack([prob.node[:, v] for v in sg.nodes])
        slots = assign_max_similarity(sim)
        return Assignment(_assignment_matrix(slots, self.k), np.asarray(slots), fallback)

    def elbo_tensor(self, subgraphs: Sequence[BehaviorSubgraph], space: AttributeSpace, eps: np.ndarray,
                    stats: dict | None = None) -> Tensor:
        """Mean over the batch of lambda-weighted reconstruction terms plus KL."""
        c = self.config
        b, k = len(subgraphs), self.k
        mu, logvar, z = self.encode_tensors(subgraphs, eps)
        adj, node, edge = self.decode_tensors(z)
        probs = None
        if c.match != "identity" or any(not self._identity_ok(sg, space) for sg in subgraphs):
            probs = self.to_prob_graphs(adj.data, node.data, edge.data)
        du, dv = _triu(k, True)
        a_target = np.zeros(adj.shape)
        a_weight = np.where(du == dv, 1.0 / k, 2.0 / (k * (k - 1)) if k > 1 else 0.0)
        a_weight = np.tile(a_weight, (b, 1)) * c.lambda_a / b
        diag_pos = {int(du[j]): int(j) for j in np.flatnonzero(du == dv)}
        tri = {(int(u), int(v)): i for i, (u, v) in enumerate(zip(du, dv))}
        node_rows, node_cls, node_w = [], [], []
        edge_rows, edge_cls, edge_w = [], [], []
        pairs = k * (k - 1) // 2
        skipped = fallbacks = 0
        for i, sg in enumerate(subgraphs):
            x = self.match(sg, space, probs[i] if probs is not None else None)
            fallbacks += x.fallback
            slot = {v: int(s) for v, s in zip(sg.nodes, x.slots)}
            for s in x.slots:
                a_target[i, diag_pos[int(s)]] = 1.0
            for v in sg.nodes:
                node_rows.append(i * k + slot[v])
                node_cls.append(v)
                node_w.append(c.lambda_f / (len(sg.nodes) * b))
            if not sg.edges:
                skipped += 1
            for u, v, t in sg.edges:
                su, sv = sorted((slot[u], slot[v]))
                a_target[i, tri[(su, sv)]] = 1.0
                edge_rows.append(i * pairs + int(self._pairs[su, sv]))
                edge_cls.append(t)
                edge_w.append(c.lambda_e / (len(sg.edges) * b))
        if stats is not None:
            stats["edge_term_skipped"] = stats.get("edge_term_skipped", 0) + skipped
            stats["match_fallbacks"] = stats.get("match_fallbacks", 0) + fallbacks
        loss = nx.bce(adj, a_target, a_weight)
        loss = loss + nx.softmax_cross_entropy(nx.gather_rows(node, node_rows), node_cls, np.asarray(node_w))
        if edge_rows:
            loss = loss + nx.softmax_cross_entropy(nx.gather_rows(edge, edge_rows), edge_cls, np.asarray(edge_w))
        return loss + nx.scale(nx.gaussian_kl(mu, logvar), 1.0 / b)

    def _identity_ok(self, sg: BehaviorSubgraph, space: AttributeSpace) -> bool:
        slots = [self.slot_of(space, v) for v in sg.nodes]
        return None not in slots and len(set(slots)) == len(slots)


def _assignment_matrix(slots: Sequence[int], k: int) -> np.ndarray:
    x = np.zeros((k, len(slots)))
    x[list(slots), np.arange(len(slots))] = 1.0
    return x


def assign_max_similarity(similarity: np.ndarray) -> list[int]:
    """Exact maximum-similarity assignment of n rows (inputs) to k >= n columns (slots)."""
    sim = np.asarray(similarity, dtype=float)
    rows, cols = linear_sum_assignment(sim, maximize=True)
    out = [0] * sim.shape[0]
    for r, c in zip(rows, cols):
        out[r] = int(c)
    return out


# ---------------------------------------------------------------------------
# losses in closed form (numpy)

def recon_loss(a_mapped: np.ndarray, f: np.ndarray, e: np.ndarray, prob: ProbGraph,
               x: np.ndarray | None = None, lambdas: tuple[float, float, float] = (1.0, 1.0, 1.0),
               flags: dict | None = None) -> float:
    """``-log p(G|z)`` for one graph.

    ``a_mapped`` is the k x k input adjacency already mapped onto decoder slots
    (unit diagonal on occupied slots). ``f`` (n x V) and ``e`` (n x n x R) are the
    one-hot input attributes in input-node order; ``x`` (k x n) selects the
    matching decoder rows, identity when omitted.
    """
    k = a_mapped.shape[0]
    n = f.shape[0]
    x = np.eye(k)[:, :n] if x is None else x
    at = np.clip(prob.adj, PROB_CLAMP, 1 - PROB_CLAMP)
    ll = a_mapped * np.log(at) + (1 - a_mapped) * np.log(1 - at)
    diag = np.trace(ll) / k
    off = (ll.sum() - np.trace(ll)) / (k * (k - 1)) if k > 1 else 0.0
    log_a = diag + off
    f_mapped = x.T @ prob.node
    log_f = float(np.sum(np.log(np.clip(np.sum(f * f_mapped, axis=1), PROB_CLAMP, None)))) / n
    a_in = x.T @ a_mapped @ x
    denom = a_in.sum() - n
    log_e = 0.0
    if denom > 0:
        e_mapped = np.einsum("ai,abr,bj->ijr", x, prob.edge, x)
        total = 0.0
        for i in range(n):
            for j in range(n):
                if i != j and a_in[i, j] > 0:
                    total += math.log(max(PROB_CLAMP, float(e[i, j] @ e_mapped[i, j])))
        log_e = total / denom
    elif flags is not None:
        flags["edge_term_skipped"] = True
    la, lf, le = lambdas
    return float(-(la * log_a + lf * log_f + le * log_e))


def kl_divergence(mu: np.ndarray, logvar: np.ndarray) -> float:
    mu, logvar = np.asarray(mu, dtype=float), np.asarray(logvar, dtype=float)
    return float(-0.5 * np.sum(1 + logvar - mu * mu - np.exp(logvar)))


def elbo_loss(a_mapped, f, e, prob: ProbGraph, mu, logvar, x=None, lambdas=(1.0, 1.0, 1.0)) -> float:
    return recon_loss(a_mapped, f, e, prob, x, lambdas) + kl_divergence(mu, logvar)


def graph_arrays(sg: BehaviorSubgraph, model: GraphVAE, space: AttributeSpace,
                 assignment: Assignment) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Slot-mapped adjacency and one-hot input attributes for :func:`recon_loss`."""
    n = len(sg.nodes)
    local = {v: i for i, v in enumerate(sg.nodes)}
    a = np.eye(n)
    e = np.zeros((n, n, model.num_relations))
    for u, v, t in sg.edges:
        a[local[u], local[v]] = a[local[v], local[u]] = 1.0
        e[local[u], local[v], t] = e[local[v], local[u], t] = 1.0
    f = np.zeros((n, model.vocab))
    f[np.arange(n), list(sg.nodes)] = 1.0
    x = assignment.X
    return x @ a @ x.T, f, e


# ---------------------------------------------------------------------------
# training and sampling

@dataclass
class GenTrainResult:
    model: GraphVAE
    loss_curve: list[float] = field(default_factory=list)
    stats: dict = field(default_factory=dict)


def train_vae(subgraphs: Sequence[BehaviorSubgraph], space: AttributeSpace, meta_rule: MetaRule,
              config: GenConfig, seed: int = 0, progress=None) -> GenTrainResult:
    """Adam on the batch-mean ELBO; the curve records each epoch's mean loss before its updates."""
    subgraphs = list(subgraphs)
    if not subgraphs:
        raise DataError("no training structures")
    model = GraphVAE.create(space, meta_rule, config, seed)
    opt = nx.Adam(model.params, lr=config.lr)
    rng = np.random.default_rng(seed + 1)
    result = GenTrainResult(model)
    n = len(subgraphs)
    bs = config.batch_size or n
    for epoch in range(config.epochs):
        order = rng.permutation(n) if bs < n else np.arange(n)
        total = 0.0
        for start in range(0, n, bs):
            batch = [subgraphs[i] for i in order[start:start + bs]]
            eps = rng.standard_normal((len(batch), config.latent))
            model.params.zero_grad()
            loss = model.elbo_tensor(batch, space, eps, result.stats if epoch == 0 else None)
            if not np.isfinite(loss.item()):
                raise NumericError(f"non-finite ELBO at epoch {epoch}")
            loss.backward()
            opt.step()
            total += loss.item() * len(batch)
        result.loss_curve.append(total / n)
        if progress is not None:
            progress(epoch, result.loss_curve[-1])
    return result


def check_structure(sg: BehaviorSubgraph, meta_rule: MetaRule, space: AttributeSpace) -> str | None:
    """Reason the structure breaks the meta-rule schema, or None when valid."""
    if len(sg.nodes) < 2:
        return "fewer than two nodes"
    types = {}
    for v in sg.nodes:
        if not 0 <= v < len(space):
            return f"node {v} outside the attribute space"
        t = meta_rule.nodes.get(space.field_name(v))
        if t is None:
            return f"field {space.field_name(v)} is not a node of the meta-rule"
        if t in types.values():
            return f"node type {t} appears twice"
        types[v] = t
    lic = meta_rule.licensed()
    adj = {v: set() for v in sg.nodes}
    for u, v, t in sg.edges:
        if meta_rule.edges:
            if t not in lic.get(frozenset((types[u], types[v])), ()):
                return f"edge type {t} not licensed between {types[u]} and {types[v]}"
        elif t != 0:
            return "clique rules have a single edge type"
        adj[u].add(v)
        adj[v].add(u)
    seen = {sg.nodes[0]}
    queue = deque([sg.nodes[0]])
    while queue:
        for w in adj[queue.popleft()]:
            if w not in seen:
                seen.add(w)
                queue.append(w)
    if len(seen) != len(sg.nodes):
        return "disconnected"
    return None


@dataclass
class SampleReport:
    graphs: list[BehaviorSubgraph]
    attempts: int
    rejected: int
    reasons: dict[str, int]
    complete: bool

    @property
    def rejection_rate(self) -> float:
        return self.rejected / self.attempts if self.attempts else 0.0


def _realize(model: GraphVAE, prob: ProbGraph, space: AttributeSpace, threshold: float, name: str
             ) -> tuple[BehaviorSubgraph | None, str | None]:
    keep = [a for a in range(model.k) if prob.adj[a, a] > threshold]
    tokens = [int(np.argmax(prob.node[a])) for a in keep]
    if len(set(tokens)) != len(tokens):
        return None, "repeated attribute"
    for a, tok in zip(keep, tokens):
        if model.meta_rule.nodes.get(space.field_name(tok)) != model.types[a]:
            return None, "attribute does not fit its slot type"
    edges = []
    for i, a in enumerate(keep):
        for j in range(i + 1, len(keep)):
            b = keep[j]
            if prob.adj[a, b] > threshold:
                edges.append((tokens[i], tokens[j], int(np.argmax(prob.edge[a, b]))))
    if not keep:
        return None, "fewer than two nodes"
    sg = BehaviorSubgraph(name, tuple(tokens), tuple(edges), "generated")
    reason = check_structure(sg, model.meta_rule, space)
    return (None, reason) if reason else (sg, None)


def sample(model: GraphVAE, space: AttributeSpace, count: int, seed: int = 0, threshold: float | None = None,
           max_attempts: int | None = None) -> SampleReport:
    """Draw ``z ~ N(0, I)``, decode, threshold and keep schema-valid structures."""
    threshold = model.config.threshold if threshold is None else threshold
    max_attempts = max_attempts if max_attempts is not None else 20 * count
    rng = np.random.default_rng(seed)
    graphs: list[BehaviorSubgraph] = []
    reasons: dict[str, int] = {}
    attempts = 0
    while len(graphs) < count and attempts < max_attempts:
        batch = min(max(count - len(graphs), 1) * 2, max_attempts - attempts)
        z = rng.standard_normal((batch, model.config.latent))
        adj, node, edge = model.decode_tensors(Tensor(z))
        for prob in model.to_prob_graphs(adj.data, node.data, edge.data):
            attempts += 1
            sg, reason = _realize(model, prob, space, threshold, f"gen{attempts}")
            if sg is None:
                reasons[reason] = reasons.get(reason, 0) + 1
            elif len(graphs) < count:
                graphs.append(sg)
            if len(graphs) >= count:
                break
    complete = len(graphs) >= count
    if not complete:
        log.warning("retry cap reached: %d of %d structures after %d attempts", len(graphs), count, attempts)
    return SampleReport(graphs, attempts, attempts - len(graphs), reasons, complete)


def save_model(model: GraphVAE, space: AttributeSpace, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    nx.save_params(model.params, directory / "params")
    meta = {"config": model.config.to_dict(), "meta_rule": model.meta_rule.to_dict(), "seed": model.seed,
            "space": space.to_dict()}
    (directory / "model.json").write_text(json.dumps(meta, sort_keys=True, indent=1), encoding="utf-8")


def load_model(directory: str | Path) -> tuple[GraphVAE, AttributeSpace]:
    directory = Path(directory)
    meta = json.loads((directory / "model.json").read_text(encoding="utf-8"))
    space = AttributeSpace.from_dict(meta["space"])
    params = nx.load_params(directory / "params")
    model = GraphVAE(params, GenConfig(**meta["config"]), MetaRule.from_dict(meta["meta_rule"]), len(space),
                     meta["seed"])
    return model, space


# ---------------------------------------------------------------------------
# evaluation harness

def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Area under the ROC curve via the rank-sum statistic, ties counted half."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC needs both positive and negative examples")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def prevented_loss(flagged: Sequence[bool], labels: Sequence[int], amounts: Sequence[float]) -> float:
    """Summed amount of true frauds the detector flags."""
    return float(sum(a for f, y, a in zip(flagged, labels, amounts) if f and y == 1))


def bucket_floor(token: str) -> float:
    """Smallest amount consistent with a decimal-bucket token."""
    if token.startswith("e") and token[1:].isdigit():
        return float(10 ** int(token[1:]))
    return 0.0


@dataclass
class HarnessConfig:
    mode: str = "S1"
    hide: Sequence[float] = (0.0, 0.25, 0.5, 0.75)
    repetitions: int = 2
    test_fraction: float = 0.2
    augment: bool = False
    detector: gnn.GnnConfig = field(default_factory=lambda: gnn.GnnConfig(d0=64, hidden=64, head=(64, 32), epochs=150))
    generator: GenConfig = field(default_factory=lambda: GenConfig(epochs=150))


@dataclass
class HarnessRow:
    mode: str
    hide: float
    auc_mean: float
    auc_std: float
    prevented_mean: float
    prevented_std: float
    fraud_total_mean: float
    rejection_rate: float

    def as_list(self) -> list:
        return [self.mode, self.hide, self.auc_mean, self.auc_std, self.prevented_mean, self.prevented_std,
                self.fraud_total_mean, self.rejection_rate]


HARNESS_HEADER = ["mode", "hide", "auc_mean", "auc_std", "prevented_mean", "prevented_std", "fraud_total_mean",
                  "rejection_rate"]


def _split_fraud(labels: Sequence[str], test_fraction: float, rng: np.random.Generator):
    idx = {lab: [i for i, l in enumerate(labels) if l == lab] for lab in ("0", "1")}
    train, test = [], []
    for lab, rows in idx.items():
        rows = [rows[j] for j in rng.permutation(len(rows))]
        cut = int(round(len(rows) * (1 - test_fraction)))
        train += rows[:cut]
        test += rows[cut:]
    return sorted(train), sorted(test)


def harness_run(records: Sequence[BehaviorRecord], schema, meta_rule: MetaRule, mode: str, hide: float,
                seed: int, config: HarnessConfig, amount_field: str = "amount") -> dict:
    """One repetition of S1 or S2 at hide fraction ``hide``."""
    if mode not in ("S1", "S2"):
        raise ValueError(f"unknown strategy {mode!r}")
    if not 0.0 <= hide <= 1.0:
        raise ValueError("hide fraction must lie in [0, 1]")
    from .ingest import build_space

    rng = np.random.default_rng(seed)
    space = build_space(records, schema)
    sgs = [build_subgraph(r, meta_rule, space, schema, observe=False) for r in records]
    labels = [str(r.label) for r in records]
    amounts = [float(r.values[amount_field]) for r in records]
    train, test = _split_fraud(labels, config.test_fraction, rng)
    frauds_train = [i for i in train if labels[i] == "1"]
    frauds_test = [i for i in test if labels[i] == "1"]
    pool = frauds_train if mode == "S1" else frauds_test
    pool = [pool[j] for j in rng.permutation(len(pool))]
    n_hidden = int(round(hide * len(pool)))
    hidden = set(pool[:n_hidden])
    vae_data = [sgs[i] for i in frauds_train if i not in hidden]
    if not vae_data:
        raise InfeasibleConfig("every training fraud is hidden; nothing to train the generator on")

    generated: list[BehaviorSubgraph] = []
    rejection = 0.0
    if n_hidden:
        gen = train_vae(vae_data, space, meta_rule, config.generator, seed + 11).model
        report = sample(gen, space, n_hidden, seed + 13)
        generated = report.graphs
        rejection = report.rejection_rate
    amount_fid = space.field_id(amount_field)

    def gen_amount(sg: BehaviorSubgraph) -> float:
        for v in sg.nodes:
            if space.field_of(v) == amount_fid:
                return bucket_floor(space.tokens[v].value_token)
        return 0.0

    train_sg = [sgs[i] for i in train if i not in hidden or (mode == "S1" and config.augment)]
    train_y = [labels[i] for i in train if i not in hidden or (mode == "S1" and config.augment)]
    test_sg = [sgs[i] for i in test if i not in hidden]
    test_y = [int(labels[i]) for i in test if i not in hidden]
    test_amount = [amounts[i] for i in test if i not in hidden]
    if mode == "S1":
        train_sg += generated
        train_y += ["1"] * len(generated)
    else:
        test_sg += generated
        test_y += [1] * len(generated)
        test_amount += [gen_amount(g) for g in generated]

    graph = accumulate(train_sg, space, meta_rule)
    det_cfg = gnn.GnnConfig(**{**config.detector.to_dict(), "num_relations": meta_rule.num_relations})
    model, _ = gnn.train_detect(space, graph, train_sg, train_y, det_cfg, seed + 17, classes=["0", "1"])
    mats = gnn.relation_matrices(graph, len(space), det_cfg.num_relations, det_cfg.aggregation)
    proba = model.predict_proba(mats, test_sg)[:, 1]
    return {
        "auc": auc(proba, test_y),
        "prevented": prevented_loss(proba >= 0.5, test_y, test_amount),
        "fraud_total": float(sum(a for a, y in zip(test_amount, test_y) if y == 1)),
        "rejection_rate": rejection,
        "generated": len(generated),
        "hidden": n_hidden,
    }


def strategy_harness(records: Sequence[BehaviorRecord], schema, meta_rule: MetaRule, config: HarnessConfig,
                     seed: int = 0, progress=None) -> list[HarnessRow]:
    """AUC and prevented loss over the hide-fraction grid, averaged over repetitions."""
    rows = []
    for h in sorted(set(float(x) for x in config.hide)):
        runs = []
        for rep in range(config.repetitions):
            rep_seed = int(np.random.SeedSequence([seed, rep]).generate_state(1)[0])
            runs.append(harness_run(records, schema, meta_rule, config.mode, h, rep_seed, config))
            if progress is not None:
                progress(h, rep, runs[-1])
        aucs = np.array([r["auc"] for r in runs])
        prev = np.array([r["prevented"] for r in runs])
        rows.append(HarnessRow(config.mode, h, float(aucs.mean()), float(aucs.std()), float(prev.mean()),
                               float(prev.std()), float(np.mean([r["fraud_total"] for r in runs])),
                               float(np.mean([r["rejection_rate"] for r in runs]))))
    return rows
