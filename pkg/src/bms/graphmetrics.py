"""Similarity and novelty metrics for generated structures.

Graphs here are small labeled simple graphs. :class:`LabeledGraph` is the
working form; helpers convert behavior subgraphs into it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import permutations, product
from typing import Callable, Sequence

import numpy as np

from .core import AttributeSpace, BehaviorSubgraph
from .errors import EmptyInput
from .graphbuild import MetaRule

NUM_ORBITS = 15


@dataclass(frozen=True)
class LabeledGraph:
    labels: tuple[str, ...]
    edges: tuple[tuple[int, int, int], ...] = ()

    def __post_init__(self):
        norm = set()
        for u, v, t in self.edges:
            if u == v:
                raise ValueError("self-loops are not allowed")
            norm.add((min(u, v), max(u, v), int(t)))
        object.__setattr__(self, "labels", tuple(str(x) for x in self.labels))
        object.__setattr__(self, "edges", tuple(sorted(norm)))

    @property
    def n(self) -> int:
        return len(self.labels)

    def adjacency_sets(self) -> list[set[int]]:
        adj = [set() for _ in range(self.n)]
        for u, v, _ in self.edges:
            adj[u].add(v)
            adj[v].add(u)
        return adj

    @classmethod
    def unlabeled(cls, n: int, edges: Sequence[tuple[int, int]]) -> "LabeledGraph":
        return cls(("",) * n, tuple((u, v, 0) for u, v in edges))

    @classmethod
    def from_subgraph(cls, sg: BehaviorSubgraph, space: AttributeSpace | None = None) -> "LabeledGraph":
        index = {v: i for i, v in enumerate(sg.nodes)}
        labels = [space.label(v) if space is not None else str(v) for v in sg.nodes]
        return cls(tuple(labels), tuple((index[u], index[v], t) for u, v, t in sg.edges))


# ---------------------------------------------------------------------------
# KSI

def ksi_sigma(kernel_size: float) -> float:
    return 0.3 * ((kernel_size - 1) * 0.5 - 1) + 0.8


def _binary(a) -> np.ndarray:
    return (np.asarray(a, dtype=float) >= 1).astype(float)


def ksi(e1, e2, kernel_size: float = 3) -> float:
    """``exp(-||E1 - E2||_F^2 / (2 sigma^2))`` on binary adjacency; the smaller matrix is zero-padded."""
    sigma = ksi_sigma(kernel_size)
    if sigma <= 0:
        raise ValueError(f"kernel size {kernel_size} gives non-positive sigma")
    a, b = _binary(e1), _binary(e2)
    n = max(a.shape[0], b.shape[0])
    pa = np.zeros((n, n))
    pb = np.zeros((n, n))
    pa[: a.shape[0], : a.shape[1]] = a
    pb[: b.shape[0], : b.shape[1]] = b
    d2 = float(np.sum((pa - pb) ** 2))
    return math.exp(-d2 / (2 * sigma * sigma))


def type_adjacency(sg: BehaviorSubgraph, meta_rule: MetaRule, space: AttributeSpace) -> np.ndarray:
    """k x k adjacency with rows in the meta-rule's canonical node-type order."""
    types = meta_rule.node_types
    slot = {}
    for v in sg.nodes:
        t = meta_rule.nodes.get(space.field_name(v))
        slot[v] = types.index(t) if t is not None else None
    a = np.zeros((len(types), len(types)))
    for u, v, _ in sg.edges:
        if slot[u] is not None and slot[v] is not None:
            a[slot[u], slot[v]] = a[slot[v], slot[u]] = 1.0
    return a


def mean_ksi(left: Sequence[np.ndarray], right: Sequence[np.ndarray], kernel_size: float = 3) -> float:
    """Mean KSI over all pairs from two collections of adjacency matrices."""
    if not left or not right:
        raise EmptyInput("mean KSI of an empty collection")
    total = 0.0
    for a in left:
        for b in right:
            total += ksi(a, b, kernel_size)
    return total / (len(left) * len(right))


def random_graphs(n: int, count: int, p: float, seed: int) -> list[np.ndarray]:
    """Erdős–Rényi G(n, p) adjacency matrices."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        upper = np.triu(rng.random((n, n)) < p, 1).astype(float)
        out.append(upper + upper.T)
    return out


# ---------------------------------------------------------------------------
# orbits

def _classify(nodes: Sequence[int], adj: Sequence[set[int]]) -> list[int]:
    """Orbit of each node within the connected induced graphlet on ``nodes``."""
    members = set(nodes)
    deg = [len(adj[v] & members) for v in nodes]
    size = len(nodes)
    edges = sum(deg) // 2
    if size == 2:
        return [0, 0]
    if size == 3:
        return [3] * 3 if edges == 3 else [1 if d == 1 else 2 for d in deg]
    if edges == 3:
        if max(deg) == 3:
            return [7 if d == 3 else 6 for d in deg]
        return [4 if d == 1 else 5 for d in deg]
    if edges == 4:
        if max(deg) == 2:
            return [8] * 4
        return [{1: 9, 2: 10, 3: 11}[d] for d in deg]
    if edges == 5:
        return [12 if d == 2 else 13 for d in deg]
    return [14] * 4


def _connected_subsets(adj: Sequence[set[int]], max_size: int = 4):
    """Each connected vertex subset of size 2..max_size exactly once (ESU enumeration)."""
    n = len(adj)

    def extend(sub: list[int], ext: set[int], root: int):
        if len(sub) >= 2:
            yield sub
        if len(sub) == max_size:
            return
        ext = set(ext)
        while ext:
            w = ext.pop()
            nbhd = set().union(*(adj[u] for u in sub)) | set(sub)
            new_ext = ext | {x for x in adj[w] if x > root and x not in nbhd}
            yield from extend(sub + [w], new_ext, root)

    for v in range(n):
        yield from extend([v], {x for x in adj[v] if x > v}, v)


def orbit_counts(graph: LabeledGraph | np.ndarray) -> np.ndarray:
    """``(n, 15)`` matrix: how often each node touches each graphlet orbit."""
    adj = graph.adjacency_sets() if isinstance(graph, LabeledGraph) else _adj_from_matrix(graph)
    counts = np.zeros((len(adj), NUM_ORBITS), dtype=np.int64)
    for sub in _connected_subsets(adj):
        for v, orbit in zip(sub, _classify(sub, adj)):
            counts[v, orbit] += 1
    return counts


def _adj_from_matrix(a) -> list[set[int]]:
    a = _binary(a)
    return [set(np.flatnonzero(a[i]).tolist()) - {i} for i in range(a.shape[0])]


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def orbit_similarity(g1, g2, weights: Sequence[float] | None = None) -> float:
    """Weighted sum over orbits of the cosine between sorted, zero-padded per-node count sequences."""
    return signature_similarity(orbit_counts(g1), orbit_counts(g2), weights)


def signature_similarity(c1: np.ndarray, c2: np.ndarray, weights: Sequence[float] | None = None) -> float:
    w = np.full(NUM_ORBITS, 1.0 / NUM_ORBITS) if weights is None else np.asarray(weights, dtype=float)
    n = max(c1.shape[0], c2.shape[0])
    total = 0.0
    for i in range(NUM_ORBITS):
        a = np.zeros(n)
        b = np.zeros(n)
        a[: c1.shape[0]] = np.sort(c1[:, i])[::-1]
        b[: c2.shape[0]] = np.sort(c2[:, i])[::-1]
        total += w[i] * _cos(a, b)
    return float(total)


# ---------------------------------------------------------------------------
# canonical forms

@dataclass(frozen=True, order=True)
class CanonicalForm:
    labels: tuple[str, ...]
    edges: tuple[tuple[int, int, int], ...]


def _refine(g: LabeledGraph) -> list[int]:
    """Isomorphism-invariant colour classes by iterated neighbourhood refinement."""
    adj = [[] for _ in range(g.n)]
    for u, v, t in g.edges:
        adj[u].append((v, t))
        adj[v].append((u, t))
    rank = {lab: i for i, lab in enumerate(sorted(set(g.labels)))}
    colors = [rank[lab] for lab in g.labels]
    while True:
        sigs = [(colors[v], tuple(sorted((colors[w], t) for w, t in adj[v]))) for v in range(g.n)]
        order = {s: i for i, s in enumerate(sorted(set(sigs)))}
        new = [order[s] for s in sigs]
        if len(set(new)) == len(set(colors)):
            return new
        colors = new


def canonical_form(g: LabeledGraph) -> CanonicalForm:
    """Lexicographically smallest edge list over orderings consistent with the refined colours."""
    colors = _refine(g)
    classes: dict[int, list[int]] = {}
    for v, c in enumerate(colors):
        classes.setdefault(c, []).append(v)
    blocks = [classes[c] for c in sorted(classes)]
    labels = tuple(g.labels[b[0]] for b in blocks for _ in b)
    best = None
    for choice in product(*(permutations(b) for b in blocks)):
        order = [v for block in choice for v in block]
        pos = {v: i for i, v in enumerate(order)}
        edges = tuple(sorted((min(pos[u], pos[v]), max(pos[u], pos[v]), t) for u, v, t in g.edges))
        if best is None or edges < best:
            best = edges
    return CanonicalForm(labels, best if best is not None else ())


def novel_unique(generated: Sequence[LabeledGraph], training: Sequence[LabeledGraph],
                 valid: Callable[[LabeledGraph], bool] | None = None,
                 form: Callable[[LabeledGraph], CanonicalForm] = canonical_form) -> dict[str, float]:
    """``unique`` = distinct / generated; ``novel`` = distinct unseen in training / distinct.

    With ``valid`` only graphs passing it count as generated.
    """
    gen = [g for g in generated if valid is None or valid(g)]
    if not gen:
        raise EmptyInput("no generated graphs to score")
    forms = [form(g) for g in gen]
    distinct = set(forms)
    seen = {form(g) for g in training}
    return {
        "unique": len(distinct) / len(forms),
        "novel": len(distinct - seen) / len(distinct),
        "generated": len(forms),
        "distinct": len(distinct),
    }
