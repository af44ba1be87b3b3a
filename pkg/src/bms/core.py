"""Domain types shared by every pipeline.

An :class:`AttributeSpace` interns ``(field, value)`` pairs into dense global node
ids. A :class:`BehaviorSubgraph` is one behavior expressed over those ids, and a
:class:`HeteroGraph` accumulates many subgraphs into a weighted, typed,
undirected graph.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

from .errors import GraphError, MissingValue, NotFound

__all__ = [
    "AttributeToken",
    "AttributeSpace",
    "BehaviorRecord",
    "BehaviorSubgraph",
    "HeteroGraph",
    "normalize_token",
    "neighbors",
    "dumps_canonical",
]


def normalize_token(raw: Any) -> str:
    """Trim and case-fold a raw value. Idempotent."""
    if raw is None:
        return ""
    return str(raw).strip().casefold()


def dumps_canonical(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


@dataclass(frozen=True, order=True)
class AttributeToken:
    field_id: int
    value_token: str

    def __post_init__(self):
        if not self.value_token:
            raise MissingValue("empty value token")


class AttributeSpace:
    """Registry of attribute nodes with dense global ids.

    Ids are allocated in first-seen order by :meth:`intern`. Use
    :meth:`from_token_rows` when the id layout must not depend on record or
    shard order.
    """

    def __init__(self, fields: Iterable[str]):
        self.fields: list[str] = list(fields)
        self._field_index = {name: i for i, name in enumerate(self.fields)}
        if len(self._field_index) != len(self.fields):
            raise ValueError("duplicate field names")
        self.tokens: list[AttributeToken] = []
        self.counts: list[int] = []
        self._ids: dict[AttributeToken, int] = {}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        if not isinstance(other, AttributeSpace):
            return NotImplemented
        return (self.fields, self.tokens, self.counts) == (other.fields, other.tokens, other.counts)

    def field_id(self, name: str) -> int:
        try:
            return self._field_index[name]
        except KeyError:
            raise NotFound(f"unknown field {name!r}") from None

    def _key(self, field_id: int, raw_value: Any) -> AttributeToken:
        if not 0 <= field_id < len(self.fields):
            raise IndexError(f"field_id {field_id} out of range for {len(self.fields)} fields")
        token = normalize_token(raw_value)
        if not token:
            raise MissingValue(f"empty value for field {self.fields[field_id]!r}")
        return AttributeToken(field_id, token)

    def intern(self, field_id: int, raw_value: Any) -> int:
        key = self._key(field_id, raw_value)
        node = self._ids.get(key)
        if node is None:
            node = len(self.tokens)
            self._ids[key] = node
            self.tokens.append(key)
            self.counts.append(0)
        return node

    def lookup(self, field_id: int, raw_value: Any) -> int:
        key = self._key(field_id, raw_value)
        try:
            return self._ids[key]
        except KeyError:
            raise NotFound(f"{self.fields[field_id]}={key.value_token!r} not in space") from None

    def get(self, field_id: int, raw_value: Any) -> int | None:
        try:
            return self.lookup(field_id, raw_value)
        except (NotFound, MissingValue):
            return None

    def observe(self, node_ids: Iterable[int]) -> None:
        """Count one behavior containing each of ``node_ids`` (duplicates collapse)."""
        for node in set(node_ids):
            self.counts[node] += 1

    def field_of(self, node: int) -> int:
        return self.tokens[node].field_id

    def field_name(self, node: int) -> str:
        return self.fields[self.tokens[node].field_id]

    def label(self, node: int) -> str:
        tok = self.tokens[node]
        return f"{self.fields[tok.field_id]}={tok.value_token}"

    def ids_of_field(self, field_id: int) -> list[int]:
        return [i for i, t in enumerate(self.tokens) if t.field_id == field_id]

    @classmethod
    def from_token_rows(cls, fields: Iterable[str], rows: Iterable[Mapping[str, Any]]) -> "AttributeSpace":
        """Build a space whose ids are sorted by ``(field_id, token)``.

        ``rows`` maps field name to raw value (``None`` for missing). Counts are
        the number of rows containing each token. The result is independent of
        row order and of how rows were sharded.
        """
        space = cls(fields)
        rows = list(rows)
        keys = set()
        for row in rows:
            for name, raw in row.items():
                tok = normalize_token(raw)
                if tok:
                    keys.add(AttributeToken(space.field_id(name), tok))
        for key in sorted(keys):
            space.intern(key.field_id, key.value_token)
        for row in rows:
            ids = [space.lookup(space.field_id(n), v) for n, v in row.items() if normalize_token(v)]
            space.observe(ids)
        return space

    def to_dict(self) -> dict:
        return {
            "fields": list(self.fields),
            "tokens": [[t.field_id, t.value_token] for t in self.tokens],
            "counts": list(self.counts),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "AttributeSpace":
        space = cls(data["fields"])
        for (fid, tok), count in zip(data["tokens"], data["counts"]):
            node = space.intern(int(fid), tok)
            space.counts[node] = int(count)
        if len(space) != len(data["tokens"]):
            raise ValueError("duplicate tokens in serialized space")
        return space

    def dumps(self) -> str:
        return dumps_canonical(self.to_dict())

    @classmethod
    def loads(cls, text: str) -> "AttributeSpace":
        return cls.from_dict(json.loads(text))


@dataclass
class BehaviorRecord:
    record_id: str
    values: dict[str, Any]
    label: str | None = None

    def to_dict(self) -> dict:
        return {"record_id": self.record_id, "values": dict(self.values), "label": self.label}

    @classmethod
    def from_dict(cls, data: Mapping) -> "BehaviorRecord":
        return cls(str(data["record_id"]), dict(data["values"]), data.get("label"))


@dataclass
class BehaviorSubgraph:
    record_id: str
    nodes: tuple[int, ...]
    edges: tuple[tuple[int, int, int], ...] = ()
    label: str | None = None

    def __post_init__(self):
        self.nodes = tuple(int(n) for n in self.nodes)
        node_set = set(self.nodes)
        if len(node_set) != len(self.nodes):
            raise GraphError(f"duplicate nodes in behavior {self.record_id}")
        norm = []
        for u, v, t in self.edges:
            u, v = int(u), int(v)
            if u not in node_set or v not in node_set:
                raise GraphError(f"edge ({u},{v}) leaves behavior {self.record_id}")
            if u == v:
                raise GraphError("self-loop in behavior subgraph")
            norm.append((min(u, v), max(u, v), int(t)))
        self.edges = tuple(sorted(norm))

    def validate(self, space: AttributeSpace) -> None:
        for n in self.nodes:
            if not 0 <= n < len(space):
                raise GraphError(f"node {n} not in attribute space")

    def to_dict(self) -> dict:
        return {
            "record_id": self.record_id,
            "label": self.label,
            "nodes": list(self.nodes),
            "edges": [list(e) for e in self.edges],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "BehaviorSubgraph":
        return cls(str(data["record_id"]), tuple(data["nodes"]),
                   tuple(tuple(e) for e in data["edges"]), data.get("label"))


@dataclass
class HeteroGraph:
    """Undirected multigraph collapsed to weighted typed edges.

    ``edges`` maps ``(u, v, edge_type)`` with ``u < v`` to a positive integer
    multiplicity.
    """

    node_types: dict[int, str] = field(default_factory=dict)
    edges: dict[tuple[int, int, int], int] = field(default_factory=dict)
    adjacency: dict[int, set[int]] = field(default_factory=dict)

    def add_node(self, node: int, node_type: str = "") -> None:
        if node not in self.node_types:
            self.node_types[node] = node_type
            self.adjacency.setdefault(node, set())

    def add_edge(self, u: int, v: int, edge_type: int = 0, weight: int = 1) -> None:
        if u == v:
            raise GraphError(f"self-loop on node {u}")
        if weight < 1:
            raise GraphError("edge weight must be >= 1")
        for n in (u, v):
            if n not in self.node_types:
                raise GraphError(f"dangling edge endpoint {n}")
        key = (min(u, v), max(u, v), int(edge_type))
        self.edges[key] = self.edges.get(key, 0) + int(weight)
        self.adjacency[u].add(v)
        self.adjacency[v].add(u)

    @property
    def num_nodes(self) -> int:
        return len(self.node_types)

    def edge_types(self) -> list[int]:
        return sorted({t for _, _, t in self.edges})

    def total_weight(self) -> int:
        return sum(self.edges.values())

    def __eq__(self, other) -> bool:
        if not isinstance(other, HeteroGraph):
            return NotImplemented
        return self.node_types == other.node_types and self.edges == other.edges

    def to_dict(self) -> dict:
        return {
            "nodes": [[n, self.node_types[n]] for n in sorted(self.node_types)],
            "edges": [[u, v, t, w] for (u, v, t), w in sorted(self.edges.items())],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "HeteroGraph":
        g = cls()
        for n, typ in data["nodes"]:
            g.add_node(int(n), typ)
        for u, v, t, w in data["edges"]:
            g.add_edge(int(u), int(v), int(t), int(w))
        return g

    def dumps(self) -> str:
        return dumps_canonical(self.to_dict())

    @classmethod
    def loads(cls, text: str) -> "HeteroGraph":
        return cls.from_dict(json.loads(text))


def neighbors(graph: HeteroGraph, node: int, depth: int) -> dict[int, int]:
    """Breadth-first hop distances from ``node``, truncated at ``depth``."""
    if node not in graph.node_types:
        raise NotFound(f"node {node} not in graph")
    if depth < 1:
        raise ValueError("depth must be a positive integer")
    dist = {node: 0}
    queue = deque([node])
    while queue:
        u = queue.popleft()
        if dist[u] == depth:
            continue
        for v in sorted(graph.adjacency[u]):
            if v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist
