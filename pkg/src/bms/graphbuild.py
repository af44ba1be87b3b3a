"""Meta-rules, per-behavior subgraphs, graph accumulation and export."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from itertools import combinations
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import yaml

from .core import (
    AttributeSpace,
    BehaviorRecord,
    BehaviorSubgraph,
    HeteroGraph,
    dumps_canonical,
    neighbors,
    normalize_token,
)
from .errors import DataError, RuleError

__all__ = [
    "EdgeSpec",
    "MetaRule",
    "VisPayload",
    "load_meta_rule",
    "build_subgraph",
    "build_subgraphs",
    "accumulate",
    "export_dot",
    "export_vis",
]


@dataclass(frozen=True)
class EdgeSpec:
    a: str
    b: str
    name: str


@dataclass
class MetaRule:
    """Which fields become nodes and which node-type pairs become edges.

    With ``clique`` set and no explicit edges, every pair of present attributes
    is connected under the single edge type ``clique_type``.
    """

    nodes: dict[str, str]
    edges: list[EdgeSpec] = field(default_factory=list)
    clique: bool = False
    clique_type: str = "co"
    name: str = ""

    def __post_init__(self):
        declared = set(self.nodes.values())
        for e in self.edges:
            for t in (e.a, e.b):
                if t not in declared:
                    raise RuleError(f"edge {e.name!r} references undeclared node type {t!r}")
        names = [e.name for e in self.edges]
        if len(set(names)) != len(names):
            raise RuleError("duplicate edge type names")
        if not self.edges and not self.clique:
            raise RuleError("meta-rule has neither edges nor clique")

    @property
    def node_types(self) -> list[str]:
        """Distinct node types in declaration order (the canonical type order)."""
        seen: dict[str, None] = {}
        for t in self.nodes.values():
            seen.setdefault(t, None)
        return list(seen)

    @property
    def edge_type_names(self) -> list[str]:
        if self.edges:
            return [e.name for e in self.edges]
        return [self.clique_type]

    @property
    def num_relations(self) -> int:
        return len(self.edge_type_names)

    def licensed(self) -> dict[frozenset, list[int]]:
        """Unordered node-type pair -> edge type ids."""
        out: dict[frozenset, list[int]] = {}
        if self.edges:
            for i, e in enumerate(self.edges):
                out.setdefault(frozenset((e.a, e.b)), []).append(i)
        return out

    def check_space(self, space: AttributeSpace) -> None:
        for f in self.nodes:
            if f not in space.fields:
                raise RuleError(f"meta-rule field {f!r} is not in the attribute space")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "nodes": [{"field": f, "type": t} for f, t in self.nodes.items()],
            "edges": [{"a": e.a, "b": e.b, "type": e.name} for e in self.edges],
            "clique": self.clique,
            "clique_type": self.clique_type,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "MetaRule":
        raw_nodes = data["nodes"]
        nodes: dict[str, str] = {}
        for item in raw_nodes:
            if isinstance(item, str):
                nodes[item] = item
            else:
                nodes[item["field"]] = item.get("type", item["field"])
        edges = [EdgeSpec(e["a"], e["b"], e["type"]) for e in data.get("edges") or []]
        return cls(nodes, edges, bool(data.get("clique", False)), data.get("clique_type", "co"), data.get("name", ""))

    @classmethod
    def clique_over(cls, fields: Iterable[str], name: str = "clique") -> "MetaRule":
        return cls({f: f for f in fields}, [], True, name=name)


def load_meta_rule(name_or_path: str | Path) -> MetaRule:
    path = Path(name_or_path)
    if path.suffix in (".yaml", ".yml", ".json") and path.exists():
        text = path.read_text(encoding="utf-8")
    else:
        try:
            text = (resources.files("bms") / "configs" / "rules" / f"{name_or_path}.yaml").read_text(encoding="utf-8")
        except FileNotFoundError:
            raise RuleError(f"no shipped meta-rule named {name_or_path!r}") from None
    return MetaRule.from_dict(yaml.safe_load(text))


def _record_tokens(record: BehaviorRecord | Mapping[str, Any], schema) -> Mapping[str, Any]:
    if schema is not None:
        return schema.tokens(record)
    if isinstance(record, BehaviorRecord):
        return record.values
    return record


def build_subgraph(record: BehaviorRecord | Mapping[str, Any], meta_rule: MetaRule, space: AttributeSpace,
                   schema=None, observe: bool = True) -> BehaviorSubgraph:
    """Concretize one behavior.

    Tokens come from ``schema.tokens(record)`` when a schema is given, else from
    the record's values read as already-tokenized field values. Missing values
    produce no node. New tokens are interned; ``observe`` bumps occurrence
    counts once per token.
    """
    meta_rule.check_space(space)
    values = _record_tokens(record, schema)
    typed: list[tuple[int, str]] = []
    for fname, ntype in meta_rule.nodes.items():
        raw = values.get(fname)
        if raw is None or not normalize_token(raw):
            continue
        typed.append((space.intern(space.field_id(fname), raw), ntype))
    typed.sort(key=lambda nt: space.tokens[nt[0]])
    nodes = tuple(n for n, _ in typed)
    edges: set[tuple[int, int, int]] = set()
    if meta_rule.edges:
        lic = meta_rule.licensed()
        for (u, tu), (v, tv) in combinations(typed, 2):
            for etype in lic.get(frozenset((tu, tv)), ()):
                edges.add((min(u, v), max(u, v), etype))
    else:
        for u, v in combinations(nodes, 2):
            edges.add((min(u, v), max(u, v), 0))
    if observe:
        space.observe(nodes)
    rid = record.record_id if isinstance(record, BehaviorRecord) else str(values.get("record_id", ""))
    label = record.label if isinstance(record, BehaviorRecord) else None
    return BehaviorSubgraph(rid, nodes, tuple(sorted(edges)), label)


def build_subgraphs(records: Sequence[BehaviorRecord], meta_rule: MetaRule, space: AttributeSpace,
                    schema=None, observe: bool = False) -> list[BehaviorSubgraph]:
    return [build_subgraph(r, meta_rule, space, schema, observe) for r in records]


def accumulate(subgraphs: Iterable[BehaviorSubgraph], space: AttributeSpace | None = None,
               meta_rule: MetaRule | None = None) -> HeteroGraph:
    """Union of behavior subgraphs; each edge weight counts the behaviors containing it."""
    graph = HeteroGraph()
    subgraphs = list(subgraphs)
    node_type = {}
    if space is not None:
        for sg in subgraphs:
            for n in sg.nodes:
                fname = space.field_name(n)
                node_type[n] = meta_rule.nodes.get(fname, fname) if meta_rule else fname
    for n in sorted({n for sg in subgraphs for n in sg.nodes}):
        graph.add_node(n, node_type.get(n, ""))
    for sg in subgraphs:
        for u, v, t in sg.edges:
            graph.add_edge(u, v, t)
    return graph


@dataclass
class VisPayload:
    """Nodes sized by occurrence count and colored by hop distance from a focal behavior."""

    focal: str
    depth: int
    nodes: list[dict]
    edges: list[list[int]]

    def colored(self) -> list[dict]:
        return [n for n in self.nodes if n["depth"] is not None]

    def to_dict(self) -> dict:
        return {"focal": self.focal, "depth": self.depth, "nodes": self.nodes, "edges": self.edges}

    @classmethod
    def from_dict(cls, data: Mapping) -> "VisPayload":
        return cls(data["focal"], int(data["depth"]), list(data["nodes"]), [list(e) for e in data["edges"]])

    def dumps(self) -> str:
        return dumps_canonical(self.to_dict())


def export_vis(graph: HeteroGraph, focal: BehaviorSubgraph, depth: int, space: AttributeSpace) -> VisPayload:
    if not focal.nodes:
        raise DataError(f"focal behavior {focal.record_id} has no nodes")
    dist: dict[int, int] = {}
    for n in focal.nodes:
        if n not in graph.node_types:
            raise DataError(f"focal node {n} is not in the graph")
        for m, d in neighbors(graph, n, depth).items():
            if d < dist.get(m, depth + 1):
                dist[m] = d
    nodes = [
        {"id": n, "label": space.label(n), "type": graph.node_types[n], "size": space.counts[n], "depth": dist.get(n)}
        for n in sorted(graph.node_types)
    ]
    edges = [[u, v, t, w] for (u, v, t), w in sorted(graph.edges.items())]
    return VisPayload(focal.record_id, depth, nodes, edges)


def _quote(text: str) -> str:
    return '"' + str(text).replace("\\", "\\\\").replace('"', '\\"') + '"'


def _gray(depth: int | None, max_depth: int) -> str:
    if depth is None:
        return "#dddddd"
    level = int(40 + 160 * depth / max(1, max_depth))
    return f"#{level:02x}{level:02x}ff"


def export_dot(obj: HeteroGraph | VisPayload, path: str | Path | None = None,
               space: AttributeSpace | None = None) -> str:
    """Write an undirected DOT graph; returns the DOT text."""
    lines = ["graph bms {"]
    if isinstance(obj, VisPayload):
        for n in obj.nodes:
            lines.append(
                f"  n{n['id']} [label={_quote(n['label'])}, width={0.2 + 0.05 * n['size']:.3f}, "
                f"style=filled, fillcolor={_quote(_gray(n['depth'], obj.depth))}];"
            )
        for u, v, t, w in obj.edges:
            lines.append(f"  n{u} -- n{v} [type={t}, weight={w}];")
    else:
        for n in sorted(obj.node_types):
            label = space.label(n) if space is not None else str(n)
            lines.append(f"  n{n} [label={_quote(label)}, type={_quote(obj.node_types[n])}];")
        for (u, v, t), w in sorted(obj.edges.items()):
            lines.append(f"  n{u} -- n{v} [type={t}, weight={w}];")
    lines.append("}")
    text = "\n".join(lines) + "\n"
    if path is not None:
        try:
            Path(path).write_text(text, encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot write {path}: {exc}") from exc
    return text


def save_graph(path: str | Path, space: AttributeSpace, graph: HeteroGraph,
               subgraphs: Sequence[BehaviorSubgraph] = ()) -> None:
    payload = {
        "space": space.to_dict(),
        "graph": graph.to_dict(),
        "behaviors": [sg.to_dict() for sg in subgraphs],
    }
    Path(path).write_text(dumps_canonical(payload), encoding="utf-8")


def load_graph(path: str | Path) -> tuple[AttributeSpace, HeteroGraph, list[BehaviorSubgraph]]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return (
        AttributeSpace.from_dict(data["space"]),
        HeteroGraph.from_dict(data["graph"]),
        [BehaviorSubgraph.from_dict(b) for b in data.get("behaviors", [])],
    )
