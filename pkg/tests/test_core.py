import json
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from bms.core import AttributeSpace, BehaviorSubgraph, HeteroGraph, neighbors, normalize_token
from bms.errors import GraphError, MissingValue, NotFound


def test_intern_same_value_twice_gives_same_id():
    space = AttributeSpace(["Vict Sex"])
    assert space.intern(0, "F") == space.intern(0, "F")


def test_first_intern_into_empty_space_is_id_zero():
    space = AttributeSpace(["Month_OCC"])
    assert space.intern(0, "12") == 0


def test_intern_normalizes_whitespace_and_case():
    space = AttributeSpace(["Vict Sex"])
    assert space.intern(0, " f ") == space.intern(0, "F")
    assert len(space) == 1


def test_empty_value_raises_missing_value():
    space = AttributeSpace(["a"])
    with pytest.raises(MissingValue):
        space.intern(0, "   ")


def test_lookup_does_not_change_counts():
    space = AttributeSpace(["a"])
    node = space.intern(0, "x")
    space.lookup(0, "x")
    space.get(0, "x")
    assert space.counts[node] == 0
    space.observe([node, node])
    assert space.counts[node] == 1


def test_lookup_unknown_raises():
    space = AttributeSpace(["a"])
    with pytest.raises(NotFound):
        space.lookup(0, "nope")
    assert space.get(0, "nope") is None


@given(st.text(max_size=12))
def test_normalize_is_idempotent(raw):
    once = normalize_token(raw)
    assert normalize_token(once) == once


@given(st.lists(st.tuples(st.integers(0, 2), st.sampled_from(["a", "B", " b", "c ", "D", "d"])), max_size=30))
def test_interning_is_a_bijection_onto_dense_ids(pairs):
    space = AttributeSpace(["f0", "f1", "f2"])
    ids = [space.intern(f, v) for f, v in pairs]
    assert sorted(set(ids)) == list(range(len(space)))
    keys = {(f, normalize_token(v)) for f, v in pairs}
    assert len(keys) == len(space)
    for (f, v), i in zip(pairs, ids):
        assert space.tokens[i].field_id == f and space.tokens[i].value_token == normalize_token(v)


def test_from_token_rows_is_order_independent():
    rows = [{"a": "x", "b": "1"}, {"a": "y", "b": None}, {"a": "x", "b": "2"}]
    s1 = AttributeSpace.from_token_rows(["a", "b"], rows)
    s2 = AttributeSpace.from_token_rows(["a", "b"], list(reversed(rows)))
    assert s1.dumps() == s2.dumps()
    assert s1.counts[s1.lookup(0, "x")] == 2


def test_space_json_round_trip():
    space = AttributeSpace.from_token_rows(["a", "b"], [{"a": "x", "b": "é"}, {"a": "y", "b": "é"}])
    back = AttributeSpace.loads(space.dumps())
    assert back == space
    assert back.dumps() == space.dumps()


def _path_graph(n):
    g = HeteroGraph()
    for i in range(n):
        g.add_node(i, "t")
    for i in range(n - 1):
        g.add_edge(i, i + 1)
    return g


def test_neighbors_on_path():
    assert neighbors(_path_graph(3), 0, 2) == {0: 0, 1: 1, 2: 2}


def test_neighbors_isolated_node():
    g = HeteroGraph()
    g.add_node(7, "t")
    assert neighbors(g, 7, 6) == {7: 0}


def test_neighbors_triangle_depth_one():
    g = _path_graph(3)
    g.add_edge(0, 2)
    assert neighbors(g, 0, 1) == {0: 0, 1: 1, 2: 1}


def test_neighbors_unknown_node():
    with pytest.raises(NotFound):
        neighbors(_path_graph(2), 5, 1)


def test_self_loop_rejected():
    g = _path_graph(2)
    with pytest.raises(GraphError):
        g.add_edge(1, 1)


def test_dangling_endpoint_rejected():
    g = _path_graph(2)
    with pytest.raises(GraphError):
        g.add_edge(0, 9)


def test_edge_weights_accumulate_and_adjacency_is_symmetric():
    g = _path_graph(3)
    g.add_edge(1, 0)
    assert g.edges[(0, 1, 0)] == 2
    assert g.total_weight() == 3
    for u, nbrs in g.adjacency.items():
        for v in nbrs:
            assert u in g.adjacency[v]


@given(st.integers(2, 9), st.data())
def test_bfs_distances_satisfy_triangle_inequality(n, data):
    seed = data.draw(st.integers(0, 10**6))
    rnd = random.Random(seed)
    g = HeteroGraph()
    for i in range(n):
        g.add_node(i, "t")
    for i in range(n):
        for j in range(i + 1, n):
            if rnd.random() < 0.35:
                g.add_edge(i, j)
    depth = n
    dist = {u: neighbors(g, u, depth) for u in range(n)}
    for u in range(n):
        for v in dist[u]:
            for w in dist[v]:
                if w in dist[u]:
                    assert dist[u][w] <= dist[u][v] + dist[v][w]


def test_heterograph_json_round_trip():
    g = _path_graph(4)
    g.add_edge(0, 3, 2, weight=5)
    back = HeteroGraph.loads(g.dumps())
    assert back == g
    assert json.loads(back.dumps()) == json.loads(g.dumps())


def test_subgraph_rejects_edges_outside_node_set():
    with pytest.raises(GraphError):
        BehaviorSubgraph("r", (0, 1), ((0, 2, 0),))


def test_subgraph_validate_against_space():
    space = AttributeSpace(["a"])
    space.intern(0, "x")
    BehaviorSubgraph("r", (0,)).validate(space)
    with pytest.raises(GraphError):
        BehaviorSubgraph("r", (3,)).validate(space)
