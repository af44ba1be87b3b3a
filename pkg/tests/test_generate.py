import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import roc_auc_score

from bms import generate as gen
from bms.core import BehaviorSubgraph
from bms.errors import InfeasibleConfig
from bms.graphbuild import build_subgraph, load_meta_rule
from bms.ingest import build_space, load_schema, synth_fraud

SMALL = gen.GenConfig(d0=16, hidden=16, latent=8, dec_hidden=32, epochs=30, lr=5e-3)


@pytest.fixture(scope="module")
def fraud():
    schema = load_schema("fraud")
    rule = load_meta_rule("fraud_core")
    records = synth_fraud(300, seed=1)
    space = build_space(records, schema)
    sgs = [build_subgraph(r, rule, space, schema, observe=False) for r in records if r.label == "1"]
    return schema, rule, records, space, sgs


def _zero_decoder(model):
    for name in ("dec", "adj", "node", "edge"):
        model.params[f"{name}.W"].data[:] = 0.0
        model.params[f"{name}.b"].data[:] = 0.0


def test_zero_logits_decode_to_uniform(fraud):
    _, rule, _, space, _ = fraud
    model = gen.GraphVAE.create(space, rule, SMALL)
    _zero_decoder(model)
    prob = model.decode(np.zeros(SMALL.latent))
    k = len(rule.node_types)
    assert prob.adj.shape == (k, k) and np.all(prob.adj == 0.5)
    np.testing.assert_allclose(prob.node, 1.0 / len(space))
    off = ~np.eye(k, dtype=bool)
    np.testing.assert_allclose(prob.edge[off], 1.0 / rule.num_relations)


def test_decoded_graph_is_symmetric_with_valid_distributions(fraud, rng):
    _, rule, _, space, _ = fraud
    model = gen.GraphVAE.create(space, rule, SMALL, seed=4)
    prob = model.decode(rng.standard_normal(SMALL.latent))
    assert np.array_equal(prob.adj, prob.adj.T)
    assert np.array_equal(prob.edge, prob.edge.transpose(1, 0, 2))
    np.testing.assert_allclose(prob.node.sum(axis=1), 1.0)
    assert np.all((prob.adj > 0) & (prob.adj < 1))


def test_identity_matching(fraud):
    _, rule, _, space, sgs = fraud
    model = gen.GraphVAE.create(space, rule, SMALL)
    x = model.match(sgs[0], space)
    assert not x.fallback
    assert x.X.shape == (len(rule.node_types), len(sgs[0].nodes))
    assert x.X.sum(axis=0).tolist() == [1.0] * len(sgs[0].nodes)
    for v, s in zip(sgs[0].nodes, x.slots):
        assert rule.node_types[s] == rule.nodes[space.field_name(v)]


@settings(max_examples=40)
@given(st.integers(1, 4), st.integers(0, 2), st.integers(0, 10**6))
def test_assignment_is_optimal_against_brute_force(n, extra, seed):
    sim = np.random.default_rng(seed).random((n, n + extra))
    got = gen.assign_max_similarity(sim)
    assert len(set(got)) == n
    best = max(sum(sim[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n + extra), n))
    assert sum(sim[i, got[i]] for i in range(n)) == pytest.approx(best)


def test_assignment_two_by_three_example():
    sim = np.array([[0.9, 0.8, 0.0], [0.85, 0.1, 0.0]])
    assert gen.assign_max_similarity(sim) == [1, 0]


def test_recon_loss_uniform_two_slot_example():
    prob = gen.ProbGraph(np.full((2, 2), 0.5), np.ones((2, 1)), np.ones((2, 2, 1)))
    a = np.ones((2, 2))
    f = np.ones((2, 1))
    e = np.zeros((2, 2, 1))
    e[0, 1, 0] = e[1, 0, 0] = 1.0
    assert gen.recon_loss(a, f, e, prob) == pytest.approx(2 * math.log(2))


def test_recon_loss_is_zero_for_perfect_reconstruction():
    k, v = 3, 4
    a = np.ones((k, k))
    f = np.eye(k, v)
    e = np.zeros((k, k, 2))
    e[..., 1] = 1.0
    prob = gen.ProbGraph(a.copy(), f.copy(), e.copy())
    assert gen.recon_loss(a, f, e, prob) == pytest.approx(0.0, abs=1e-9)


def test_kl_examples():
    assert gen.kl_divergence(np.zeros(5), np.zeros(5)) == 0.0
    assert gen.kl_divergence(np.array([1.0]), np.array([0.0])) == pytest.approx(0.5)


def test_edge_term_skipped_for_edgeless_graph():
    prob = gen.ProbGraph(np.full((2, 2), 0.5), np.ones((2, 1)), np.ones((2, 2, 1)))
    flags = {}
    gen.recon_loss(np.diag([1.0, 0.0]), np.ones((1, 1)), np.zeros((1, 1, 1)), prob, flags=flags)
    assert flags == {"edge_term_skipped": True}


def _closed_form_elbo(model, sgs, space, eps):
    total = 0.0
    c = model.config
    for sg, e in zip(sgs, eps):
        mu, logvar, z = (t.data[0] for t in model.encode_tensors([sg], e[None, :]))
        prob = model.decode(z)
        x = model.match(sg, space, prob)
        a, f, ed = gen.graph_arrays(sg, model, space, x)
        total += gen.elbo_loss(a, f, ed, prob, mu, logvar, x.X, (c.lambda_a, c.lambda_f, c.lambda_e))
    return total / len(sgs)


@pytest.mark.parametrize("lambdas", [(1.0, 1.0, 1.0), (0.5, 2.0, 0.25)])
def test_elbo_tensor_matches_closed_form(fraud, rng, lambdas):
    _, rule, _, space, sgs = fraud
    cfg = gen.GenConfig(**{**SMALL.to_dict(), "lambda_a": lambdas[0], "lambda_f": lambdas[1], "lambda_e": lambdas[2]})
    model = gen.GraphVAE.create(space, rule, cfg, seed=2)
    batch = sgs[:6] + [BehaviorSubgraph("solo", sgs[0].nodes[:1])]
    eps = rng.standard_normal((len(batch), cfg.latent))
    got = model.elbo_tensor(batch, space, eps).item()
    assert got == pytest.approx(_closed_form_elbo(model, batch, space, eps), rel=1e-10)


def test_encoder_is_invariant_to_node_order(fraud):
    _, rule, _, space, sgs = fraud
    model = gen.GraphVAE.create(space, rule, SMALL, seed=3)
    sg = sgs[0]
    flipped = BehaviorSubgraph(sg.record_id, tuple(reversed(sg.nodes)), tuple(reversed(sg.edges)))
    a = model.encode(sg, seed=1)
    b = model.encode(flipped, seed=1)
    np.testing.assert_allclose(a.mu, b.mu, atol=1e-12)
    np.testing.assert_allclose(a.logvar, b.logvar, atol=1e-12)


def test_training_lowers_elbo_and_sampling_is_deterministic(fraud):
    _, rule, _, space, sgs = fraud
    res = gen.train_vae(sgs, space, rule, SMALL, seed=0)
    assert res.loss_curve[-1] < res.loss_curve[0]
    a = gen.sample(res.model, space, 10, seed=5)
    b = gen.sample(res.model, space, 10, seed=5)
    assert [g.nodes for g in a.graphs] == [g.nodes for g in b.graphs]
    assert a.attempts == b.attempts
    for g in a.graphs:
        assert gen.check_structure(g, rule, space) is None


def test_threshold_one_rejects_everything(fraud):
    _, rule, _, space, _ = fraud
    model = gen.GraphVAE.create(space, rule, SMALL)
    rep = gen.sample(model, space, 5, seed=0, threshold=1.0, max_attempts=30)
    assert rep.graphs == [] and rep.rejection_rate == 1.0 and not rep.complete


def test_check_structure_reasons(fraud):
    _, rule, _, space, sgs = fraud
    sg = sgs[0]
    assert gen.check_structure(sg, rule, space) is None
    assert gen.check_structure(BehaviorSubgraph("x", sg.nodes[:1]), rule, space) == "fewer than two nodes"
    assert gen.check_structure(BehaviorSubgraph("x", sg.nodes[:2]), rule, space) == "disconnected"


def test_model_round_trip(fraud, tmp_path, rng):
    _, rule, _, space, _ = fraud
    model = gen.GraphVAE.create(space, rule, SMALL, seed=6)
    gen.save_model(model, space, tmp_path / "m")
    back, space2 = gen.load_model(tmp_path / "m")
    assert space2 == space
    z = rng.standard_normal(SMALL.latent)
    assert np.array_equal(back.decode(z).adj, model.decode(z).adj)


@given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=2, max_size=40))
def test_auc_matches_sklearn(pairs):
    scores = [round(s, 2) for s, _ in pairs]
    labels = [y for _, y in pairs]
    if len(set(labels)) < 2:
        return
    assert gen.auc(scores, labels) == pytest.approx(roc_auc_score(labels, scores))


def test_auc_random_scores_near_half():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 2, 20000)
    assert abs(gen.auc(rng.random(20000), labels) - 0.5) < 0.02


def test_prevented_loss_and_bucket_floor():
    assert gen.prevented_loss([True, True, False], [1, 0, 1], [10.0, 20.0, 30.0]) == 10.0
    assert gen.bucket_floor("e3") == 1000.0
    assert gen.bucket_floor("zero") == 0.0


def test_hiding_all_training_frauds_is_infeasible(fraud):
    schema, rule, records, _, _ = fraud
    with pytest.raises(InfeasibleConfig):
        gen.harness_run(records, schema, rule, "S1", 1.0, 0, gen.HarnessConfig())
