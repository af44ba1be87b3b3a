import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bms.errors import EmptyHistory, InvalidK
from bms.predict import (
    EmbeddingScorer,
    Interaction,
    InteractionLog,
    ItemKNNScorer,
    PopScorer,
    click_classes,
    entropy,
    entropy_curve,
    equal_count_checkpoints,
    evaluate,
    leave_last_out,
    rank_items,
    ranking_metrics,
    simulate_converging,
)


def test_entropy_examples():
    assert entropy(["a"] * 10) == 0.0
    assert entropy(["a", "b"]) == pytest.approx(1.0)
    assert entropy(list("abcd")) == pytest.approx(2.0)
    assert entropy(["a", "a", "b", "b", "c", "c", "d", "d"]) == pytest.approx(2.0)


def test_entropy_empty_history():
    with pytest.raises(EmptyHistory):
        entropy([])


@given(st.lists(st.sampled_from("abcdefgh"), min_size=1, max_size=50))
def test_entropy_bounds(hist):
    s = entropy(hist)
    assert -1e-12 <= s <= math.log2(len(set(hist))) + 1e-12


@given(st.lists(st.sampled_from("abcde"), min_size=1, max_size=30))
def test_entropy_permutation_invariant(hist):
    assert entropy(hist) == pytest.approx(entropy(sorted(hist)), abs=1e-12)


def test_entropy_curve_by_count():
    curve = entropy_curve({"u": ["a", "b", "a", "a"], "v": ["a"]}, checkpoints=[1, 2, 4])
    assert curve.checkpoints == [1, 2, 4]
    assert curve.users == [2, 2, 2]
    assert curve.means[0] == 0.0
    assert curve.means[1] == pytest.approx(0.5)
    assert curve.means[2] == pytest.approx(entropy(["a", "b", "a", "a"]) / 2)


def test_entropy_curve_by_time_omits_empty_checkpoint():
    log = InteractionLog([Interaction("u", "a", 1, 5), Interaction("u", "b", 2, 9), Interaction("v", "a", 1, None)])
    curve = entropy_curve(log, checkpoints=[1, 6, 10], kind="time")
    assert curve.omitted == [1]
    assert curve.checkpoints == [6, 10]
    assert curve.means == [0.0, pytest.approx(1.0)]


def test_entropy_curve_rejects_unsorted_checkpoints():
    with pytest.raises(ValueError):
        entropy_curve({"u": ["a"]}, checkpoints=[2, 1])


def test_converging_simulation_is_monotone_after_burn_in_and_matches_counter():
    hist = simulate_converging(40, 50, 20, 120, seed=3)
    checkpoints = equal_count_checkpoints(120, 10)
    curve = entropy_curve(hist, checkpoints=checkpoints)
    tail = [m for t, m in zip(curve.checkpoints, curve.means) if t >= 40]
    assert all(b <= a + 1e-12 for a, b in zip(tail, tail[1:]))
    for t, m in zip(curve.checkpoints, curve.means):
        oracle = []
        for h in hist.values():
            counts = Counter(h[:t])
            n = sum(counts.values())
            oracle.append(-sum(c / n * math.log2(c / n) for c in counts.values()))
        assert m == pytest.approx(sum(oracle) / len(oracle), abs=1e-12)


def test_pop_scorer_example():
    s = PopScorer({"u": ["a", "a", "b"], "v": ["a"]})
    assert s.scores("u", ["a", "b", "c"]).tolist() == [3.0, 1.0, 0.0]


def test_itemknn_example():
    s = ItemKNNScorer({"u": ["a", "b"], "v": ["a", "b"], "w": ["c"]})
    assert s.similarity("a", "b") == pytest.approx(1.0)
    assert s.similarity("a", "c") == 0.0
    assert s.scores("u", ["b", "c"]).tolist() == [pytest.approx(1.0), 0.0]


def test_itemknn_cold_user_falls_back_to_popularity():
    s = ItemKNNScorer({"u": ["a", "a", "b"]})
    assert s.scores("nobody", ["a", "b"]).tolist() == [2.0, 1.0]
    assert s.cold_users == 1


def test_embedding_scorer_orthogonal_item_scores_zero():
    s = EmbeddingScorer({"u": np.array([1.0, 0.0])}, {"a": np.array([0.0, 5.0]), "b": np.array([2.0, 0.0])})
    assert s.scores("u", ["a", "b"]).tolist() == [0.0, 2.0]


def test_rank_items_tie_break_and_invalid_k():
    s = PopScorer({"u": ["b", "a"]})
    assert rank_items(s, "u", ["b", "a", "c"], 2) == ["a", "b"]
    with pytest.raises(InvalidK):
        rank_items(s, "u", ["a"], 0)


def test_metrics_hit_at_first_position():
    m = ranking_metrics([["x", "y"]], ["x"], k=10)
    assert m["hit@10"] == 1.0 and m["mrr@10"] == 1.0 and m["ndcg@10"] == 1.0 and m["precision@10"] == 0.1


def test_metrics_hit_at_third_position():
    m = ranking_metrics([["p", "q", "x"]], ["x"], k=10)
    assert m["mrr@10"] == pytest.approx(1 / 3)
    assert m["ndcg@10"] == pytest.approx(0.5)
    assert m["recall@10"] == 1.0


def test_metrics_miss():
    m = ranking_metrics([["a", "b"]], ["x"], k=10)
    assert all(v == 0.0 for v in m.values())


def test_metrics_invalid_k():
    with pytest.raises(InvalidK):
        ranking_metrics([["a"]], ["a"], k=0)


def _oracle(recs, truth, k):
    rows = []
    for r, t in zip(recs, truth):
        top = r[:k]
        p = top.index(t) + 1 if t in top else None
        rows.append((p is not None, 1 / p if p else 0.0, 1 / math.log2(p + 1) if p else 0.0))
    n = len(rows)
    return {"hit": sum(a for a, _, _ in rows) / n, "mrr": sum(b for _, b, _ in rows) / n,
            "ndcg": sum(c for _, _, c in rows) / n}


def test_metrics_five_users_against_brute_force():
    recs = [list("abcde"), list("edcba"), list("xyzab"), list("qrstu"), list("baxyz")]
    truth = ["c", "a", "a", "z", "x"]
    for k in (1, 3, 5):
        m = ranking_metrics(recs, truth, k)
        o = _oracle(recs, truth, k)
        assert m[f"hit@{k}"] == pytest.approx(o["hit"])
        assert m[f"mrr@{k}"] == pytest.approx(o["mrr"])
        assert m[f"ndcg@{k}"] == pytest.approx(o["ndcg"])


@given(st.lists(st.tuples(st.permutations(list("abcdefgh")), st.sampled_from("abcdefgh")), min_size=1, max_size=10),
       st.integers(1, 8))
def test_metric_invariants(cases, k):
    recs, truth = [list(r) for r, _ in cases], [t for _, t in cases]
    m = ranking_metrics(recs, truth, k)
    for v in m.values():
        assert 0.0 <= v <= 1.0
    assert m[f"mrr@{k}"] <= m[f"ndcg@{k}"] + 1e-12
    assert m[f"ndcg@{k}"] <= m[f"hit@{k}"] + 1e-12
    assert m[f"recall@{k}"] == pytest.approx(m[f"hit@{k}"])
    if k < 8:
        assert m[f"hit@{k}"] <= ranking_metrics(recs, truth, k + 1)[f"hit@{k + 1}"]


def test_leave_last_out_holds_out_final_click():
    hist = {"u": ["a", "b", "c"], "v": ["a"], "w": ["b", "d"]}
    train, cases = leave_last_out(hist, n_negatives=2, seed=0, items=list("abcdefg"))
    assert train == {"u": ["a", "b"], "v": ["a"], "w": ["b"]}
    assert [c.user for c in cases] == ["u", "w"]
    for c in cases:
        assert c.truth in c.candidates and len(c.candidates) == 3
        assert not (set(c.candidates) - {c.truth}) & set(hist[c.user])


def test_evaluate_reports_cold_users():
    train, cases = leave_last_out({"u": ["a", "b"], "v": ["c", "a"]}, n_negatives=5, items=list("abcdef"))
    out = evaluate(PopScorer(train), cases, k=2)
    assert out["users"] == 2 and "hit@2" in out


def test_click_classes():
    assert click_classes([0, 5, 10, 20], thresholds=[1, 6, 11]) == [0, 1, 2, 3]
    assert sorted(set(click_classes(list(range(1, 41))))) == [0, 1, 2, 3]


def test_interaction_log_round_trip(tmp_path):
    log = InteractionLog([Interaction("u", "a", 3, 4), Interaction("u", "b", 1, None)])
    log.write_csv(tmp_path / "log.csv")
    back = InteractionLog.read_csv(tmp_path / "log.csv")
    assert back.histories() == log.histories() == {"u": ["a"]}
