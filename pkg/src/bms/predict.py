"""Next-interaction prediction: interaction logs, scorers, ranking metrics, entropy."""

from __future__ import annotations

import csv
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import BehaviorRecord
from .errors import DataError, EmptyHistory, InvalidK

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Interaction:
    user: str
    item: str
    impression_ts: int
    click_ts: int | None = None

    @property
    def clicked(self) -> bool:
        return self.click_ts is not None


class InteractionLog:
    """Impression events; the clicked ones form each user's item history.

    Per-user histories are ordered by click time, then by position in the log.
    """

    def __init__(self, events: Iterable[Interaction]):
        self.events: list[Interaction] = list(events)
        for e in self.events:
            if e.click_ts is not None and e.click_ts < e.impression_ts:
                raise DataError(f"click before impression for user {e.user} item {e.item}")

    def __len__(self) -> int:
        return len(self.events)

    def histories(self) -> dict[str, list[str]]:
        keyed: dict[str, list[tuple[int, int, str]]] = {}
        for seq, e in enumerate(self.events):
            if e.clicked:
                keyed.setdefault(e.user, []).append((e.click_ts, seq, e.item))
        return {u: [item for _, _, item in sorted(rows)] for u, rows in sorted(keyed.items())}

    def click_times(self) -> dict[str, list[int]]:
        out: dict[str, list[tuple[int, int]]] = {}
        for seq, e in enumerate(self.events):
            if e.clicked:
                out.setdefault(e.user, []).append((e.click_ts, seq))
        return {u: [t for t, _ in sorted(rows)] for u, rows in sorted(out.items())}

    def items(self) -> list[str]:
        return sorted({e.item for e in self.events})

    @classmethod
    def from_histories(cls, histories: Mapping[str, Sequence[str]]) -> "InteractionLog":
        events = []
        for user in sorted(histories):
            for t, item in enumerate(histories[user], start=1):
                events.append(Interaction(user, item, t, t))
        return cls(events)

    @classmethod
    def from_records(cls, records: Iterable[BehaviorRecord], user: str = "user_id", item: str = "answer_id",
                     impression: str = "impression_timestamp", click: str = "click_timestamp") -> "InteractionLog":
        events = []
        for r in records:
            v = r.values
            click_ts = int(float(v[click])) if v.get(click) not in (None, "") else 0
            events.append(Interaction(str(v[user]), str(v[item]), int(float(v[impression])),
                                      click_ts if click_ts > 0 else None))
        return cls(events)

    @classmethod
    def read_csv(cls, path: str | Path) -> "InteractionLog":
        """Columns ``user,item,impression_ts,click_ts``; click_ts 0 means no click."""
        events = []
        try:
            with open(path, newline="", encoding="utf-8") as fh:
                reader = csv.DictReader(fh)
                need = {"user", "item", "impression_ts", "click_ts"}
                if reader.fieldnames is None or not need <= set(reader.fieldnames):
                    raise DataError(f"{path} needs columns {sorted(need)}")
                for row in reader:
                    try:
                        click = int(float(row["click_ts"] or 0))
                        events.append(Interaction(row["user"], row["item"], int(float(row["impression_ts"])),
                                                  click if click > 0 else None))
                    except ValueError as exc:
                        raise DataError(f"bad row in {path}: {row}") from exc
        except OSError as exc:
            raise DataError(f"cannot read {path}: {exc}") from exc
        return cls(events)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["user", "item", "impression_ts", "click_ts"])
            for e in self.events:
                w.writerow([e.user, e.item, e.impression_ts, e.click_ts or 0])


# ---------------------------------------------------------------------------
# entropy

def entropy(history: Sequence[str]) -> float:
    """Shannon entropy in bits of the empirical item distribution."""
    if not len(history):
        raise EmptyHistory("entropy of an empty history")
    n = len(history)
    return float(-sum((c / n) * math.log2(c / n) for c in Counter(history).values()))


@dataclass
class EntropyProfile:
    user: str
    values: list[float]
    lengths: list[int]


@dataclass
class EntropyCurve:
    checkpoints: list[int]
    means: list[float]
    users: list[int]
    omitted: list[int] = field(default_factory=list)
    profiles: list[EntropyProfile] = field(default_factory=list)

    def rows(self) -> list[tuple[int, float, int]]:
        return list(zip(self.checkpoints, self.means, self.users))


def equal_count_checkpoints(max_events: int, step: int) -> list[int]:
    if step < 1:
        raise ValueError("step must be >= 1")
    return list(range(step, max_events + 1, step))


def entropy_curve(log: InteractionLog | Mapping[str, Sequence[str]], users: Sequence[str] | None = None,
                  checkpoints: Sequence[int] = (), kind: str = "count") -> EntropyCurve:
    """Mean entropy over users at each checkpoint.

    ``count`` checkpoints are event-prefix lengths: a user's history at t is
    their first ``min(t, len)`` clicks. ``time`` checkpoints are timestamps:
    clicks at or before t. Users with an empty history at t are left out of
    that mean; a checkpoint where nobody qualifies is omitted and listed in
    ``omitted``.
    """
    checkpoints = list(checkpoints)
    if any(b <= a for a, b in zip(checkpoints, checkpoints[1:])):
        raise ValueError("checkpoints must be strictly increasing")
    if kind not in ("count", "time"):
        raise ValueError(f"unknown checkpoint kind {kind!r}")
    if isinstance(log, InteractionLog):
        histories = log.histories()
        times = log.click_times()
    else:
        histories = {u: list(h) for u, h in log.items()}
        times = {u: list(range(1, len(h) + 1)) for u, h in histories.items()}
        if kind == "time":
            raise ValueError("time checkpoints need an InteractionLog")
    users = sorted(histories) if users is None else list(users)
    profiles = {u: EntropyProfile(u, [], []) for u in users}
    curve = EntropyCurve([], [], [])
    for t in checkpoints:
        values = []
        for u in users:
            hist = histories.get(u, [])
            if kind == "count":
                upto = min(t, len(hist))
            else:
                upto = sum(1 for ts in times.get(u, []) if ts <= t)
            if upto == 0:
                continue
            s = entropy(hist[:upto])
            values.append(s)
            profiles[u].values.append(s)
            profiles[u].lengths.append(upto)
        if not values:
            curve.omitted.append(t)
            continue
        curve.checkpoints.append(t)
        curve.means.append(float(sum(values) / len(values)))
        curve.users.append(len(values))
    if curve.omitted:
        logger.warning("checkpoints with no qualifying user omitted: %s", ", ".join(map(str, curve.omitted)))
    curve.profiles = [profiles[u] for u in users]
    return curve


def simulate_converging(n_users: int, n_items: int, burn_in: int, length: int, seed: int) -> dict[str, list[str]]:
    """Users whose choices drift toward a personal favourite.

    At step k (0-based) a user picks the favourite with probability
    ``min(1, k / burn_in)``, else a uniform item. From step ``burn_in`` on
    every pick is the favourite, so from ``2 * burn_in`` the favourite is the
    modal item and each further pick can only lower the entropy.
    """
    rng = np.random.default_rng(seed)
    items = [f"i{j}" for j in range(n_items)]
    out = {}
    for u in range(n_users):
        fav = items[int(rng.integers(n_items))]
        hist = []
        for k in range(length):
            if rng.random() < min(1.0, k / burn_in):
                hist.append(fav)
            else:
                hist.append(items[int(rng.integers(n_items))])
        out[f"u{u}"] = hist
    return out


# ---------------------------------------------------------------------------
# scorers

class PopScorer:
    name = "pop"

    def __init__(self, histories: Mapping[str, Sequence[str]]):
        self.counts = Counter(item for h in histories.values() for item in h)

    def scores(self, user: str, candidates: Sequence[str]) -> np.ndarray:
        return np.array([float(self.counts.get(c, 0)) for c in candidates])


class ItemKNNScorer:
    """Score = sum over the user's distinct history items of cosine similarity.

    Item vectors are per-user click counts, so two items are similar when the
    same users clicked both. Cold users fall back to popularity.
    """

    name = "itemknn"

    def __init__(self, histories: Mapping[str, Sequence[str]]):
        self.histories = {u: list(h) for u, h in histories.items()}
        self.pop = PopScorer(histories)
        self.vectors: dict[str, dict[str, int]] = {}
        for u, h in self.histories.items():
            for item, c in Counter(h).items():
                self.vectors.setdefault(item, {})[u] = c
        self.norms = {i: math.sqrt(sum(c * c for c in v.values())) for i, v in self.vectors.items()}
        self.cold_users = 0

    def similarity(self, a: str, b: str) -> float:
        if a == b or a not in self.vectors or b not in self.vectors:
            return 0.0
        va, vb = self.vectors[a], self.vectors[b]
        if len(vb) < len(va):
            va, vb = vb, va
        dot = sum(c * vb.get(u, 0) for u, c in va.items())
        return dot / (self.norms[a] * self.norms[b])

    def scores(self, user: str, candidates: Sequence[str]) -> np.ndarray:
        hist = sorted(set(self.histories.get(user, ())))
        if not hist:
            self.cold_users += 1
            logger.debug("cold user %s under itemknn; using popularity", user)
            return self.pop.scores(user, candidates)
        return np.array([sum(self.similarity(h, c) for h in hist) for c in candidates])


class EmbeddingScorer:
    name = "embed"

    def __init__(self, user_vectors: Mapping[str, np.ndarray], item_vectors: Mapping[str, np.ndarray]):
        self.user_vectors = dict(user_vectors)
        self.item_vectors = dict(item_vectors)
        dims = {len(v) for v in self.item_vectors.values()}
        self.dim = dims.pop() if len(dims) == 1 else 0
        self.cold_users = 0

    def scores(self, user: str, candidates: Sequence[str]) -> np.ndarray:
        u = self.user_vectors.get(user)
        if u is None:
            self.cold_users += 1
            return np.zeros(len(candidates))
        zero = np.zeros(len(u))
        return np.array([float(u @ self.item_vectors.get(c, zero)) for c in candidates])


def rank_items(scorer, user: str, candidates: Sequence[str], k: int) -> list[str]:
    """Top-k candidates by descending score; ties go to the smaller item token."""
    if k <= 0:
        raise InvalidK(f"K must be positive, got {k}")
    if not len(candidates):
        raise DataError("no candidates to rank")
    scores = scorer.scores(user, candidates)
    order = sorted(range(len(candidates)), key=lambda i: (-scores[i], candidates[i]))
    return [candidates[i] for i in order[:k]]


def ranking_metrics(recommendations: Sequence[Sequence[str]], truth: Sequence[str | set | frozenset],
                    k: int = 10) -> dict[str, float]:
    """Recall, MRR, NDCG, Hit and Precision at k, averaged over users.

    A truth entry may be a single item or a set of items. With a single item,
    NDCG is ``1 / log2(P + 1)`` at hit position P (1-based) and 0 on a miss.
    """
    if k <= 0:
        raise InvalidK(f"K must be positive, got {k}")
    if len(recommendations) != len(truth):
        raise ValueError("recommendations and truth differ in length")
    if not len(truth):
        raise DataError("no users to evaluate")
    totals = dict.fromkeys(("recall", "mrr", "ndcg", "hit", "precision"), 0.0)
    for recs, gold in zip(recommendations, truth):
        gold = {gold} if isinstance(gold, str) else set(gold)
        top = list(recs)[:k]
        positions = [p for p, item in enumerate(top, start=1) if item in gold]
        hits = len(positions)
        totals["hit"] += 1.0 if hits else 0.0
        totals["recall"] += hits / len(gold)
        totals["precision"] += hits / k
        totals["mrr"] += 1.0 / positions[0] if hits else 0.0
        dcg = sum(1.0 / math.log2(p + 1) for p in positions)
        idcg = sum(1.0 / math.log2(p + 1) for p in range(1, min(len(gold), k) + 1))
        totals["ndcg"] += dcg / idcg
    n = len(truth)
    return {f"{name}@{k}": value / n for name, value in totals.items()}


@dataclass
class EvalCase:
    user: str
    truth: str
    candidates: list[str]


def leave_last_out(histories: Mapping[str, Sequence[str]], n_negatives: int = 100, seed: int = 0,
                   items: Sequence[str] | None = None) -> tuple[dict[str, list[str]], list[EvalCase]]:
    """Hold out each user's last click; candidates are it plus sampled unclicked items.

    Users with fewer than two clicks stay in training only.
    """
    rng = np.random.default_rng(seed)
    catalogue = sorted(set(items) if items is not None else {i for h in histories.values() for i in h})
    train: dict[str, list[str]] = {}
    cases = []
    for user in sorted(histories):
        hist = list(histories[user])
        if len(hist) < 2:
            train[user] = hist
            continue
        train[user] = hist[:-1]
        truth = hist[-1]
        seen = set(hist)
        pool = [i for i in catalogue if i not in seen]
        take = min(n_negatives, len(pool))
        negatives = [pool[j] for j in sorted(rng.choice(len(pool), size=take, replace=False))] if take else []
        cases.append(EvalCase(user, truth, sorted([truth, *negatives])))
    return train, cases


def evaluate(scorer, cases: Sequence[EvalCase], k: int = 10) -> dict[str, float]:
    if not cases:
        raise DataError("no evaluation cases")
    recs = [rank_items(scorer, c.user, c.candidates, k) for c in cases]
    out = ranking_metrics(recs, [c.truth for c in cases], k)
    out["users"] = len(cases)
    out["cold_users"] = getattr(scorer, "cold_users", 0)
    return out


def click_classes(counts: Sequence[int], thresholds: Sequence[float] | None = None) -> list[int]:
    """Four click-count classes.

    With ``thresholds`` the class is the number of thresholds a count reaches.
    Without them the cut points are the count quartiles, which keeps all four
    classes populated on small logs.
    """
    counts = np.asarray(counts, dtype=float)
    if thresholds is None:
        thresholds = np.unique(np.quantile(counts, [0.25, 0.5, 0.75], method="higher"))
    return [int(np.sum(c >= np.asarray(thresholds))) for c in counts]


def build_embedding_scorer(records: Sequence[BehaviorRecord], train_histories: Mapping[str, Sequence[str]],
                           schema, meta_rule, config, seed: int = 0, out_dim: int = 64,
                           thresholds: Sequence[float] | None = None) -> tuple[EmbeddingScorer, list[float]]:
    """Train node classification on the click graph and score by user-item dot product.

    Only clicked impressions that remain in the training histories contribute
    edges, so held-out clicks never leak into message passing.
    """
    from . import gnn
    from .graphbuild import accumulate, build_subgraph
    from .ingest import build_space

    budget = Counter((u, i) for u, h in train_histories.items() for i in h)
    train_rows = []
    for r in records:
        key = (str(r.values["user_id"]), str(r.values["answer_id"]))
        if int(float(r.values.get("click_timestamp") or 0)) > 0 and budget.get(key, 0) > 0:
            budget[key] -= 1
            train_rows.append(r)
    space = build_space(records, schema)
    sgs = [build_subgraph(r, meta_rule, space, schema, observe=False) for r in train_rows]
    graph = accumulate(sgs, space, meta_rule)
    uid, aid = space.field_id("user_id"), space.field_id("answer_id")
    user_clicks = Counter(str(r.values["user_id"]) for r in train_rows)
    item_clicks = Counter(str(r.values["answer_id"]) for r in train_rows)
    nodes, labels = [], []
    for fid, clicks in ((uid, user_clicks), (aid, item_clicks)):
        ids = sorted(clicks)
        classes = click_classes([clicks[i] for i in ids], thresholds)
        for name, cls in zip(ids, classes):
            nodes.append(space.lookup(fid, name))
            labels.append(str(cls))
    result = gnn.train_nodeclass(space, graph, nodes, labels, config, seed, out_dim)
    emb = result.node_embeddings
    users = {str(r.values["user_id"]) for r in records}
    items = {str(r.values["answer_id"]) for r in records}
    users = {u: emb[space.lookup(uid, u)] for u in sorted(users)}
    items = {i: emb[space.lookup(aid, i)] for i in sorted(items)}
    return EmbeddingScorer(users, items), result.loss_curve
