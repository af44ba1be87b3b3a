"""Behavior detection: the end-to-end pipeline plus evaluation and fairness reports."""

from __future__ import annotations

import csv
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import gnn
from .core import AttributeSpace, BehaviorRecord, BehaviorSubgraph, HeteroGraph
from .errors import DataError, EmptyEval, NotFound
from .graphbuild import MetaRule, accumulate, build_subgraph

log = logging.getLogger(__name__)


@dataclass
class ClassReport:
    labels: list[str]
    confusion: np.ndarray
    accuracy: float
    precision: dict[str, float]
    recall: dict[str, float]
    f1: dict[str, float]
    support: dict[str, int]
    macro_precision: float
    macro_recall: float
    macro_f1: float
    weighted_f1: float
    balanced_accuracy: float
    kappa: float

    def summary(self) -> dict[str, float]:
        """The seven headline metrics."""
        return {
            "accuracy": self.accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "weighted_f1": self.weighted_f1,
            "balanced_accuracy": self.balanced_accuracy,
            "kappa": self.kappa,
        }

    def to_dict(self) -> dict:
        return {
            **self.summary(),
            "labels": self.labels,
            "confusion": self.confusion.tolist(),
            "per_class": {
                lab: {"precision": self.precision[lab], "recall": self.recall[lab], "f1": self.f1[lab],
                      "support": self.support[lab]}
                for lab in self.labels
            },
        }


def _ratio(a: float, b: float) -> float:
    return a / b if b else 0.0


def classification_metrics(y_true: Sequence[Any], y_pred: Sequence[Any]) -> ClassReport:
    if len(y_true) != len(y_pred):
        raise ValueError(f"length mismatch: {len(y_true)} truths vs {len(y_pred)} predictions")
    if not len(y_true):
        raise EmptyEval("no predictions to evaluate")
    y_true = [str(y) for y in y_true]
    y_pred = [str(y) for y in y_pred]
    labels = sorted(set(y_true) | set(y_pred))
    index = {lab: i for i, lab in enumerate(labels)}
    cm = np.zeros((len(labels), len(labels)), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        cm[index[t], index[p]] += 1
    n = cm.sum()
    tp = np.diag(cm)
    row, col = cm.sum(axis=1), cm.sum(axis=0)
    precision = {lab: _ratio(tp[i], col[i]) for lab, i in index.items()}
    recall = {lab: _ratio(tp[i], row[i]) for lab, i in index.items()}
    f1 = {lab: _ratio(2 * precision[lab] * recall[lab], precision[lab] + recall[lab]) for lab in labels}
    support = {lab: int(row[i]) for lab, i in index.items()}
    accuracy = float(tp.sum() / n)
    present = [lab for lab in labels if support[lab] > 0]
    p_o = accuracy
    p_e = float((row * col).sum() / (n * n))
    kappa = (1.0 if p_o == 1.0 else 0.0) if p_e == 1.0 else (p_o - p_e) / (1.0 - p_e)
    return ClassReport(
        labels=labels,
        confusion=cm,
        accuracy=accuracy,
        precision=precision,
        recall=recall,
        f1=f1,
        support=support,
        macro_precision=float(np.mean([precision[l] for l in labels])),
        macro_recall=float(np.mean([recall[l] for l in labels])),
        macro_f1=float(np.mean([f1[l] for l in labels])),
        weighted_f1=float(sum(f1[l] * support[l] for l in labels) / n),
        balanced_accuracy=float(np.mean([recall[l] for l in present])),
        kappa=float(kappa),
    )


@dataclass
class Association:
    value: float
    measure: str
    degenerate: bool = False


def _contingency(x: Sequence[Any], y: Sequence[Any]) -> np.ndarray:
    xs = {v: i for i, v in enumerate(sorted({str(v) for v in x}))}
    ys = {v: i for i, v in enumerate(sorted({str(v) for v in y}))}
    table = np.zeros((len(xs), len(ys)))
    for a, b in zip(x, y):
        table[xs[str(a)], ys[str(b)]] += 1
    return table


def cramers_v_detail(x: Sequence[Any], y: Sequence[Any]) -> Association:
    if len(x) != len(y):
        raise ValueError("series lengths differ")
    if not len(x):
        raise EmptyEval("empty series")
    table = _contingency(x, y)
    r, c = table.shape
    if min(r, c) < 2:
        log.warning("Cramér's V undefined for a single-category series; reporting 0")
        return Association(0.0, "cramers_v", degenerate=True)
    n = table.sum()
    expected = np.outer(table.sum(axis=1), table.sum(axis=0)) / n
    chi2 = float(((table - expected) ** 2 / expected).sum())
    v = math.sqrt(chi2 / (n * min(r - 1, c - 1)))
    return Association(min(1.0, v), "cramers_v")


def cramers_v(x: Sequence[Any], y: Sequence[Any]) -> float:
    """``sqrt(chi2 / (N * min(r-1, c-1)))``; 0 when either series has one category."""
    return cramers_v_detail(x, y).value


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.std() == 0 or y.std() == 0:
        return 0.0
    return float(np.corrcoef(x, y)[0, 1])


def _numeric(values: Sequence[Any]) -> bool:
    try:
        [float(v) for v in values]
    except (TypeError, ValueError):
        return False
    return True


def association(x: Sequence[Any], y: Sequence[Any]) -> Association:
    """Pearson for numeric pairs, Cramér's V otherwise."""
    if _numeric(x) and _numeric(y):
        return Association(pearson([float(v) for v in x], [float(v) for v in y]), "pearson")
    return cramers_v_detail(x, y)


def subgroup_report(y_true: Sequence[Any], y_pred: Sequence[Any], groups: Sequence[Any],
                    target_classes: Sequence[Any], known_groups: Sequence[Any] | None = None) -> list[dict]:
    """Per-group correct/incorrect tallies restricted to behaviors of the target classes.

    Group values outside ``known_groups`` (when given) are pooled as ``other``.
    """
    y_true = [str(v) for v in y_true]
    y_pred = [str(v) for v in y_pred]
    targets = {str(t) for t in target_classes}
    missing = targets - set(y_true) - set(y_pred)
    if missing:
        raise NotFound(f"target classes not in label set: {sorted(missing)}")
    known = {str(g) for g in known_groups} if known_groups is not None else None
    tally: dict[str, list[int]] = {}
    for t, p, g in zip(y_true, y_pred, groups):
        if t not in targets:
            continue
        g = str(g)
        if known is not None and g not in known:
            g = "other"
        counts = tally.setdefault(g, [0, 0])
        counts[0 if t == p else 1] += 1
    rows = []
    for g in sorted(tally):
        correct, wrong = tally[g]
        rows.append({"group": g, "correct": correct, "incorrect": wrong,
                     "accuracy": round(correct / (correct + wrong), 5)})
    return rows


@dataclass
class DriftSummary:
    angles: np.ndarray
    undefined: np.ndarray
    mean: float
    histogram: list[int]
    bin_edges: list[float]

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "histogram": self.histogram,
            "bin_edges": self.bin_edges,
            "undefined": int(self.undefined.sum()),
            "angles": [None if u else float(a) for a, u in zip(self.angles, self.undefined)],
        }


def embedding_drift(initial: np.ndarray, trained: np.ndarray, bins: int = 18) -> DriftSummary:
    """Per-node angle between initial and trained vectors (radians)."""
    initial = np.asarray(initial, dtype=float)
    trained = np.asarray(trained, dtype=float)
    if initial.shape != trained.shape:
        raise ValueError(f"table shapes differ: {initial.shape} vs {trained.shape}")
    na = np.linalg.norm(initial, axis=1)
    nb = np.linalg.norm(trained, axis=1)
    undefined = (na == 0) | (nb == 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = (initial * trained).sum(axis=1) / (na * nb)
    angles = np.where(undefined, np.nan, np.arccos(np.clip(cos, -1.0, 1.0)))
    defined = angles[~undefined]
    hist, edges = np.histogram(defined, bins=bins, range=(0.0, math.pi))
    return DriftSummary(angles, undefined, float(defined.mean()) if defined.size else float("nan"),
                        hist.tolist(), edges.tolist())


# ---------------------------------------------------------------------------
# pipeline

@dataclass
class DetectionRun:
    model: gnn.DetectionModel
    result: gnn.TrainResult
    space: AttributeSpace
    graph: HeteroGraph
    subgraphs: list[BehaviorSubgraph]
    labels: list[str]
    split: tuple[np.ndarray, np.ndarray, np.ndarray]
    report: ClassReport | None = None
    test_pred: list[str] = field(default_factory=list)

    def mats(self):
        return gnn.relation_matrices(self.graph, len(self.space), self.model.config.num_relations,
                                     self.model.config.aggregation)

    def predict(self, subgraphs: Sequence[BehaviorSubgraph]) -> list[str]:
        self.model.extend(self.space)
        proba = self.model.predict_proba(self.mats(), subgraphs)
        return [self.model.classes[i] for i in proba.argmax(axis=1)]

    def predict_records(self, records: Sequence[BehaviorRecord], meta_rule: MetaRule, schema=None) -> list[str]:
        """Score new behaviors; unseen tokens join the space with untrained vectors."""
        sgs = [build_subgraph(r, meta_rule, self.space, schema, observe=False) for r in records]
        return self.predict(sgs)


def run_detection(records: Sequence[BehaviorRecord], meta_rule: MetaRule, config: gnn.GnnConfig,
                  schema=None, seed: int = 0, shuffle_labels: bool = False,
                  space: AttributeSpace | None = None, progress=None) -> DetectionRun:
    """Split, build the training graph, train, and evaluate on the held-out test split."""
    if not records:
        raise DataError("no records")
    config.check_rule(meta_rule)
    if space is None:
        if schema is None:
            raise DataError("either a schema or a prebuilt attribute space is required")
        from .ingest import build_space
        space = build_space(records, schema)
    subgraphs = [build_subgraph(r, meta_rule, space, schema, observe=False) for r in records]
    labels = [str(r.label) for r in records]
    if any(r.label is None for r in records):
        raise DataError("records without labels cannot be used for detection")
    if shuffle_labels:
        labels = [labels[i] for i in np.random.default_rng(seed + 7919).permutation(len(labels))]
    train, val, test = gnn.stratified_split(labels, seed=seed)
    graph = accumulate([subgraphs[i] for i in train], space, meta_rule)
    model, result = gnn.train_detect(
        space, graph, [subgraphs[i] for i in train], [labels[i] for i in train], config, seed,
        val=([subgraphs[i] for i in val], [labels[i] for i in val]) if len(val) else None,
        progress=progress,
    )
    run = DetectionRun(model, result, space, graph, subgraphs, labels, (train, val, test))
    if len(test):
        run.test_pred = run.predict([subgraphs[i] for i in test])
        run.report = classification_metrics([labels[i] for i in test], run.test_pred)
    return run


def read_labels(path: str | Path, column: str = "label", id_column: str = "record_id") -> dict[str, dict[str, str]]:
    """Read ``record_id -> row`` from a CSV with at least id and label columns."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or id_column not in reader.fieldnames or column not in reader.fieldnames:
                raise DataError(f"{path} needs columns {id_column!r} and {column!r}")
            return {row[id_column]: row for row in reader}
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def evaluate_files(pred_path: str | Path, truth_path: str | Path, group: str | None = None,
                   targets: Sequence[str] | None = None) -> dict:
    pred = read_labels(pred_path)
    truth = read_labels(truth_path)
    ids = sorted(set(pred) & set(truth))
    if not ids:
        raise EmptyEval("prediction and truth files share no record ids")
    y_true = [truth[i]["label"] for i in ids]
    y_pred = [pred[i]["label"] for i in ids]
    report = classification_metrics(y_true, y_pred)
    out = {"n": len(ids), "metrics": report.to_dict()}
    if group:
        if group not in truth[ids[0]]:
            raise DataError(f"truth file has no column {group!r}")
        groups = [truth[i][group] for i in ids]
        out["cramers_v"] = cramers_v(y_pred, groups)
        tgt = list(targets) if targets else sorted(Counter(y_true))
        out["subgroups"] = subgroup_report(y_true, y_pred, groups, tgt)
    return out
