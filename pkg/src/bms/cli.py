"""Command-line entry point: ``bms <subcommand> [options]``.

Every subcommand writes its outputs plus a ``manifest.json`` (or
``<output>.manifest.json``) recording inputs, outputs, seeds and digests.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

Per-stage seeds derive from the master seed as the first four bytes
(little-endian) of ``sha256("<seed>:<stage>")``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import platform
import sys
import time
from dataclasses import fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from . import __version__
from .errors import BMSError, DataError, NumericError

log = logging.getLogger("bms")

SUBCOMMANDS = (
    "ingest", "build-graph", "export-dot", "detect-train", "detect-eval", "predict-eval", "entropy",
    "generate-train", "generate-sample", "generate-harness", "metrics-compare", "express-curve", "synth",
)


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def stage_seed(master: int, stage: str) -> int:
    return int.from_bytes(hashlib.sha256(f"{master}:{stage}".encode()).digest()[:4], "little")


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _dump_json(obj: Any, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, sort_keys=True, indent=1, default=_jsonable) + "\n", encoding="utf-8")
    return path


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (set, frozenset, tuple)):
        return sorted(obj) if isinstance(obj, (set, frozenset)) else list(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _write_rows(path: str | Path, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def _fmt(v: Any) -> Any:
    if isinstance(v, float):
        return repr(v)
    return v


class Run:
    """Collects inputs/outputs of one invocation and writes the manifest."""

    def __init__(self, args: argparse.Namespace, argv: Sequence[str]):
        self.args = args
        self.argv = list(argv)
        self.inputs: list[Path] = []
        self.outputs: list[Path] = []
        self.config: dict = {}
        self.started = time.perf_counter()

    def input(self, path: str | Path) -> Path:
        path = Path(path)
        if not path.exists():
            raise DataError(f"input not found: {path}")
        self.inputs.append(path)
        return path

    def output(self, path: str | Path) -> Path:
        path = Path(path)
        self.outputs.append(path)
        return path

    def manifest_path(self) -> Path | None:
        if not self.outputs:
            return None
        out = Path(self.args.out) if getattr(self.args, "out", None) else self.outputs[0]
        if out.is_dir():
            return out / "manifest.json"
        return out.with_name(out.name + ".manifest.json")

    def finish(self) -> Path | None:
        path = self.manifest_path()
        if path is None:
            return None

        def digests(paths):
            out = {}
            for p in paths:
                files = sorted(x for x in p.rglob("*") if x.is_file()) if p.is_dir() else [p]
                for f in files:
                    if f.resolve() != path.resolve():
                        out[str(f)] = sha256_file(f)
            return out

        import scipy

        manifest = {
            "command": self.argv,
            "subcommand": self.args.command,
            "seed": getattr(self.args, "seed", None),
            "threads": self.args.threads,
            "config": self.config,
            "config_sha256": hashlib.sha256(json.dumps(self.config, sort_keys=True, default=_jsonable).encode())
            .hexdigest(),
            "versions": {"bms": __version__, "python": platform.python_version(), "numpy": np.__version__,
                         "scipy": scipy.__version__},
            "inputs": digests(self.inputs),
            "outputs": digests(self.outputs),
            "wall_seconds": round(time.perf_counter() - self.started, 3),
        }
        _dump_json(manifest, path)
        return path


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise DataError(f"config {path} must be a mapping")
    return data


def _merge(cls, base: dict, overrides: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(base) - names
    if unknown:
        raise DataError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    merged = {**base, **{k: v for k, v in overrides.items() if v is not None and k in names}}
    return cls(**merged)


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args, run: Run) -> dict:
    from .ingest import load_schema, synth_dataset, write_csv

    schema = load_schema(args.schema)
    records = synth_dataset(schema, args.seed, args.n, args.planted_rule)
    write_csv(records, schema, run.output(args.out))
    return {"records": len(records), "schema": schema.name, "out": args.out}


def _read(args, run: Run):
    from .ingest import load_schema, read_csv

    schema = load_schema(args.schema)
    diags: list = []
    records = read_csv(run.input(args.input), schema, diags)
    if not records:
        raise DataError(f"{args.input} produced no usable records")
    return schema, records, diags


def cmd_ingest(args, run: Run) -> dict:
    from .ingest import build_space

    schema, records, diags = _read(args, run)
    space = build_space(records, schema)
    run.output(args.out).write_text(space.dumps(), encoding="utf-8")
    if args.diagnostics:
        _write_rows(run.output(args.diagnostics), ["row", "message"], [(d.row, d.message) for d in diags])
    return {"records": len(records), "dropped": len(diags), "nodes": len(space), "out": args.out}


def cmd_build_graph(args, run: Run) -> dict:
    from .graphbuild import accumulate, build_subgraph, load_meta_rule, save_graph
    from .ingest import build_space

    schema, records, diags = _read(args, run)
    rule = load_meta_rule(args.rule)
    space = build_space(records, schema)
    sgs = [build_subgraph(r, rule, space, schema, observe=False) for r in records]
    graph = accumulate(sgs, space, rule)
    save_graph(run.output(args.out), space, graph, sgs)
    return {"behaviors": len(sgs), "nodes": graph.num_nodes, "edges": len(graph.edges),
            "total_weight": graph.total_weight(), "dropped": len(diags), "out": args.out}


def cmd_export_dot(args, run: Run) -> dict:
    from .graphbuild import export_dot, export_vis, load_graph

    space, graph, sgs = load_graph(run.input(args.graph))
    if args.focal:
        focal = next((s for s in sgs if s.record_id == args.focal), None)
        if focal is None:
            raise DataError(f"no behavior with record id {args.focal!r}")
        payload = export_vis(graph, focal, args.depth, space)
        export_dot(payload, run.output(args.out))
        if args.vis_json:
            run.output(args.vis_json).write_text(payload.dumps(), encoding="utf-8")
        return {"out": args.out, "nodes": len(payload.nodes), "colored": len(payload.colored())}
    export_dot(graph, run.output(args.out), space)
    return {"out": args.out, "nodes": graph.num_nodes, "edges": len(graph.edges)}


def _gnn_config(args, rule):
    from .gnn import GnnConfig

    base = _load_config(args.config)
    over = {"epochs": args.epochs, "d0": args.d0, "hidden": args.hidden, "lr": args.lr,
            "aggregation": args.aggregation, "gated": args.gated or None, "layers": args.layers}
    cfg = _merge(GnnConfig, base, over)
    cfg.num_relations = rule.num_relations
    return cfg


def cmd_detect_train(args, run: Run) -> dict:
    from . import detect, numerics
    from .graphbuild import load_meta_rule

    schema, records, _ = _read(args, run)
    if args.top_k:
        from .ingest import top_k_labels
        records = top_k_labels(records, args.top_k)
    rule = load_meta_rule(args.rule)
    cfg = _gnn_config(args, rule)
    run.config = {"gnn": cfg.to_dict(), "rule": rule.to_dict(), "schema": schema.name}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run.output(out)
    seed = stage_seed(args.seed, "detect")
    result = detect.run_detection(records, rule, cfg, schema, seed=seed, shuffle_labels=args.shuffle_labels)
    numerics.save_params(result.model.params, out / "params")
    _dump_json({"config": cfg.to_dict(), "classes": result.model.classes, "seed": seed, "schema": schema.name,
                "rule": rule.to_dict(), "space": result.space.to_dict(), "graph": result.graph.to_dict()},
               out / "model.json")
    train, val, test = result.split
    _write_rows(out / "loss.csv", ["epoch", "loss"], list(enumerate(result.result.loss_curve)))
    _write_rows(out / "predictions.csv", ["record_id", "label"],
                [(records[i].record_id, p) for i, p in zip(test, result.test_pred)])
    group_cols = [c for c in schema.columns if c not in (schema.id_field, schema.label_field)]
    _write_rows(out / "truth.csv", ["record_id", "label", *group_cols],
                [(records[i].record_id, result.labels[i], *[records[i].values.get(c) or "" for c in group_cols])
                 for i in test])
    drift = detect.embedding_drift(result.result.initial_embeddings, result.model.params["embed"].data)
    summary = {
        "train": len(train), "val": len(val), "test": len(test),
        "metrics": result.report.summary() if result.report else {},
        "loss_first": result.result.loss_curve[0], "loss_last": result.result.loss_curve[-1],
        "drift_mean_radians": drift.mean,
        "shuffled_labels": bool(args.shuffle_labels),
    }
    _dump_json({**summary, "report": result.report.to_dict() if result.report else None,
                "drift": {"mean": drift.mean, "histogram": drift.histogram, "bin_edges": drift.bin_edges}},
               out / "metrics.json")
    if args.plot:
        from . import plotting
        plotting.loss_curve(result.result.loss_curve, out / "loss.png", "detection training")
        plotting.histogram(drift.angles[~drift.undefined], out / "drift.png", "embedding drift (radians)")
    return summary


def _load_detector(model_dir: Path):
    from . import detect, gnn, numerics
    from .core import AttributeSpace, HeteroGraph

    meta = json.loads((model_dir / "model.json").read_text(encoding="utf-8"))
    cfg = gnn.GnnConfig(**meta["config"])
    params = numerics.load_params(model_dir / "params")
    model = gnn.DetectionModel(params, cfg, list(meta["classes"]), int(meta["seed"]))
    space = AttributeSpace.from_dict(meta["space"])
    graph = HeteroGraph.from_dict(meta["graph"])
    return detect.DetectionRun(model, gnn.TrainResult(params, cfg, model.classes), space, graph, [], [],
                               (np.array([]), np.array([]), np.array([]))), meta


def cmd_detect_eval(args, run: Run) -> dict:
    from . import detect
    from .graphbuild import MetaRule

    if args.model:
        if not args.input:
            raise UsageError("--model needs --input")
        model_dir = run.input(args.model)
        det, meta = _load_detector(model_dir)
        from .ingest import load_schema, read_csv
        schema = load_schema(args.schema or meta["schema"])
        records = read_csv(run.input(args.input), schema)
        if not records:
            raise DataError("no records to evaluate")
        pred = det.predict_records(records, MetaRule.from_dict(meta["rule"]), schema)
        y_true = [r.label for r in records]
        if any(y is None for y in y_true):
            raise DataError("evaluation records need labels")
        report = detect.classification_metrics(y_true, pred)
        out = {"n": len(records), "metrics": report.to_dict()}
        if args.group:
            groups = [r.values.get(args.group) or "" for r in records]
            out["cramers_v"] = detect.cramers_v(pred, groups)
            targets = args.targets.split(",") if args.targets else report.labels
            out["subgroups"] = detect.subgroup_report(y_true, pred, groups, targets)
        if args.pred_out:
            _write_rows(run.output(args.pred_out), ["record_id", "label"],
                        [(r.record_id, p) for r, p in zip(records, pred)])
    else:
        if not (args.pred and args.truth):
            raise UsageError("detect-eval needs --pred and --truth, or --model and --input")
        out = detect.evaluate_files(run.input(args.pred), run.input(args.truth), args.group,
                                    args.targets.split(",") if args.targets else None)
    out["accuracy"] = out["metrics"]["accuracy"]
    if args.out:
        _dump_json(out, run.output(args.out))
    return out


def _interaction_log(args, run: Run):
    from .predict import InteractionLog

    if args.schema:
        from .ingest import load_schema, read_csv
        schema = load_schema(args.schema)
        records = read_csv(run.input(args.input), schema)
        return InteractionLog.from_records(records), records, schema
    return InteractionLog.read_csv(run.input(args.input)), None, None


def cmd_predict_eval(args, run: Run) -> dict:
    from . import predict

    ilog, records, schema = _interaction_log(args, run)
    histories = ilog.histories()
    train, cases = predict.leave_last_out(histories, args.negatives, stage_seed(args.seed, "negatives"),
                                          items=ilog.items())
    extra: dict = {}
    if args.scorer == "pop":
        scorer = predict.PopScorer(train)
    elif args.scorer == "itemknn":
        scorer = predict.ItemKNNScorer(train)
    else:
        if records is None:
            raise UsageError("the embed scorer needs --schema so side information can form the graph")
        from .gnn import GnnConfig
        from .graphbuild import load_meta_rule
        rule = load_meta_rule(args.rule)
        base = _load_config(args.config)
        cfg = _merge(GnnConfig, {"hidden": 64, "epochs": 100, "d0": 128, **base},
                     {"epochs": args.epochs, "d0": args.d0})
        cfg.num_relations = rule.num_relations
        run.config = {"gnn": cfg.to_dict(), "rule": rule.to_dict()}
        scorer, curve = predict.build_embedding_scorer(records, train, schema, rule, cfg,
                                                       stage_seed(args.seed, "embed"))
        extra = {"loss_first": curve[0], "loss_last": curve[-1]}
    metrics = predict.evaluate(scorer, cases, args.k)
    out = {"scorer": args.scorer, "k": args.k, "negatives": args.negatives, **metrics, **extra}
    if args.out:
        _dump_json(out, run.output(args.out))
    return out


def cmd_entropy(args, run: Run) -> dict:
    from . import predict

    if args.simulate:
        histories = predict.simulate_converging(args.users or 200, args.items, args.burn_in, args.length,
                                                stage_seed(args.seed, "simulate"))
        source: Any = histories
    else:
        if not args.input:
            raise UsageError("entropy needs --input or --simulate")
        ilog, _, _ = _interaction_log(args, run)
        source = ilog
        histories = ilog.histories()
    users = sorted(histories)
    if args.users and len(users) > args.users and not args.simulate:
        rng = np.random.default_rng(stage_seed(args.seed, "users"))
        users = sorted(users[i] for i in rng.choice(len(users), size=args.users, replace=False))
    if args.checkpoints:
        checkpoints = _ints(args.checkpoints)
    else:
        longest = max(len(histories[u]) for u in users)
        checkpoints = predict.equal_count_checkpoints(longest, args.step)
    curve = predict.entropy_curve(source, users, checkpoints, args.kind)
    _write_rows(run.output(args.out), ["checkpoint", "mean_entropy_bits", "users"], curve.rows())
    if args.plot:
        from . import plotting
        plotting.entropy_curve(curve.checkpoints, curve.means, run.output(args.plot))
    return {"checkpoints": curve.checkpoints, "means": curve.means, "omitted": curve.omitted, "out": args.out}


def _gen_config(args):
    from .generate import GenConfig

    return _merge(GenConfig, _load_config(args.config),
                  {"epochs": args.epochs, "latent": args.latent, "match": args.match})


def cmd_generate_train(args, run: Run) -> dict:
    from . import generate
    from .graphbuild import build_subgraph, load_meta_rule
    from .ingest import build_space

    schema, records, _ = _read(args, run)
    rule = load_meta_rule(args.rule)
    space = build_space(records, schema)
    chosen = [r for r in records if args.label is None or r.label == args.label]
    if args.limit:
        chosen = chosen[: args.limit]
    sgs = [build_subgraph(r, rule, space, schema, observe=False) for r in chosen]
    invalid = [s.record_id for s in sgs if generate.check_structure(s, rule, space)]
    sgs = [s for s in sgs if generate.check_structure(s, rule, space) is None]
    if not sgs:
        raise DataError("no schema-valid training structures")
    cfg = _gen_config(args)
    run.config = {"gen": cfg.to_dict(), "rule": rule.to_dict(), "schema": schema.name}
    result = generate.train_vae(sgs, space, rule, cfg, stage_seed(args.seed, "vae"))
    out = Path(args.out)
    generate.save_model(result.model, space, out)
    run.output(out)
    _write_rows(out / "loss.csv", ["epoch", "elbo"], list(enumerate(result.loss_curve)))
    from .core import dumps_canonical
    (out / "training.json").write_text(dumps_canonical({"space": space.to_dict(),
                                                         "behaviors": [s.to_dict() for s in sgs]}), encoding="utf-8")
    if args.plot:
        from . import plotting
        plotting.loss_curve(result.loss_curve, out / "loss.png", "VAE training")
    first, last = result.loss_curve[0], result.loss_curve[-1]
    return {"graphs": len(sgs), "skipped_invalid": len(invalid), "elbo_first": first, "elbo_last": last,
            "reduction": 1 - last / first, **result.stats}


def cmd_generate_sample(args, run: Run) -> dict:
    from . import generate
    from .core import dumps_canonical

    model, space = generate.load_model(run.input(args.model))
    report = generate.sample(model, space, args.count, stage_seed(args.seed, "sample"), args.threshold)
    payload = {"space": space.to_dict(), "behaviors": [g.to_dict() for g in report.graphs],
               "attempts": report.attempts, "rejected": report.rejected, "reasons": report.reasons}
    run.output(args.out).write_text(dumps_canonical(payload), encoding="utf-8")
    return {"generated": len(report.graphs), "attempts": report.attempts,
            "rejection_rate": report.rejection_rate, "complete": report.complete, "reasons": report.reasons}


def cmd_generate_harness(args, run: Run) -> dict:
    from . import generate, gnn
    from .graphbuild import load_meta_rule

    schema, records, _ = _read(args, run)
    rule = load_meta_rule(args.rule)
    modes = ["S1", "S2"] if args.mode == "both" else [args.mode]
    base = generate.HarnessConfig()
    if args.detector_epochs:
        base.detector = gnn.GnnConfig(**{**base.detector.to_dict(), "epochs": args.detector_epochs})
    if args.epochs:
        base.generator = generate.GenConfig(**{**base.generator.to_dict(), "epochs": args.epochs})
    rows = []
    for mode in modes:
        cfg = generate.HarnessConfig(mode=mode, hide=_floats(args.hide), repetitions=args.reps,
                                     augment=args.augment, detector=base.detector, generator=base.generator)
        run.config[mode] = {"hide": list(cfg.hide), "reps": cfg.repetitions, "augment": cfg.augment,
                            "detector": cfg.detector.to_dict(), "generator": cfg.generator.to_dict()}
        rows += generate.strategy_harness(records, schema, rule, cfg, stage_seed(args.seed, f"harness-{mode}"))
    _write_rows(run.output(args.out), generate.HARNESS_HEADER, [r.as_list() for r in rows])
    if args.plot:
        from . import plotting
        plotting.harness(rows, run.output(args.plot))
    return {"rows": [dict(zip(generate.HARNESS_HEADER, r.as_list())) for r in rows], "out": args.out}


def _load_behaviors(path: Path):
    from .core import AttributeSpace, BehaviorSubgraph

    files = sorted(path.glob("*.json")) if path.is_dir() else [path]
    out = []
    for f in files:
        data = json.loads(f.read_text(encoding="utf-8"))
        if "behaviors" not in data or "space" not in data:
            continue
        space = AttributeSpace.from_dict(data["space"])
        out += [(BehaviorSubgraph.from_dict(b), space) for b in data["behaviors"]]
    if not out:
        raise DataError(f"no behaviors found in {path}")
    return out


def cmd_metrics_compare(args, run: Run) -> dict:
    from . import graphmetrics as gm
    from .generate import check_structure
    from .graphbuild import load_meta_rule

    rule = load_meta_rule(args.rule)
    gen = _load_behaviors(run.input(args.generated))
    train = _load_behaviors(run.input(args.train))
    gen_adj = [gm.type_adjacency(s, rule, sp) for s, sp in gen]
    train_adj = [gm.type_adjacency(s, rule, sp) for s, sp in train]
    k = len(rule.node_types)
    density = float(np.mean([a.sum() / (k * (k - 1)) for a in train_adj])) if k > 1 else 0.0
    control = gm.random_graphs(k, len(gen_adj), args.random_p if args.random_p is not None else density,
                               stage_seed(args.seed, "control"))
    orbit = [gm.orbit_counts(a) for a in train_adj]
    gen_orbit = [gm.orbit_counts(a) for a in gen_adj]
    orbit_sim = float(np.mean([gm.signature_similarity(a, b) for a in gen_orbit for b in orbit]))
    nu = gm.novel_unique([gm.LabeledGraph.from_subgraph(s, sp) for s, sp in gen],
                         [gm.LabeledGraph.from_subgraph(s, sp) for s, sp in train])
    valid = sum(check_structure(s, rule, sp) is None for s, sp in gen)
    out = {
        "generated": len(gen), "training": len(train), "valid": valid,
        "ksi_generated": gm.mean_ksi(gen_adj, train_adj, args.kernel_size),
        "ksi_random": gm.mean_ksi(control, train_adj, args.kernel_size),
        "orbit_similarity": orbit_sim,
        "kernel_size": args.kernel_size, **nu,
    }
    if args.out:
        _dump_json(out, run.output(args.out))
    return out


def cmd_express_curve(args, run: Run) -> dict:
    from . import expressiveness as ex

    rows = ex.curve(range(1, args.n_max + 1), ex.MODES, args.k_rep, args.k_struct)
    _write_rows(run.output(args.out), ["n", "mode", "log2_power"], rows)
    if args.plot:
        from . import plotting
        plotting.expressive_power(rows, run.output(args.plot))
    cross = ex.crossover(args.k_rep, args.k_struct)
    return {"rows": len(rows), "crossover": cross, "out": args.out}


# ---------------------------------------------------------------------------
# parser

def _common(p: argparse.ArgumentParser, seed: bool = True) -> None:
    if seed:
        p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--threads", type=int, default=1, help="BLAS thread cap (1 gives bit-identical reruns)")
    p.add_argument("--json", action="store_true", help="print the result as JSON on stdout")
    p.add_argument("--config", help="YAML file with model settings; flags override it")


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int)
    p.add_argument("--d0", type=int, help="initial embedding width")
    p.add_argument("--hidden", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--aggregation", choices=["mean", "sum"])
    p.add_argument("--gated", action="store_true", help="sigmoid gate on neighbour messages")


def build_parser() -> argparse.ArgumentParser:
    parser = Parser(prog="bms", description="Behavioral molecular structure toolkit.")
    parser.add_argument("--version", action="version", version=f"bms {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=Parser, metavar="command")
    sub.required = True

    p = sub.add_parser("synth", help="write a synthetic dataset CSV")
    p.add_argument("--schema", required=True)
    p.add_argument("--n", type=int, required=True, help="records (users for zhihu)")
    p.add_argument("--planted-rule", help="crime only: weapon-premis or month-area-parity")
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="CSV to attribute space JSON")
    p.add_argument("--schema", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--diagnostics", help="CSV of dropped rows")
    _common(p, seed=False)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("build-graph", help="CSV to accumulated graph JSON")
    p.add_argument("--schema", required=True)
    p.add_argument("--rule", required=True, help="shipped meta-rule name or YAML path")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    _common(p, seed=False)
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("export-dot", help="graph JSON to DOT")
    p.add_argument("--graph", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--focal", help="record id of the behavior to centre on")
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--vis-json", help="also write the visualization payload")
    _common(p, seed=False)
    p.set_defaults(func=cmd_export_dot)

    p = sub.add_parser("detect-train", help="train and evaluate a behavior detector")
    p.add_argument("--schema", required=True)
    p.add_argument("--rule", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--top-k", type=int, help="keep only the k most frequent labels")
    p.add_argument("--shuffle-labels", action="store_true", help="permutation-null control")
    p.add_argument("--plot", action="store_true", help="render loss and drift figures")
    _model_flags(p)
    _common(p)
    p.set_defaults(func=cmd_detect_train)

    p = sub.add_parser("detect-eval", help="classification report, fairness and subgroup tallies")
    p.add_argument("--pred", help="CSV record_id,label")
    p.add_argument("--truth", help="CSV record_id,label[,group columns]")
    p.add_argument("--model", help="detect-train output directory")
    p.add_argument("--input", help="labeled dataset CSV to score with --model")
    p.add_argument("--schema")
    p.add_argument("--group", help="column for Cramér's V and subgroup tallies")
    p.add_argument("--targets", help="comma-separated target classes for subgroup tallies")
    p.add_argument("--pred-out", help="write predictions made with --model")
    p.add_argument("--out")
    _common(p, seed=False)
    p.set_defaults(func=cmd_detect_eval)

    p = sub.add_parser("predict-eval", help="leave-last-out ranking evaluation")
    p.add_argument("--input", required=True, help="interaction log CSV, or dataset CSV with --schema")
    p.add_argument("--schema")
    p.add_argument("--rule", default="zhihu")
    p.add_argument("--scorer", choices=["pop", "itemknn", "embed"], default="pop")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--negatives", type=int, default=100)
    p.add_argument("--epochs", type=int)
    p.add_argument("--d0", type=int)
    p.add_argument("--out")
    _common(p)
    p.set_defaults(func=cmd_predict_eval)

    p = sub.add_parser("entropy", help="mean time-independent entropy per checkpoint")
    p.add_argument("--input")
    p.add_argument("--schema")
    p.add_argument("--simulate", action="store_true", help="use users converging to a favourite item")
    p.add_argument("--users", type=int, help="number of users to sample")
    p.add_argument("--items", type=int, default=50)
    p.add_argument("--burn-in", type=int, default=20)
    p.add_argument("--length", type=int, default=120)
    p.add_argument("--checkpoints", help="comma-separated checkpoints")
    p.add_argument("--step", type=int, default=10, help="equal-count checkpoint spacing")
    p.add_argument("--kind", choices=["count", "time"], default="count")
    p.add_argument("--out", required=True)
    p.add_argument("--plot", help="PNG path for the curve")
    _common(p)
    p.set_defaults(func=cmd_entropy)

    p = sub.add_parser("generate-train", help="train the structure VAE")
    p.add_argument("--schema", required=True)
    p.add_argument("--rule", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--label", help="train only on records with this label")
    p.add_argument("--limit", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--latent", type=int)
    p.add_argument("--match", choices=["identity", "assignment"])
    p.add_argument("--out", required=True, help="model directory")
    p.add_argument("--plot", action="store_true")
    _common(p)
    p.set_defaults(func=cmd_generate_train)

    p = sub.add_parser("generate-sample", help="sample structures from a trained VAE")
    p.add_argument("--model", required=True)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--threshold", type=float)
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(func=cmd_generate_sample)

    p = sub.add_parser("generate-harness", help="S1/S2 strategy evaluation over hide fractions")
    p.add_argument("--schema", required=True)
    p.add_argument("--rule", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--mode", choices=["S1", "S2", "both"], default="S1")
    p.add_argument("--hide", default="0,0.25,0.5,0.75", help="comma-separated hide fractions")
    p.add_argument("--reps", type=int, default=2)
    p.add_argument("--augment", action="store_true", help="S1: keep hidden frauds and add generated ones")
    p.add_argument("--epochs", type=int, help="VAE epochs")
    p.add_argument("--detector-epochs", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--plot", help="PNG path for AUC and prevented-loss panels")
    _common(p)
    p.set_defaults(func=cmd_generate_harness)

    p = sub.add_parser("metrics-compare", help="KSI, orbit similarity, novel and unique")
    p.add_argument("--generated", required=True, help="behaviors JSON file or directory")
    p.add_argument("--train", required=True, help="behaviors JSON file or directory")
    p.add_argument("--rule", required=True)
    p.add_argument("--kernel-size", type=float, default=3)
    p.add_argument("--random-p", type=float, help="edge probability of the random control")
    p.add_argument("--out")
    _common(p)
    p.set_defaults(func=cmd_metrics_compare)

    p = sub.add_parser("express-curve", help="expressive power curves")
    p.add_argument("--n-max", type=int, default=50)
    p.add_argument("--k-rep", type=int, default=100)
    p.add_argument("--k-struct", type=int, default=2)
    p.add_argument("--out", required=True)
    p.add_argument("--plot", help="PNG path for the curves")
    _common(p, seed=False)
    p.set_defaults(func=cmd_express_curve)
    return parser


def _normalize_argv(argv: list[str]) -> list[str]:
    """Accept ``detect eval`` as well as ``detect-eval``."""
    if len(argv) >= 2 and f"{argv[0]}-{argv[1]}" in SUBCOMMANDS:
        return [f"{argv[0]}-{argv[1]}", *argv[2:]]
    return argv


def _print(result: dict, as_json: bool) -> None:
    if as_json:
        print(json.dumps(result, sort_keys=True, default=_jsonable))
        return
    for key in sorted(result):
        value = result[key]
        if isinstance(value, (dict, list)):
            value = json.dumps(value, sort_keys=True, default=_jsonable)
        print(f"{key}\t{value}")


def main(argv: Sequence[str] | None = None) -> int:
    argv = _normalize_argv(list(sys.argv[1:] if argv is None else argv))
    logging.basicConfig(level=os.environ.get("BMS_LOG", "WARNING").upper(), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"bms: error: {exc}", file=sys.stderr)
        return 1
    from threadpoolctl import threadpool_limits

    run = Run(args, ["bms", *argv])
    try:
        with threadpool_limits(limits=args.threads):
            result = args.func(args, run)
        run.finish()
    except UsageError as exc:
        print(f"bms: error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"bms: numeric failure: {exc}", file=sys.stderr)
        return 3
    except (DataError, OSError) as exc:
        print(f"bms: data error: {exc}", file=sys.stderr)
        return 2
    except BMSError as exc:
        print(f"bms: error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"bms: error: {exc}", file=sys.stderr)
        return 1
    _print(result, args.json)
    return 0


if __name__ == "__main__":
    sys.exit(main())
