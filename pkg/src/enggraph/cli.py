"""Command-line entry point wiring the pipelines together.

Every command reads an optional JSON config, writes all outputs under a run
directory together with a resolved-config snapshot, and is deterministic for
a given config + seed. Writes are atomic (temp file + rename) so a crashed
run never leaves partial files behind.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile

import numpy as np

from . import aerograph as ag
from . import biwgraph as bg
from . import geomesh as gm
from . import insight
from . import models as md
from . import modesynth as ms
from . import trainer as tr
from .errors import ConfigError, EnggraphError, SchemaError
from .graph import EngineeringGraph

LOG = logging.getLogger("enggraph")

_LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO,
               "debug": logging.DEBUG}


def _setup_logging():
    name = os.environ.get("ENGGRAPH_LOG", "info").lower()
    if name not in _LOG_LEVELS:
        raise ConfigError(f"ENGGRAPH_LOG must be one of {sorted(_LOG_LEVELS)}")
    logging.basicConfig(level=_LOG_LEVELS[name],
                        format="%(levelname)s %(name)s: %(message)s")


# ---------------------------------------------------------------------------
# atomic output helpers
# ---------------------------------------------------------------------------

def atomic_write_bytes(path, data):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode())


def atomic_write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _input_hashes(config):
    """Hash every referenced input (a file directly, or a directory's
    manifest.json) so the run records what it consumed."""
    hashes = {}
    for key in ("dataset", "graphs", "data", "candidates", "checkpoint"):
        path = config.get(key)
        if not isinstance(path, str):
            continue
        if os.path.isfile(path):
            hashes[path] = _file_sha256(path)
        elif os.path.isdir(path):
            manifest = os.path.join(path, "manifest.json")
            if os.path.isfile(manifest):
                hashes[manifest] = _file_sha256(manifest)
    if "runs" in config and isinstance(config["runs"], dict):
        for path in config["runs"].values():
            if isinstance(path, str) and os.path.isfile(path):
                hashes[path] = _file_sha256(path)
    return hashes


def _write_resolved(out_dir, command, config, seed, workers):
    atomic_write_json(os.path.join(out_dir, "resolved_config.json"), {
        "command": command, "seed": seed, "workers": workers,
        "config": config, "inputs": _input_hashes(config),
    })


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------

def load_config(path, defaults):
    """Merge a JSON config over defaults; unknown keys are rejected."""
    doc = {}
    if path is not None:
        with open(path) as f:
            doc = json.load(f)
        if not isinstance(doc, dict):
            raise SchemaError("config root must be a JSON object")
    unknown = sorted(set(doc) - set(defaults))
    if unknown:
        raise SchemaError(f"unknown config keys: {unknown}")
    merged = {**defaults, **doc}
    missing = sorted(k for k, v in merged.items() if v is REQUIRED)
    if missing:
        raise SchemaError(f"missing required config keys: {missing}")
    return merged


REQUIRED = object()


# ---------------------------------------------------------------------------
# aero graph bundles: JSON manifest + float64 blob, deterministic bytes
# ---------------------------------------------------------------------------

_BUNDLE_ARRAYS = ("node_features", "edges", "edge_features", "p_target",
                  "tau_target", "selected", "pairs", "midline")


def save_graph_bundle(out_dir, name, aero):
    arrays = {
        "node_features": aero.graph.node_features,
        "edges": aero.graph.edges,
        "edge_features": aero.graph.edge_features,
        "p_target": aero.p_target,
        "tau_target": aero.tau_target,
        "selected": aero.ds.selected,
        "pairs": np.asarray(aero.ds.pairs).reshape(-1, 2),
        "midline": np.asarray(aero.ds.midline),
    }
    blob, offsets, cursor = [], {}, 0
    for key in _BUNDLE_ARRAYS:
        arr = np.ascontiguousarray(arrays[key])
        dtype = "<i8" if arr.dtype.kind == "i" else "<f8"
        raw = arr.astype(dtype).tobytes()
        offsets[key] = {"offset": cursor, "shape": list(arr.shape),
                        "dtype": dtype}
        blob.append(raw)
        cursor += len(raw)
    doc = {"offsets": offsets, "blob_bytes": cursor, "norm": aero.norm,
           "meta": aero.graph.meta,
           "ds": {"score": aero.ds.score, "method": aero.ds.method}}
    atomic_write_json(os.path.join(out_dir, f"{name}.json"), doc)
    atomic_write_bytes(os.path.join(out_dir, f"{name}.bin"), b"".join(blob))


def load_graph_bundle(in_dir, name):
    with open(os.path.join(in_dir, f"{name}.json")) as f:
        doc = json.load(f)
    with open(os.path.join(in_dir, f"{name}.bin"), "rb") as f:
        blob = f.read()
    if len(blob) != doc["blob_bytes"]:
        raise SchemaError(f"graph bundle {name} blob size mismatch")
    arrays = {}
    for key, info in doc["offsets"].items():
        shape = tuple(info["shape"])
        count = int(np.prod(shape)) if shape else 1
        arrays[key] = np.frombuffer(
            blob, dtype=info["dtype"], count=count,
            offset=info["offset"]).reshape(shape).copy()
    graph = EngineeringGraph(
        node_features=arrays["node_features"],
        edges=arrays["edges"], edge_features=arrays["edge_features"],
        meta=doc["meta"])
    ds = ag.DownsampleResult(
        selected=arrays["selected"], pairs=arrays["pairs"],
        midline=arrays["midline"], score=doc["ds"]["score"],
        method=doc["ds"]["method"])
    return ag.AeroGraphSample(graph=graph, p_target=arrays["p_target"],
                              tau_target=arrays["tau_target"],
                              norm=doc["norm"], ds=ds)


def _load_graph_split(in_dir):
    with open(os.path.join(in_dir, "manifest.json")) as f:
        manifest = json.load(f)
    data = {"train": [], "val": [], "test": []}
    for name, split in zip(manifest["names"], manifest["splits"]):
        data[split].append(load_graph_bundle(in_dir, name))
    return data, manifest


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth_modes(config, seed, out_dir, workers):
    cfg = ms.default_dataset_config(seed=seed)
    if config["noise"] is not None:
        cfg.noise = float(config["noise"])
    if config["reference_class_counts"] is not None:
        cfg.reference_class_counts = dict(config["reference_class_counts"])
    if config["target_eval_count"] is not None:
        cfg.target_eval_count = int(config["target_eval_count"])
    dataset = ms.build_dataset(cfg)
    ms.save_dataset(dataset, out_dir)
    LOG.info("wrote %d mode samples to %s", len(dataset.samples), out_dir)


def cmd_synth_aero(config, seed, out_dir, workers):
    cfg = ag.AeroDatasetConfig(
        counts={k: int(v) for k, v in config["counts"].items()},
        u_range=tuple(config["u_range"]), rho=float(config["rho"]),
        subdivision=int(config["subdivision"]),
        perturbation=float(config["perturbation"]))
    samples, manifest = ag.synth_aero_dataset(cfg, seed=seed)
    names = [f"sample_{i:04d}" for i in range(len(samples))]
    for name, sample in zip(names, samples):
        ag.save_aero_sample(out_dir, name, sample)
    manifest["names"] = names
    atomic_write_json(os.path.join(out_dir, "manifest.json"), manifest)
    LOG.info("wrote %d aero samples to %s", len(samples), out_dir)


def cmd_build_graphs(config, seed, out_dir, workers):
    in_dir = config["dataset"]
    with open(os.path.join(in_dir, "manifest.json")) as f:
        manifest = json.load(f)
    nodes, k = int(config["nodes"]), int(config["k"])
    method = config["method"]
    names = manifest["names"]
    for name in names:
        sample = ag.load_aero_sample(in_dir, name)
        if method == "symmetric":
            frame = gm.detect_symmetry(sample.mesh, plane="y0")
            ds = ag.downsample_symmetric(sample.mesh, frame, nodes, seed=seed)
        else:
            ds = ag.downsample_baselines(sample.mesh, nodes, method,
                                         seed=seed)
        aero = ag.assemble_aero_graph(sample, ds, k=k,
                                      tau_ref=manifest["tau_ref"])
        save_graph_bundle(out_dir, name, aero)
        LOG.debug("graph %s: %d nodes, score %.3f", name,
                  aero.graph.num_nodes, ds.score)
    atomic_write_json(os.path.join(out_dir, "manifest.json"), {
        "names": names, "splits": manifest["splits"],
        "tau_ref": manifest["tau_ref"], "nodes": nodes, "k": k,
        "method": method})
    LOG.info("wrote %d graphs to %s", len(names), out_dir)


def cmd_train_modes(config, seed, out_dir, workers):
    dataset = ms.load_dataset(config["dataset"])
    data, standardizer = tr.prepare_mode_inputs(dataset)
    model = md.ModeClassifier(seed=seed, **config["model"])
    result = tr.train_classifier(
        model, data, epochs=int(config["epochs"]),
        batch_size=int(config["batch_size"]), lr=float(config["lr"]),
        patience=int(config["patience"]), seed=seed)
    md.save_checkpoint(out_dir, "classifier", result.model,
                       extra={"standardizer": standardizer.to_dict(),
                              "best_epoch": result.best_epoch,
                              "lr_used": result.lr_used})
    atomic_write_json(os.path.join(out_dir, "curve.json"), result.curve)
    metrics = tr.evaluate_classifier(result.model, data["test"])
    atomic_write_json(os.path.join(out_dir, "metrics.json"),
                      metrics.to_dict())
    _write_confusion_csv(os.path.join(out_dir, "confusion.csv"),
                         metrics.confusion)
    LOG.info("classifier test combined score %.4f", metrics.combined)


def cmd_train_aero(config, seed, out_dir, workers):
    data, manifest = _load_graph_split(config["graphs"])
    model = md.AeroGraphNetLite(seed=seed, **config["model"])
    loss_cfg = tr.LossConfig(**config["loss"])
    result = tr.train_surrogate(
        model, data, loss_cfg=loss_cfg, epochs=int(config["epochs"]),
        batch_size=int(config["batch_size"]), lr=float(config["lr"]),
        patience=int(config["patience"]), seed=seed)
    md.save_checkpoint(out_dir, "surrogate", result.model,
                       extra={"tau_ref": manifest["tau_ref"],
                              "best_epoch": result.best_epoch,
                              "lr_used": result.lr_used})
    atomic_write_json(os.path.join(out_dir, "curve.json"), result.curve)
    metrics = tr.evaluate_surrogate(result.model, data["test"])
    atomic_write_json(os.path.join(out_dir, "metrics.json"),
                      metrics.to_dict())
    LOG.info("surrogate test R2 %s", metrics.r2)


def _write_confusion_csv(path, confusion):
    lines = ["true\\pred," + ",".join(ms.LEVEL2)]
    for label, row in zip(ms.LEVEL2, confusion):
        lines.append(label + "," + ",".join(str(int(v)) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def _load_checkpoint_model(config):
    model, extra = md.load_checkpoint(config["checkpoint"], config["name"])
    return model, extra


def _classifier_split(config, extra, split):
    dataset = ms.load_dataset(config["data"])
    standardizer = bg.Standardizer.from_dict(extra["standardizer"])
    samples = [standardizer.apply(dataset.aggregate(s))
               for s in dataset.split_samples(split)]
    keys = [ms.ModeDataset.key(s)
            for s in dataset.split_samples(split)]
    return samples, keys, dataset


def cmd_eval(config, seed, out_dir, workers):
    model, extra = _load_checkpoint_model(config)
    split = config["split"]
    if model.config["kind"] == "mode_classifier":
        samples, _, _ = _classifier_split(config, extra, split)
        metrics = tr.evaluate_classifier(model, samples)
        _write_confusion_csv(os.path.join(out_dir, "confusion.csv"),
                             metrics.confusion)
    else:
        data, _ = _load_graph_split(config["data"])
        metrics = tr.evaluate_surrogate(model, data[split])
    atomic_write_json(os.path.join(out_dir, "metrics.json"),
                      metrics.to_dict())
    LOG.info("eval metrics written to %s", out_dir)


def cmd_explain(config, seed, out_dir, workers):
    model, extra = _load_checkpoint_model(config)
    if model.config["kind"] == "mode_classifier":
        dataset = ms.load_dataset(config["data"])
        standardizer = bg.Standardizer.from_dict(extra["standardizer"])
        wanted = config["sample"]
        matches = [s for s in dataset.samples
                   if ms.ModeDataset.key(s) == wanted]
        if not matches:
            raise ConfigError(f"sample {wanted!r} not found in the dataset")
        sample = standardizer.apply(dataset.aggregate(matches[0]))
        target = config["target"]
        amap = insight.attribute(model, sample, target)
        doc = {"target": target, "sample": wanted,
               "node_names": amap.node_names,
               "node_scores": amap.node_scores.tolist(),
               "edges": amap.edges.tolist(),
               "edge_scores": amap.edge_scores.tolist()}
    else:
        data, manifest = _load_graph_split(config["data"])
        # names/splits pair ordering matches the manifest ordering
        flat = {}
        cursor = {"train": 0, "val": 0, "test": 0}
        for n, sp in zip(manifest["names"], manifest["splits"]):
            flat[n] = data[sp][cursor[sp]]
            cursor[sp] += 1
        if config["sample"] not in flat:
            raise ConfigError(f"sample {config['sample']!r} not found")
        aero = flat[config["sample"]]
        target = tuple(config["target"])
        amap = insight.attribute(model, aero, target)
        doc = {"target": list(amap.target), "sample": config["sample"],
               "node_scores": amap.node_scores.tolist()}
    atomic_write_json(os.path.join(out_dir, "attribution.json"), doc)
    if config["csv"]:
        lines = ["node,score"] + [
            f"{i},{s!r}" for i, s in enumerate(doc["node_scores"])]
        atomic_write_text(os.path.join(out_dir, "attribution.csv"),
                          "\n".join(lines) + "\n")
    LOG.info("attribution written to %s", out_dir)


def cmd_suggest_data(config, seed, out_dir, workers):
    model, extra = _load_checkpoint_model(config)
    split = config["split"]
    if model.config["kind"] == "mode_classifier":
        samples, keys, _ = _classifier_split(
            {**config, "data": config["candidates"]}, extra, split)
        pool = list(zip(keys, samples))
    else:
        data, manifest = _load_graph_split(config["candidates"])
        names = [n for n, sp in zip(manifest["names"], manifest["splits"])
                 if sp == split]
        pool = list(zip(names, data[split]))
    ranked = insight.rank_data_candidates(
        model, pool, passes=int(config["passes"]),
        top_k=config["top_k"], seed=seed)
    atomic_write_json(os.path.join(out_dir, "ranking.json"), ranked)
    LOG.info("ranked %d candidates", len(ranked))


def cmd_report(config, seed, out_dir, workers):
    rows = {}
    for label, path in config["runs"].items():
        with open(path) as f:
            rows[label] = json.load(f)
    doc = {"runs": rows, "baselines": {"meshgraphnet": "not-run"},
           "combined_weights": {"level1": 0.4, "level2": 0.6}}
    atomic_write_json(os.path.join(out_dir, "report.json"), doc)

    lines = ["run summary", "==========="]
    for label, metrics in rows.items():
        lines.append("")
        lines.append(label)
        if "l1_accuracy" in metrics:
            lines.append(
                "  L1 %.3f  L2 %.3f  Comb %.3f  consistency %.3f" % (
                    metrics["l1_accuracy"], metrics["l2_accuracy"],
                    metrics["combined"], metrics["consistency"]))
        if "r2" in metrics:
            lines.append("  R2 pressure %.4f  R2 wss %.4f" % (
                metrics["r2"]["pressure"], metrics["r2"]["wss"]))
            lines.append("  MAE pressure %.4f Pa  MAE wss %.4f Pa" % (
                metrics["mae"]["pressure"], metrics["mae"]["wss"]))
    lines.append("")
    lines.append("meshgraphnet baseline: not-run")
    atomic_write_text(os.path.join(out_dir, "report.txt"),
                      "\n".join(lines) + "\n")
    LOG.info("report written to %s", out_dir)


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

_COMMANDS = {
    "synth-modes": (cmd_synth_modes, {
        "noise": None, "reference_class_counts": None,
        "target_eval_count": None}),
    "synth-aero": (cmd_synth_aero, {
        "counts": {"A": 4, "B": 4, "C": 4}, "u_range": [20.0, 60.0],
        "rho": 1.2, "subdivision": 3, "perturbation": 0.05}),
    "build-graphs": (cmd_build_graphs, {
        "dataset": REQUIRED, "nodes": 300, "k": 16, "method": "symmetric"}),
    "train-modes": (cmd_train_modes, {
        "dataset": REQUIRED, "model": {}, "epochs": 200, "batch_size": 16,
        "lr": 3e-3, "patience": 20}),
    "train-aero": (cmd_train_aero, {
        "graphs": REQUIRED, "model": {}, "loss": {}, "epochs": 60,
        "batch_size": 4, "lr": 2e-3, "patience": 20}),
    "eval": (cmd_eval, {
        "checkpoint": REQUIRED, "name": REQUIRED, "data": REQUIRED,
        "split": "test"}),
    "explain": (cmd_explain, {
        "checkpoint": REQUIRED, "name": REQUIRED, "data": REQUIRED,
        "sample": REQUIRED, "target": REQUIRED, "csv": False}),
    "suggest-data": (cmd_suggest_data, {
        "checkpoint": REQUIRED, "name": REQUIRED, "candidates": REQUIRED,
        "split": "test", "passes": 30, "top_k": None}),
    "report": (cmd_report, {"runs": REQUIRED}),
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="enggraph",
        description="engineering-graph toolkit: synthetic datasets, graph "
                    "construction, training, evaluation, and explanation")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON config path")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True, help="run output directory")
        p.add_argument("--workers", type=int, default=os.cpu_count())
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    try:
        _setup_logging()
        handler, defaults = _COMMANDS[args.command]
        config = load_config(args.config, defaults)
        if args.workers is not None and args.workers < 1:
            raise ConfigError("--workers must be at least 1")
        os.makedirs(args.out, exist_ok=True)
        handler(config, args.seed, args.out, args.workers)
        _write_resolved(args.out, args.command, config, args.seed,
                        args.workers)
    except (ConfigError, SchemaError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except EnggraphError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # unexpected failure, still a diagnostic
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
