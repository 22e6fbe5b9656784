"""Explainability and uncertainty tools.

Node attribution is gradient x input on the model's node features; the
classifier additionally gets per-edge scores from attention weights scaled by
edge-feature gradient magnitudes. Uncertainty comes from MC dropout: repeated
stochastic passes give predictive entropy for the classifier and per-node
pressure variance for the surrogate. The same scores drive a ranking of
candidate samples by expected value of labeling or simulating them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import models as md
from .errors import ContractError
from .modesynth import LEVEL1, LEVEL2


@dataclass
class AttributionMap:
    node_scores: np.ndarray          # (N,) non-negative, sums to 1
    edge_scores: np.ndarray | None   # (E,) for the classifier, else None
    edges: np.ndarray | None         # (E, 2) edge list the scores refer to
    target: object                   # class name or (node, field) pair
    node_names: list | None = None
    meta: dict = field(default_factory=dict)


@dataclass
class UncertaintyReport:
    kind: str                        # "classifier" | "surrogate"
    passes: int
    score: float                     # entropy or area-weighted mean variance
    entropy: float | None = None
    mean_probs: np.ndarray | None = None
    node_variance: np.ndarray | None = None


SURROGATE_FIELDS = ("pressure", "tau_x", "tau_y", "tau_z")


def _normalize_scores(raw):
    total = raw.sum()
    if total <= 0.0:
        return np.full(raw.shape, 1.0 / raw.size)
    return raw / total


def attribute(model, sample, target):
    """Gradient x input attribution for one sample.

    Classifier: target is a fine or coarse class name; scores explain the
    target class log-probability. Surrogate: target is (node index, field
    name) and scores explain that node's predicted field value.
    """
    kind = model.config["kind"]
    if kind == "mode_classifier":
        return _attribute_classifier(model, sample, target)
    return _attribute_surrogate(model, sample, target)


def _attribute_classifier(model, sample, target):
    if target in LEVEL2:
        head, index = 1, LEVEL2.index(target)
    elif target in LEVEL1:
        head, index = 0, LEVEL1.index(target)
    else:
        raise ContractError(f"unknown target class {target!r}")
    prep = model.prepare(sample)
    tape = dc.Tape()
    node_leaf = tape.leaf(prep.node_features, name="nodes")
    edge_leaf = tape.leaf(prep.edge_features, name="edges")
    prep.node_features = node_leaf
    prep.edge_features = edge_leaf
    p1, p2, attn = model.forward(prep, sample.pooled)
    probs = (p1, p2)[head]
    onehot = np.zeros((probs.shape[1], 1))
    onehot[index, 0] = 1.0
    picked = dc.matmul(probs, dc.DiffTensor(onehot))
    loss = dc.log(dc.add(picked, dc.DiffTensor(np.full((1, 1), 1e-300))))
    dc.backward(tape, loss)

    node_scores = _normalize_scores(
        np.sum(np.abs(node_leaf.grad) * np.abs(node_leaf.values), axis=1))
    mean_attn = np.mean([a.values.mean(axis=1) for a in attn], axis=0)
    edge_grad = np.sum(np.abs(edge_leaf.grad), axis=1)
    return AttributionMap(
        node_scores=node_scores,
        edge_scores=mean_attn * edge_grad,
        edges=np.asarray(prep.edges),
        target=target,
        node_names=sample.graph.node_names,
        meta={"head": "level1" if head == 0 else "level2"})


def _attribute_surrogate(model, aero, target):
    node, fname = target
    if fname in SURROGATE_FIELDS:
        findex = SURROGATE_FIELDS.index(fname)
    elif isinstance(fname, (int, np.integer)) and 0 <= fname < 4:
        findex = int(fname)
    else:
        raise ContractError(f"unknown target field {fname!r}")
    n = aero.graph.num_nodes
    if not 0 <= node < n:
        raise ContractError(f"target node {node} out of range")
    prep = model.prepare(aero.graph)
    tape = dc.Tape()
    node_leaf = tape.leaf(prep.node_features, name="nodes")
    prep.node_features = node_leaf
    out = model.forward(prep)
    row = np.zeros((n, 1))
    row[node, 0] = 1.0
    col = np.zeros((4, 1))
    col[findex, 0] = 1.0
    picked = dc.matmul(dc.matmul(dc.DiffTensor(row.T), out),
                       dc.DiffTensor(col))
    dc.backward(tape, picked)
    node_scores = _normalize_scores(
        np.sum(np.abs(node_leaf.grad) * np.abs(node_leaf.values), axis=1))
    return AttributionMap(node_scores=node_scores, edge_scores=None,
                          edges=None, target=(int(node),
                                              SURROGATE_FIELDS[findex]))


def mc_uncertainty(model, sample, passes=30, seed=0):
    """MC-dropout uncertainty for one sample.

    Classifier: predictive entropy of the mean fine-class probabilities.
    Surrogate: per-node variance of the denormalized pressure, summarized by
    its area-weighted mean.
    """
    if passes < 2:
        raise ContractError("MC uncertainty needs at least 2 passes")
    rng = np.random.default_rng(np.random.SeedSequence([seed, passes]))
    kind = model.config["kind"]
    if kind == "mode_classifier":
        probs = np.stack([
            md.classify_mode(sample, model, mode="mc-dropout", rng=rng)[1]
            for _ in range(passes)])
        mean = probs.mean(axis=0)
        entropy = float(-np.sum(mean * np.log(np.maximum(mean, 1e-300))))
        return UncertaintyReport(kind="classifier", passes=passes,
                                 score=entropy, entropy=entropy,
                                 mean_probs=mean)
    outs = np.stack([
        md.predict_fields(sample.graph, model, mode="mc-dropout", rng=rng)
        for _ in range(passes)])
    p = outs[:, :, 0] * sample.norm["q_inf"]
    var = p.var(axis=0)
    # identical passes mean zero variance by definition; numpy's summation
    # order can otherwise leave ~1e-28 residue that breaks exactness
    var[p.max(axis=0) == p.min(axis=0)] = 0.0
    areas = sample.graph.node_features[:, 3]
    score = float(np.sum(var * areas) / areas.sum())
    return UncertaintyReport(kind="surrogate", passes=passes, score=score,
                             node_variance=var)


def rank_data_candidates(model, candidates, passes=30, top_k=None, seed=0):
    """Rank candidate samples by MC-dropout uncertainty, most valuable first.

    candidates is a list of (sample_id, sample) pairs; ties break by id so
    the ordering is a total order. Returns a list of dict entries.
    """
    if not candidates:
        raise ContractError("candidate pool is empty")
    entries = []
    for sample_id, sample in candidates:
        report = mc_uncertainty(model, sample, passes=passes, seed=seed)
        entries.append({"id": str(sample_id), "score": report.score,
                        "kind": report.kind, "passes": passes})
    entries.sort(key=lambda e: (-e["score"], e["id"]))
    if top_k is not None:
        entries = entries[:top_k]
    return entries
