"""Losses, training loops, metrics, and baseline variants.

Classification uses weighted cross-entropy for the coarse head and a focal
term for the fine head. The aerodynamic surrogate trains on a data MSE plus
three physics regularizers: a stagnation-bound pressure penalty, a surface
mass-conservation penalty on the tangential shear field, and a tangency
penalty on the predicted shear vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import models as md
from .aerograph import AeroGraphSample
from .biwgraph import Standardizer
from .errors import ConfigError, ContractError, TrainingDivergedError
from .geomesh import DivergenceOperator
from .graph import EngineeringGraph
from .modesynth import LEVEL1, LEVEL2, LEVEL2_TO_LEVEL1


# ---------------------------------------------------------------------------
# loss configuration
# ---------------------------------------------------------------------------

@dataclass
class LossConfig:
    class_weights: np.ndarray | None = None   # (4,) coarse-head weights
    gamma: float = 2.0
    alpha: float = 1.0
    beta: float = 0.5
    lam_wss: float = 1.0
    lam_bern: float = 0.1
    lam_mass: float = 0.01
    lam_tan: float = 0.1
    c_bern: float = 3.0

    def __post_init__(self):
        for name in ("alpha", "beta", "lam_wss", "lam_bern", "lam_mass",
                     "lam_tan", "c_bern"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.gamma < 0:
            raise ConfigError("gamma must be non-negative")
        if self.class_weights is not None:
            self.class_weights = np.asarray(self.class_weights, dtype=np.float64)
            if self.class_weights.shape != (len(LEVEL1),):
                raise ConfigError("class_weights must have one entry per "
                                  "coarse class")
            if np.any(self.class_weights < 0):
                raise ConfigError("class weights must be non-negative")


def level1_class_weights(labels):
    """Inverse-frequency weights over coarse labels, normalized to mean 1."""
    counts = np.zeros(len(LEVEL1))
    for l1, _ in labels:
        counts[LEVEL1.index(l1)] += 1
    counts[counts == 0] = 1.0
    w = 1.0 / counts
    return w / w.mean()


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

_EPS = 1e-12


def _clamp_min(x, floor):
    """max(x, floor) built from relu so it stays differentiable."""
    pad = dc.relu(dc.sub(dc.DiffTensor(np.full(x.shape, floor)), x))
    return dc.add(x, pad)


def _pick(prob_row, index, num_classes):
    onehot = np.zeros((num_classes, 1))
    onehot[index, 0] = 1.0
    return dc.matmul(prob_row, dc.DiffTensor(onehot))   # (1, 1)


def _label_indices(label):
    l1, l2 = label
    i1 = l1 if isinstance(l1, (int, np.integer)) else LEVEL1.index(l1)
    i2 = l2 if isinstance(l2, (int, np.integer)) else LEVEL2.index(l2)
    if not (0 <= i1 < len(LEVEL1) and 0 <= i2 < len(LEVEL2)):
        raise ContractError(f"label indices ({i1}, {i2}) out of range")
    return i1, i2


def classification_loss(probs1, probs2, labels, cfg=None):
    """Batch-averaged hierarchical loss.

    probs1/probs2 are lists of (1, 4) and (1, 11) probability rows (or single
    rows); labels are (level1, level2) pairs given as names or indices.
    """
    cfg = cfg or LossConfig()
    if not isinstance(probs1, (list, tuple)):
        probs1, probs2, labels = [probs1], [probs2], [labels]
    if not (len(probs1) == len(probs2) == len(labels)) or not probs1:
        raise ContractError("batch lists must be non-empty and equal length")
    weights = (np.ones(len(LEVEL1)) if cfg.class_weights is None
               else cfg.class_weights)
    terms = []
    for p1, p2, label in zip(probs1, probs2, labels):
        i1, i2 = _label_indices(label)
        logp1 = dc.log(_clamp_min(_pick(p1, i1, len(LEVEL1)), _EPS))
        py = _clamp_min(_pick(p2, i2, len(LEVEL2)), _EPS)
        focal = dc.powc(dc.sub(dc.DiffTensor(np.ones((1, 1))), py), cfg.gamma)
        logp2 = dc.mul(focal, dc.log(py))
        terms.append(dc.add(
            dc.scale(logp1, -cfg.beta * weights[i1]),
            dc.scale(logp2, -(1.0 - cfg.beta) * cfg.alpha)))
    return dc.reduce_mean(dc.concat(terms, axis=0))


def build_divergence(aero):
    """Finite-volume divergence constants for a downsampled aero graph.

    Positions, normals, and relative areas are reconstructed from the node
    features; the divergence value is invariant to the global area scale.
    """
    feats = aero.graph.node_features
    diag = aero.norm["diag"]
    pos = feats[:, 0:3] * diag + np.asarray(aero.norm["centroid"])
    normals = feats[:, 4:7]
    areas = feats[:, 3]
    edges = aero.graph.edges
    return DivergenceOperator.from_knn(pos, edges[:, 0], edges[:, 1],
                                       areas, normals)


def _mse(pred, target):
    d = dc.sub(pred, dc.DiffTensor(np.asarray(target, dtype=np.float64)))
    return dc.reduce_mean(dc.mul(d, d))


def physics_loss(p_hat, tau_hat, aero, cfg=None, div_op=None):
    """Physics-regularized surrogate loss on denormalized fields.

    p_hat (n, 1) and tau_hat (n, 3) are DiffTensors in physical units.
    Returns (total DiffTensor, per-term breakdown of floats).
    """
    cfg = cfg or LossConfig()
    n = aero.graph.num_nodes
    if p_hat.shape != (n, 1) or tau_hat.shape != (n, 3):
        raise ContractError("prediction shapes do not match the graph")
    if div_op is None:
        div_op = build_divergence(aero)
    q = aero.norm["q_inf"]
    normals = aero.graph.node_features[:, 4:7]

    l_data = dc.add(
        _mse(p_hat, aero.denormalize_pressure()[:, None]),
        dc.scale(_mse(tau_hat, aero.denormalize_wss()), cfg.lam_wss))

    dot = dc.reduce_sum(dc.mul(tau_hat, dc.DiffTensor(normals)),
                        axis=1, keepdims=True)                      # (n, 1)
    l_tan = dc.reduce_mean(dc.mul(dot, dot))

    over = dc.relu(dc.sub(p_hat, dc.DiffTensor(np.full((n, 1), q))))
    under = dc.relu(dc.sub(dc.DiffTensor(np.full((n, 1), -cfg.c_bern * q)),
                           p_hat))
    l_bern = dc.reduce_mean(dc.add(dc.mul(over, over), dc.mul(under, under)))

    # tangential projection, edge midpoints, finite-volume divergence
    g = dc.sub(tau_hat, dc.mul(dot, dc.DiffTensor(normals)))
    mid = dc.scale(dc.add(dc.gather_rows(g, div_op.src),
                          dc.gather_rows(g, div_op.dst)), 0.5)
    flux = dc.reduce_sum(dc.mul(mid, dc.DiffTensor(div_op.offsets)),
                         axis=1, keepdims=True)
    contrib = dc.mul(flux, dc.DiffTensor(div_op.weights[:, None]))
    div = dc.mul(dc.scatter_add_rows(contrib, div_op.src, n),
                 dc.DiffTensor(1.0 / div_op.areas[:, None]))
    area_w = div_op.areas / div_op.areas.sum()
    l_mass = dc.reduce_sum(dc.mul(dc.mul(div, div),
                                  dc.DiffTensor(area_w[:, None])))

    total = dc.add(l_data, dc.add(
        dc.scale(l_bern, cfg.lam_bern),
        dc.add(dc.scale(l_mass, cfg.lam_mass), dc.scale(l_tan, cfg.lam_tan))))
    breakdown = {
        "data": float(l_data.values), "tan": float(l_tan.values),
        "bern": float(l_bern.values), "mass": float(l_mass.values),
        "total": float(total.values),
    }
    return total, breakdown


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def r2_score(y, y_hat):
    """Coefficient of determination pooled over all entries."""
    y = np.asarray(y, dtype=np.float64).ravel()
    y_hat = np.asarray(y_hat, dtype=np.float64).ravel()
    ss_res = np.sum((y - y_hat) ** 2)
    ss_tot = np.sum((y - y.mean()) ** 2)
    if ss_tot == 0.0:
        return 1.0 if ss_res == 0.0 else -np.inf
    return float(1.0 - ss_res / ss_tot)


def mean_absolute_error(y, y_hat):
    return float(np.mean(np.abs(np.asarray(y) - np.asarray(y_hat))))


def combined_score(l1_accuracy, l2_accuracy):
    return 0.4 * l1_accuracy + 0.6 * l2_accuracy


def confusion_matrix(true_idx, pred_idx, num_classes=len(LEVEL2)):
    m = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(m, (np.asarray(true_idx), np.asarray(pred_idx)), 1)
    return m


@dataclass
class Metrics:
    l1_accuracy: float | None = None
    l2_accuracy: float | None = None
    combined: float | None = None
    consistency: float | None = None
    confusion: np.ndarray | None = None
    r2: dict | None = None
    mae: dict | None = None
    per_config: dict | None = None
    extras: dict = field(default_factory=dict)

    def to_dict(self):
        out = {}
        for name in ("l1_accuracy", "l2_accuracy", "combined", "consistency",
                     "r2", "mae", "per_config", "extras"):
            value = getattr(self, name)
            if value is not None:
                out[name] = value
        if self.confusion is not None:
            out["confusion"] = self.confusion.tolist()
        return out


_L2_PARENT = np.array([LEVEL1.index(LEVEL2_TO_LEVEL1[l]) for l in LEVEL2])


def decode_hierarchical(p1, p2):
    """Joint argmax over the taxonomy: the fine class maximizing
    p2[j] * p1[parent(j)]; the family call is that class's parent, so the
    two predictions are consistent by construction."""
    joint = np.asarray(p2) * np.asarray(p1)[_L2_PARENT]
    i2 = int(np.argmax(joint))
    return int(_L2_PARENT[i2]), i2


def evaluate_classifier(model, samples):
    """Metrics over standardized, labeled region-graph samples."""
    if not samples:
        raise ContractError("cannot evaluate an empty split")
    true1, true2, pred1, pred2 = [], [], [], []
    consistent = 0
    for sample in samples:
        p1, p2, _, _ = md.classify_mode(sample, model)
        i1, i2 = decode_hierarchical(p1, p2)
        pred1.append(i1)
        pred2.append(i2)
        t1, t2 = _label_indices(sample.label)
        true1.append(t1)
        true2.append(t2)
        if LEVEL2_TO_LEVEL1[LEVEL2[i2]] == LEVEL1[i1]:
            consistent += 1
    true1, true2 = np.asarray(true1), np.asarray(true2)
    pred1, pred2 = np.asarray(pred1), np.asarray(pred2)
    l1 = float(np.mean(true1 == pred1))
    l2 = float(np.mean(true2 == pred2))
    per_vehicle = {}
    vids = [s.meta.get("vehicle_id", "?") for s in samples]
    for vid in sorted(set(vids)):
        mask = np.asarray([v == vid for v in vids])
        per_vehicle[vid] = {
            "l1_accuracy": float(np.mean(true1[mask] == pred1[mask])),
            "l2_accuracy": float(np.mean(true2[mask] == pred2[mask])),
            "count": int(mask.sum()),
        }
    return Metrics(
        l1_accuracy=l1, l2_accuracy=l2, combined=combined_score(l1, l2),
        consistency=consistent / len(samples),
        confusion=confusion_matrix(true2, pred2),
        per_config=per_vehicle,
    )


def evaluate_surrogate(model, samples):
    """Pooled R2 and MAE in physical units over aero graph samples."""
    if not samples:
        raise ContractError("cannot evaluate an empty split")
    rows = []
    for aero in samples:
        out = md.predict_fields(aero.graph, model)
        p_hat = out[:, 0] * aero.norm["q_inf"]
        tau_hat = out[:, 1:4] * aero.norm["tau_ref"]
        rows.append((aero, aero.denormalize_pressure(), p_hat,
                     aero.denormalize_wss(), tau_hat))
    p_true = np.concatenate([r[1] for r in rows])
    p_pred = np.concatenate([r[2] for r in rows])
    t_true = np.concatenate([r[3] for r in rows])
    t_pred = np.concatenate([r[4] for r in rows])
    per_config = {}
    fams = [r[0].graph.meta.get("body_config", "?") for r in rows]
    for fam in sorted(set(fams)):
        sel = [r for r, f in zip(rows, fams) if f == fam]
        per_config[fam] = {
            "r2_pressure": r2_score(np.concatenate([r[1] for r in sel]),
                                    np.concatenate([r[2] for r in sel])),
            "r2_wss": r2_score(np.concatenate([r[3] for r in sel]),
                               np.concatenate([r[4] for r in sel])),
            "count": len(sel),
        }
    per_sample_p = [r2_score(r[1], r[2]) for r in rows]
    per_sample_t = [r2_score(r[3], r[4]) for r in rows]
    return Metrics(
        r2={"pressure": r2_score(p_true, p_pred),
            "wss": r2_score(t_true, t_pred)},
        mae={"pressure": mean_absolute_error(p_true, p_pred),
             "wss": mean_absolute_error(t_true, t_pred)},
        per_config=per_config,
        extras={"r2_per_sample_mean": {
            "pressure": float(np.mean(per_sample_p)),
            "wss": float(np.mean(per_sample_t))}},
    )


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: object
    curve: list
    best_epoch: int
    best_metric: float
    lr_used: float
    retried: bool = False


def _grad_dict(leaves, frozen=None):
    grads = {name: leaf.grad for name, leaf in leaves.items()}
    if frozen:
        for name in grads:
            if frozen(name):
                grads[name] = np.zeros_like(grads[name])
    return grads


def _zero_frozen(params, frozen):
    if frozen:
        for name, arr in params.items():
            if frozen(name):
                arr[...] = 0.0


def _with_retry(run, model, init_params, lr):
    try:
        return run(lr, False)
    except TrainingDivergedError:
        model.params = init_params.copy()
        return run(lr / 2.0, True)


def prepare_mode_inputs(dataset, normalize_amplitude=True):
    """Aggregate every mode sample onto the region graph and z-score node
    features with statistics fitted on the training split.

    Returns (split -> list of standardized samples, standardizer).
    """
    by_split = {"train": [], "val": [], "test": []}
    for sample in dataset.samples:
        split = dataset.splits[dataset.key(sample)]
        by_split[split].append(
            dataset.aggregate(sample, normalize_amplitude=normalize_amplitude))
    standardizer = Standardizer.fit(by_split["train"])
    out = {split: [standardizer.apply(s) for s in items]
           for split, items in by_split.items()}
    return out, standardizer


def strip_edges(graph):
    """Copy of a graph with every edge removed (per-node MLP baseline)."""
    return EngineeringGraph(
        node_features=graph.node_features,
        edges=np.zeros((0, 2), dtype=np.int64),
        edge_features=np.zeros((0, graph.edge_features.shape[1])),
        node_names=graph.node_names, meta=dict(graph.meta))


def _attention_frozen(name):
    """Parameters zeroed to turn attention into degree-normalized averaging."""
    return (".a_src" in name or ".a_dst" in name or ".We_att" in name)


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def train_classifier(model, data, loss_cfg=None, epochs=200, batch_size=16,
                     lr=3e-3, patience=20, seed=0, frozen=None):
    """Mini-batch Adam on the hierarchical loss; early stopping on the
    combined validation score. data maps "train"/"val" to standardized
    region-graph samples.
    """
    train, val = data["train"], data["val"]
    if not train or not val:
        raise ContractError("training requires non-empty train and val splits")
    if loss_cfg is None:
        loss_cfg = LossConfig(
            class_weights=level1_class_weights([s.label for s in train]))
    preps = [model.prepare(s) for s in train]
    pooled = [s.pooled for s in train]
    labels = [s.label for s in train]
    init_params = model.params.copy()

    def run(lr_now, retried):
        _zero_frozen(model.params, frozen)
        order_rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
        drop_rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
        state = dc.AdamState(model.params, lr=lr_now)
        curve, best = [], (-np.inf, -1, None)
        stale = 0
        for epoch in range(epochs):
            losses = []
            for batch in _batches(len(train), batch_size, order_rng):
                tape = dc.Tape()
                leaves = md.as_leaves(tape, model.params)
                p1s, p2s, ys = [], [], []
                for i in batch:
                    p1, p2, _ = model.forward(preps[i], pooled[i],
                                              mode="train", rng=drop_rng,
                                              params=leaves)
                    p1s.append(p1)
                    p2s.append(p2)
                    ys.append(labels[i])
                loss = classification_loss(p1s, p2s, ys, loss_cfg)
                if not np.isfinite(loss.values):
                    raise TrainingDivergedError("loss")
                dc.backward(tape, loss)
                dc.adam_step(model.params, _grad_dict(leaves, frozen), state)
                _zero_frozen(model.params, frozen)
                losses.append(float(loss.values))
            metric = evaluate_classifier(model, val).combined
            curve.append({"epoch": epoch, "train_loss": float(np.mean(losses)),
                          "val_combined": metric})
            if metric > best[0]:
                best = (metric, epoch, model.params.copy())
                stale = 0
            else:
                stale += 1
                if stale >= patience:
                    break
        model.params = best[2]
        return TrainResult(model=model, curve=curve, best_epoch=best[1],
                           best_metric=best[0], lr_used=lr_now,
                           retried=retried)

    return _with_retry(run, model, init_params, lr)


_P_COL = np.array([[1.0], [0.0], [0.0], [0.0]])
_TAU_COLS = np.concatenate([np.zeros((1, 3)), np.eye(3)], axis=0)


def surrogate_sample_loss(out, aero, cfg, div_op):
    """Physics loss of one normalized model output, scaled by 1/q_inf^2 so
    samples at different speeds contribute comparable magnitudes."""
    q, tref = aero.norm["q_inf"], aero.norm["tau_ref"]
    p_hat = dc.scale(dc.matmul(out, dc.DiffTensor(_P_COL)), q)
    tau_hat = dc.scale(dc.matmul(out, dc.DiffTensor(_TAU_COLS)), tref)
    total, breakdown = physics_loss(p_hat, tau_hat, aero, cfg, div_op)
    return dc.scale(total, 1.0 / q ** 2), breakdown


def train_surrogate(model, data, loss_cfg=None, epochs=60, batch_size=4,
                    lr=2e-3, patience=20, seed=0, frozen=None,
                    strip=False):
    """Mini-batch Adam on the physics-regularized loss; early stopping on the
    mean of the pressure and WSS validation R2. data maps "train"/"val" to
    AeroGraphSample lists. strip=True removes edges (MLP baseline).
    """
    train, val = data["train"], data["val"]
    if not train or not val:
        raise ContractError("training requires non-empty train and val splits")
    loss_cfg = loss_cfg or LossConfig()
    if strip:
        train = [_strip_aero(a) for a in train]
        val = [_strip_aero(a) for a in val]
    preps = [model.prepare(a.graph) for a in train]
    div_ops = [build_divergence(a) for a in train]
    init_params = model.params.copy()

    def val_metric():
        m = evaluate_surrogate(model, val)
        return 0.5 * (m.r2["pressure"] + m.r2["wss"])

    def run(lr_now, retried):
        _zero_frozen(model.params, frozen)
        order_rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
        drop_rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
        state = dc.AdamState(model.params, lr=lr_now)
        curve, best = [], (-np.inf, -1, None)
        stale = 0
        for epoch in range(epochs):
            losses = []
            for batch in _batches(len(train), batch_size, order_rng):
                tape = dc.Tape()
                leaves = md.as_leaves(tape, model.params)
                terms = []
                for i in batch:
                    out = model.forward(preps[i], mode="train", rng=drop_rng,
                                        params=leaves)
                    total, _ = surrogate_sample_loss(out, train[i], loss_cfg,
                                                     div_ops[i])
                    terms.append(dc.scale(total, 1.0 / len(batch)))
                loss = terms[0]
                for term in terms[1:]:
                    loss = dc.add(loss, term)
                if not np.isfinite(loss.values):
                    raise TrainingDivergedError("loss")
                dc.backward(tape, loss)
                dc.adam_step(model.params, _grad_dict(leaves, frozen), state)
                _zero_frozen(model.params, frozen)
                losses.append(float(loss.values))
            metric = val_metric()
            curve.append({"epoch": epoch, "train_loss": float(np.mean(losses)),
                          "val_r2_mean": metric})
            if metric > best[0]:
                best = (metric, epoch, model.params.copy())
                stale = 0
            else:
                stale += 1
                if stale >= patience:
                    break
        model.params = best[2]
        return TrainResult(model=model, curve=curve, best_epoch=best[1],
                           best_metric=best[0], lr_used=lr_now,
                           retried=retried)

    return _with_retry(run, model, init_params, lr)


def _strip_aero(aero):
    return AeroGraphSample(graph=strip_edges(aero.graph),
                           p_target=aero.p_target, tau_target=aero.tau_target,
                           norm=aero.norm, ds=aero.ds)


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------

BASELINES = ("mlp", "mean-pool-gcn", "no-physics", "single-vehicle")


def run_classifier_baselines(data, which, model_factory, seed=0,
                             reference_vehicle=None, **train_kw):
    """Train requested classifier variants and evaluate on the test split.

    mlp strips edges; mean-pool-gcn freezes attention at uniform weights;
    single-vehicle restricts training to the reference vehicle. The
    MeshGraphNet comparison point is reported as not-run.
    """
    results = {"meshgraphnet": {"status": "not-run"}}
    for name in which:
        if name == "no-physics":
            raise ConfigError("no-physics applies to the surrogate only")
        if name not in BASELINES:
            raise ConfigError(f"unknown baseline {name!r}")
        model = model_factory(seed)
        variant = dict(data)
        frozen = None
        test = data["test"]
        if name == "mlp":
            variant = {k: [_strip_region(s) for s in v]
                       for k, v in data.items()}
            test = variant["test"]
        elif name == "mean-pool-gcn":
            frozen = _attention_frozen
        elif name == "single-vehicle":
            if reference_vehicle is None:
                raise ConfigError("single-vehicle needs a reference vehicle id")
            variant = dict(data)
            variant["train"] = [s for s in data["train"]
                                if s.meta.get("vehicle_id") == reference_vehicle]
        result = train_classifier(model, variant, seed=seed, frozen=frozen,
                                  **train_kw)
        results[name] = {"metrics": evaluate_classifier(result.model, test),
                         "result": result}
    return results


def _strip_region(sample):
    from .biwgraph import RegionGraphSample
    return RegionGraphSample(graph=strip_edges(sample.graph),
                             pooled=sample.pooled, label=sample.label,
                             meta=dict(sample.meta))


def run_surrogate_baselines(data, which, model_factory, seed=0, **train_kw):
    """Train requested surrogate variants and evaluate on the test split."""
    results = {"meshgraphnet": {"status": "not-run"}}
    for name in which:
        if name == "single-vehicle":
            raise ConfigError("single-vehicle applies to the classifier only")
        if name not in BASELINES:
            raise ConfigError(f"unknown baseline {name!r}")
        model = model_factory(seed)
        frozen = None
        strip = False
        loss_cfg = None
        test = data["test"]
        if name == "mlp":
            strip = True
            test = [_strip_aero(a) for a in test]
        elif name == "mean-pool-gcn":
            frozen = _attention_frozen
        elif name == "no-physics":
            loss_cfg = LossConfig(lam_bern=0.0, lam_mass=0.0, lam_tan=0.0)
        result = train_surrogate(model, data, loss_cfg=loss_cfg, seed=seed,
                                 frozen=frozen, strip=strip, **train_kw)
        results[name] = {"metrics": evaluate_surrogate(result.model, test),
                         "result": result}
    return results
