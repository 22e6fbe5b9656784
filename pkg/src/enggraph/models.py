"""Graph-attention models built on the diffcore tape.

Two architectures share one edge-aware attention layer: a hierarchical mode
classifier (attention trunk, region-aware pooling, dual softmax heads) and an
encoder-process-decoder surrogate for aerodynamic surface fields (residual
attention blocks with layer normalization and a feed-forward sublayer).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .errors import ContractError, ShapeError
from .graph import sort_edges_by_dst


def _xavier(rng, shape):
    fan_in = shape[0] if len(shape) > 1 else shape[0]
    fan_out = shape[-1]
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def _head_select(heads, width):
    """Constant (H*W, H) block mask: per-head reduction as one matmul."""
    m = np.zeros((heads * width, heads))
    for h in range(heads):
        m[h * width:(h + 1) * width, h] = 1.0
    return m


def _head_average(heads, width):
    """Constant (H*W, W) matrix averaging head blocks."""
    m = np.zeros((heads * width, width))
    for h in range(heads):
        m[h * width:(h + 1) * width] += np.eye(width) / heads
    return m


@dataclass
class PreparedGraph:
    """Static per-sample arrays: self-loops added, edges grouped by target."""

    node_features: np.ndarray       # (N, F)
    edges: np.ndarray               # (E, 2) sorted by dst
    edge_features: np.ndarray       # (E, Fe+1), last column flags self-loops
    seg_ptr: np.ndarray             # (N+1,)
    meta: dict = field(default_factory=dict)

    @property
    def num_nodes(self):
        return self.node_features.shape[0]


def prepare_graph(graph):
    """Append a self-loop indicator column, add self-loops, sort by target."""
    feats = np.concatenate(
        [graph.edge_features, np.zeros((graph.num_edges, 1))], axis=1)
    loop_feat = np.zeros(feats.shape[1])
    loop_feat[-1] = 1.0
    loops = np.stack([np.arange(graph.num_nodes)] * 2, axis=1)
    edges = np.concatenate([graph.edges, loops], axis=0)
    feats = np.concatenate(
        [feats, np.tile(loop_feat, (graph.num_nodes, 1))], axis=0)
    es, fs, seg_ptr = sort_edges_by_dst(edges, feats, graph.num_nodes)
    return PreparedGraph(graph.node_features, es, fs, seg_ptr,
                         meta=dict(graph.meta))


def gat_layer_forward(h, prep, heads, head_width, w, b, a_src, a_dst,
                      e_att, e_msg, v=None, select=None, expand=None):
    """One edge-aware attention pass.

    e_att (E, H) and e_msg (E, H*W) are the edge contributions to logits and
    messages; callers derive them from raw or encoded edge features. Returns
    (aggregated (N, H*W), attention (E, H)).
    """
    if select is None:
        select = _head_select(heads, head_width)
        expand = select.T
    wh = dc.add(dc.matmul(h, w), b)
    s_src = dc.matmul(dc.mul(wh, a_src), select)
    s_dst = dc.matmul(dc.mul(wh, a_dst), select)
    src, dst = prep.edges[:, 0], prep.edges[:, 1]
    logits = dc.leaky_relu(
        dc.add(dc.add(dc.gather_rows(s_src, src), dc.gather_rows(s_dst, dst)),
               e_att))
    alpha = dc.segment_softmax(logits, prep.seg_ptr)
    values = wh if v is None else dc.add(dc.matmul(h, v[0]), v[1])
    messages = dc.add(dc.gather_rows(values, src), e_msg)
    weighted = dc.mul(messages, dc.matmul(alpha, expand))
    agg = dc.segment_sum(weighted, prep.seg_ptr)
    return agg, alpha


def as_leaves(tape, params):
    """Register every parameter as a tape leaf; returns name -> DiffTensor."""
    return {name: tape.leaf(arr, name=name) for name, arr in params.items()}


def _resolve(params, name):
    return params[name]


def _as_dt(x):
    """Wrap an array, passing DiffTensors (attribution leaves) through."""
    return x if isinstance(x, dc.DiffTensor) else dc.DiffTensor(x)


def _dense(x, params, name, act=None):
    out = dc.add(dc.matmul(x, _resolve(params, name + ".W")),
                 _resolve(params, name + ".b"))
    return act(out) if act else out


# ---------------------------------------------------------------------------
# hierarchical mode classifier
# ---------------------------------------------------------------------------

HYBRID_GAP = 0.15


class ModeClassifier:
    """Attention trunk over the 20-region graph, mean pooling concatenated
    with the six engineered scalars, shared dense trunk, dual heads."""

    def __init__(self, node_dim=10, edge_dim=6, pooled_dim=6, layers=4,
                 heads=8, head_width=32, trunk_width=64, dropout=0.1, seed=0):
        self.config = {
            "kind": "mode_classifier", "node_dim": node_dim,
            "edge_dim": edge_dim, "pooled_dim": pooled_dim, "layers": layers,
            "heads": heads, "head_width": head_width,
            "trunk_width": trunk_width, "dropout": dropout,
        }
        rng = np.random.default_rng(seed)
        hd = heads * head_width
        p = dc.ModelParams()
        in_dim = node_dim
        for layer in range(layers):
            pre = f"gat{layer}"
            p[pre + ".W"] = _xavier(rng, (in_dim, hd))
            p[pre + ".b"] = np.zeros(hd)
            p[pre + ".a_src"] = _xavier(rng, (hd,))
            p[pre + ".a_dst"] = _xavier(rng, (hd,))
            p[pre + ".We_att.W"] = _xavier(rng, (edge_dim + 1, heads))
            p[pre + ".We_att.b"] = np.zeros(heads)
            p[pre + ".We_msg.W"] = _xavier(rng, (edge_dim + 1, hd))
            p[pre + ".We_msg.b"] = np.zeros(hd)
            in_dim = hd
        p["trunk.W"] = _xavier(rng, (head_width + pooled_dim, trunk_width))
        p["trunk.b"] = np.zeros(trunk_width)
        p["head1.W"] = _xavier(rng, (trunk_width, 4))
        p["head1.b"] = np.zeros(4)
        p["head2.W"] = _xavier(rng, (trunk_width, 11))
        p["head2.b"] = np.zeros(11)
        self.params = p
        self._select = _head_select(heads, head_width)
        self._avg = _head_average(heads, head_width)

    def prepare(self, sample):
        if not sample.graph.meta.get("standardized"):
            raise ContractError("classifier expects standardized node features")
        return prepare_graph(sample.graph)

    def forward(self, prep, pooled, mode="eval", rng=None, params=None,
                tape=None):
        """Returns (level1 probs, level2 probs, attention list)."""
        cfg = self.config
        if prep.node_features.shape[1] != cfg["node_dim"]:
            raise ShapeError("node feature width mismatch")
        params = params if params is not None else self.params
        use_dropout = mode in ("train", "mc-dropout") and cfg["dropout"] > 0
        if use_dropout and rng is None:
            raise ContractError("dropout modes require an rng")
        keep = 1.0 - cfg["dropout"]

        h = _as_dt(prep.node_features)
        edge_in = _as_dt(prep.edge_features)
        attn = []
        for layer in range(cfg["layers"]):
            pre = f"gat{layer}"
            e_att = _dense(edge_in, params, pre + ".We_att")
            e_msg = _dense(edge_in, params, pre + ".We_msg")
            agg, alpha = gat_layer_forward(
                h, prep, cfg["heads"], cfg["head_width"],
                _resolve(params, pre + ".W"), _resolve(params, pre + ".b"),
                _resolve(params, pre + ".a_src"),
                _resolve(params, pre + ".a_dst"),
                e_att, e_msg, select=self._select, expand=self._select.T)
            attn.append(alpha)
            if layer < cfg["layers"] - 1:
                h = dc.relu(agg)
                if use_dropout:
                    h = dc.dropout_mask(h, keep, rng)
            else:
                h = dc.relu(dc.matmul(agg, self._avg))  # average heads

        pooled_nodes = dc.reduce_mean(h, axis=0, keepdims=True)  # (1, W)
        z = dc.concat([pooled_nodes,
                       dc.DiffTensor(np.asarray(pooled)[None, :])], axis=1)
        z = dc.relu(dc.add(dc.matmul(z, _resolve(params, "trunk.W")),
                           _resolve(params, "trunk.b")))
        if use_dropout:
            z = dc.dropout_mask(z, keep, rng)
        p1 = dc.softmax_rows(dc.add(dc.matmul(z, _resolve(params, "head1.W")),
                                    _resolve(params, "head1.b")))
        p2 = dc.softmax_rows(dc.add(dc.matmul(z, _resolve(params, "head2.W")),
                                    _resolve(params, "head2.b")))
        return p1, p2, attn


def classify_mode(sample, model, mode="eval", rng=None):
    """Returns (level1 probs (4,), level2 probs (11,), hybrid flag, attention)."""
    if mode not in ("train", "eval", "mc-dropout"):
        raise ContractError(f"unknown inference mode {mode!r}")
    prep = model.prepare(sample)
    p1, p2, attn = model.forward(prep, sample.pooled, mode=mode, rng=rng)
    probs2 = p2.values[0]
    top = np.sort(probs2)[::-1]
    hybrid = bool(top[0] - top[1] < HYBRID_GAP)
    return p1.values[0], probs2, hybrid, [a.values for a in attn]


# ---------------------------------------------------------------------------
# aerodynamic field surrogate
# ---------------------------------------------------------------------------

class AeroGraphNetLite:
    """Encoder, six residual attention blocks, per-node field decoder."""

    def __init__(self, node_dim=9, edge_dim=5, hidden=64, layers=6, heads=4,
                 head_width=None, dropout=0.1, seed=0):
        head_width = hidden if head_width is None else head_width
        self.config = {
            "kind": "aero_surrogate", "node_dim": node_dim,
            "edge_dim": edge_dim, "hidden": hidden, "layers": layers,
            "heads": heads, "head_width": head_width, "dropout": dropout,
        }
        rng = np.random.default_rng(seed)
        hd = heads * head_width  # per-head width, concatenated
        p = dc.ModelParams()
        p["enc_node1.W"] = _xavier(rng, (node_dim, hidden))
        p["enc_node1.b"] = np.zeros(hidden)
        p["enc_node2.W"] = _xavier(rng, (hidden, hidden))
        p["enc_node2.b"] = np.zeros(hidden)
        p["enc_edge1.W"] = _xavier(rng, (edge_dim + 1, hidden))
        p["enc_edge1.b"] = np.zeros(hidden)
        p["enc_edge2.W"] = _xavier(rng, (hidden, hidden))
        p["enc_edge2.b"] = np.zeros(hidden)
        for layer in range(layers):
            pre = f"blk{layer}"
            p[pre + ".W"] = _xavier(rng, (hidden, hd))
            p[pre + ".b"] = np.zeros(hd)
            p[pre + ".Wv.W"] = _xavier(rng, (hidden, hd))
            p[pre + ".Wv.b"] = np.zeros(hd)
            p[pre + ".a_src"] = _xavier(rng, (hd,))
            p[pre + ".a_dst"] = _xavier(rng, (hd,))
            p[pre + ".We_att.W"] = _xavier(rng, (hidden, heads))
            p[pre + ".We_att.b"] = np.zeros(heads)
            p[pre + ".We_msg.W"] = _xavier(rng, (hidden, hd))
            p[pre + ".We_msg.b"] = np.zeros(hd)
            p[pre + ".Wo.W"] = _xavier(rng, (hd, hidden))
            p[pre + ".Wo.b"] = np.zeros(hidden)
            p[pre + ".ln1.g"] = np.ones(hidden)
            p[pre + ".ln1.b"] = np.zeros(hidden)
            p[pre + ".ffn1.W"] = _xavier(rng, (hidden, 4 * hidden))
            p[pre + ".ffn1.b"] = np.zeros(4 * hidden)
            p[pre + ".ffn2.W"] = _xavier(rng, (4 * hidden, hidden))
            p[pre + ".ffn2.b"] = np.zeros(hidden)
            p[pre + ".ln2.g"] = np.ones(hidden)
            p[pre + ".ln2.b"] = np.zeros(hidden)
        p["dec1.W"] = _xavier(rng, (hidden, hidden))
        p["dec1.b"] = np.zeros(hidden)
        p["dec2.W"] = _xavier(rng, (hidden, 4))
        p["dec2.b"] = np.zeros(4)
        self.params = p
        self._select = _head_select(heads, head_width)

    def prepare(self, graph):
        return prepare_graph(graph)

    def forward(self, prep, mode="eval", rng=None, params=None,
                return_attention=False):
        cfg = self.config
        if prep.node_features.shape[1] != cfg["node_dim"]:
            raise ContractError("node feature width mismatch")
        params = params if params is not None else self.params
        use_dropout = mode in ("train", "mc-dropout") and cfg["dropout"] > 0
        if use_dropout and rng is None:
            raise ContractError("dropout modes require an rng")
        keep = 1.0 - cfg["dropout"]

        h = _dense(_as_dt(prep.node_features), params, "enc_node1",
                   act=dc.relu)
        h = _dense(h, params, "enc_node2")
        e = _dense(_as_dt(prep.edge_features), params, "enc_edge1",
                   act=dc.relu)
        e = _dense(e, params, "enc_edge2")

        attn = []
        for layer in range(cfg["layers"]):
            pre = f"blk{layer}"
            e_att = _dense(e, params, pre + ".We_att")
            e_msg = _dense(e, params, pre + ".We_msg")
            agg, alpha = gat_layer_forward(
                h, prep, cfg["heads"], cfg["head_width"],
                _resolve(params, pre + ".W"), _resolve(params, pre + ".b"),
                _resolve(params, pre + ".a_src"),
                _resolve(params, pre + ".a_dst"),
                e_att, e_msg,
                v=(_resolve(params, pre + ".Wv.W"),
                   _resolve(params, pre + ".Wv.b")),
                select=self._select, expand=self._select.T)
            if return_attention:
                attn.append(alpha)
            o = _dense(agg, params, pre + ".Wo")
            if use_dropout:
                o = dc.dropout_mask(o, keep, rng)
            h = dc.layernorm_rows(dc.add(h, o),
                                  _resolve(params, pre + ".ln1.g"),
                                  _resolve(params, pre + ".ln1.b"))
            f = _dense(dc.relu(_dense(h, params, pre + ".ffn1")), params,
                       pre + ".ffn2")
            h = dc.layernorm_rows(dc.add(h, f),
                                  _resolve(params, pre + ".ln2.g"),
                                  _resolve(params, pre + ".ln2.b"))

        out = _dense(dc.relu(_dense(h, params, "dec1")), params, "dec2")
        return (out, attn) if return_attention else out


def predict_fields(graph, model, mode="eval", rng=None):
    """One forward pass; (N, 4) normalized [pressure, tau x/y/z]."""
    if graph.node_features.shape[1] != model.config["node_dim"]:
        raise ContractError("graph feature width does not match the model")
    prep = model.prepare(graph)
    out = model.forward(prep, mode=mode, rng=rng)
    return out.values


# ---------------------------------------------------------------------------
# checkpoints: JSON manifest + little-endian float64 blob
# ---------------------------------------------------------------------------

def save_checkpoint(out_dir, name, model, extra=None):
    os.makedirs(out_dir, exist_ok=True)
    offsets, blob_parts, cursor = {}, [], 0
    for pname, arr in model.params.items():
        flat = np.ascontiguousarray(arr, dtype="<f8")
        offsets[pname] = {"offset": cursor, "shape": list(arr.shape)}
        blob_parts.append(flat.tobytes())
        cursor += flat.nbytes
    manifest = {
        "config": model.config,
        "offsets": offsets,
        "blob_bytes": cursor,
        "param_count": model.params.count(),
        "extra": extra or {},
    }
    with open(os.path.join(out_dir, f"{name}.json"), "w") as f:
        json.dump(manifest, f, sort_keys=True)
    with open(os.path.join(out_dir, f"{name}.bin"), "wb") as f:
        f.write(b"".join(blob_parts))


def load_checkpoint(in_dir, name):
    """Returns (model, extra). Model class chosen from the manifest."""
    with open(os.path.join(in_dir, f"{name}.json")) as f:
        manifest = json.load(f)
    with open(os.path.join(in_dir, f"{name}.bin"), "rb") as f:
        blob = f.read()
    if len(blob) != manifest["blob_bytes"]:
        raise ContractError("checkpoint blob size mismatch")
    cfg = dict(manifest["config"])
    kind = cfg.pop("kind")
    if kind == "mode_classifier":
        model = ModeClassifier(**cfg)
    elif kind == "aero_surrogate":
        model = AeroGraphNetLite(**cfg)
    else:
        raise ContractError(f"unknown checkpoint kind {kind!r}")
    for pname, info in manifest["offsets"].items():
        shape = tuple(info["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count,
                            offset=info["offset"]).reshape(shape)
        model.params[pname] = arr.copy()
    return model, manifest["extra"]
