"""Canonical body-in-white region graph.

A wireframe (nodes tagged with one of 20 canonical regions) is reduced to a
20-node graph with four typed relations. Mode displacement fields are
aggregated into per-region node features, per-edge relational features, and
six pooled engineering scalars used by the region-aware classifier head.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, InvalidSampleError, SchemaError
from .graph import EngineeringGraph

REGIONS = [
    "front_rail_L", "front_rail_R",
    "a_pillar_L", "a_pillar_R",
    "b_pillar_L", "b_pillar_R",
    "c_pillar_L", "c_pillar_R",
    "roof_front", "roof_mid", "roof_rear",
    "floor_front", "floor_mid", "floor_rear",
    "sill_L", "sill_R",
    "rear_rail_L", "rear_rail_R",
    "firewall", "rear_panel",
]
REGION_INDEX = {name: i for i, name in enumerate(REGIONS)}

REGION_GROUPS = {
    "floor": ["floor_front", "floor_mid", "floor_rear"],
    "roof": ["roof_front", "roof_mid", "roof_rear"],
    "rail": ["front_rail_L", "front_rail_R", "rear_rail_L", "rear_rail_R"],
    "pillar": ["a_pillar_L", "a_pillar_R", "b_pillar_L", "b_pillar_R",
               "c_pillar_L", "c_pillar_R"],
    "sill": ["sill_L", "sill_R"],
    "panel": ["firewall", "rear_panel"],
}

EDGE_TYPES = ["adjacency", "symmetry", "longitudinal", "vertical"]

# physical joins of the canonical skeleton (undirected, one entry per pair)
_ADJACENCY = [
    ("a_pillar_L", "sill_L"), ("a_pillar_R", "sill_R"),
    ("a_pillar_L", "roof_front"), ("a_pillar_R", "roof_front"),
    ("b_pillar_L", "sill_L"), ("b_pillar_R", "sill_R"),
    ("b_pillar_L", "roof_mid"), ("b_pillar_R", "roof_mid"),
    ("c_pillar_L", "sill_L"), ("c_pillar_R", "sill_R"),
    ("c_pillar_L", "roof_rear"), ("c_pillar_R", "roof_rear"),
    ("firewall", "front_rail_L"), ("firewall", "front_rail_R"),
    ("firewall", "floor_front"),
    ("firewall", "a_pillar_L"), ("firewall", "a_pillar_R"),
    ("rear_panel", "rear_rail_L"), ("rear_panel", "rear_rail_R"),
    ("rear_panel", "floor_rear"), ("rear_panel", "roof_rear"),
    ("floor_mid", "sill_L"), ("floor_mid", "sill_R"),
]

_SYMMETRY_PAIRS = [
    ("front_rail_L", "front_rail_R"),
    ("a_pillar_L", "a_pillar_R"),
    ("b_pillar_L", "b_pillar_R"),
    ("c_pillar_L", "c_pillar_R"),
    ("sill_L", "sill_R"),
    ("rear_rail_L", "rear_rail_R"),
]

_LONGITUDINAL = [
    ("front_rail_L", "sill_L"), ("sill_L", "rear_rail_L"),
    ("front_rail_R", "sill_R"), ("sill_R", "rear_rail_R"),
    ("roof_front", "roof_mid"), ("roof_mid", "roof_rear"),
    ("floor_front", "floor_mid"), ("floor_mid", "floor_rear"),
]

_VERTICAL = [
    ("roof_front", "floor_front"),
    ("roof_mid", "floor_mid"),
    ("roof_rear", "floor_rear"),
]

NODE_FEATURE_DIM = 10
EDGE_FEATURE_DIM = 6
POOLED_SCALAR_DIM = 6


@dataclass
class RegionalSkeleton:
    """Region membership of wireframe nodes plus the fixed typed-edge table."""

    members: dict            # region name -> np.ndarray of wireframe node ids
    edges: list              # (region_a, region_b, edge_type), undirected
    node_count: int

    def region_sizes(self):
        return {r: len(m) for r, m in self.members.items()}

    def typed_edge_count(self, edge_type):
        return sum(1 for _, _, t in self.edges if t == edge_type)


@dataclass
class ModeSample:
    vehicle_id: str
    mode_id: str
    frequency: float                 # Hz, (0, 100]
    positions: np.ndarray            # (N, 3)
    displacements: np.ndarray        # (N, 3) modal amplitudes
    label: tuple | None = None       # (level1, level2)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.displacements = np.asarray(self.displacements, dtype=np.float64)
        if not 0.0 < self.frequency <= 100.0:
            raise InvalidSampleError(
                f"frequency {self.frequency} outside (0, 100] Hz")
        if not np.all(np.isfinite(self.displacements)):
            raise InvalidSampleError("displacement field contains non-finite values")


@dataclass
class RegionGraphSample:
    graph: EngineeringGraph          # 20 nodes, features (20, 10), edges (E, 6)
    pooled: np.ndarray               # 6 engineered scalars
    label: tuple | None = None
    meta: dict = field(default_factory=dict)


def build_canonical_skeleton(region_tags):
    """Map per-node region names to the canonical 20-region skeleton.

    Every region must be populated; the typed edge table is fixed.
    """
    members = {r: [] for r in REGIONS}
    unknown = set()
    for node_id, region in enumerate(region_tags):
        if region not in members:
            unknown.add(region)
            continue
        members[region].append(node_id)
    if unknown:
        raise SchemaError(f"unknown region tags: {sorted(unknown)}")
    missing = [r for r, m in members.items() if not m]
    if missing:
        raise SchemaError(f"missing regions: {missing}")

    edges = []
    for a, b in _ADJACENCY:
        edges.append((a, b, "adjacency"))
    for a, b in _SYMMETRY_PAIRS:
        edges.append((a, b, "symmetry"))
    for a, b in _LONGITUDINAL:
        edges.append((a, b, "longitudinal"))
    for a, b in _VERTICAL:
        edges.append((a, b, "vertical"))
    seen = set()
    for a, b, _ in edges:
        key = frozenset((a, b))
        if key in seen:
            raise SchemaError(f"duplicate typed edge {a}-{b}")
        seen.add(key)

    return RegionalSkeleton(
        members={r: np.asarray(m, dtype=np.int64) for r, m in members.items()},
        edges=edges,
        node_count=len(region_tags),
    )


def _dominant_direction(u):
    """Principal axis of a set of displacement vectors, sign fixed so the
    mean projection is non-negative."""
    cov = u.T @ u
    _, vecs = np.linalg.eigh(cov)
    d = vecs[:, -1]
    if np.mean(u @ d) < 0:
        d = -d
    return d


def aggregate_mode(sample, skeleton, normalize_amplitude=True):
    """Aggregate a wireframe displacement field onto the 20-node region graph.

    Node features (10 per region): mean |u|, RMS |u|, mean |u_x|, mean |u_y|,
    mean |u_z|, signed mean u_z, energy fraction, dominant direction (3).
    Edge features (6): edge-type one-hot (4), energy ratio, phase agreement.
    """
    if sample.positions.shape[0] != skeleton.node_count:
        raise ContractError(
            f"sample has {sample.positions.shape[0]} nodes, skeleton expects "
            f"{skeleton.node_count}")
    u = sample.displacements
    total_energy = float(np.sum(u**2))
    if total_energy == 0.0:
        raise InvalidSampleError("displacement field is identically zero")
    if normalize_amplitude:
        u = u / np.sqrt(total_energy / len(u))

    feats = np.zeros((len(REGIONS), NODE_FEATURE_DIM))
    mean_vec = np.zeros((len(REGIONS), 3))
    energy = np.zeros(len(REGIONS))
    vertical_energy = np.zeros(len(REGIONS))
    for ri, region in enumerate(REGIONS):
        ui = u[skeleton.members[region]]
        norms = np.linalg.norm(ui, axis=1)
        feats[ri, 0] = norms.mean()
        feats[ri, 1] = np.sqrt(np.mean(norms**2))
        feats[ri, 2:5] = np.mean(np.abs(ui), axis=0)
        feats[ri, 5] = np.mean(ui[:, 2])
        energy[ri] = np.sum(norms**2)
        # per-node normalized so region size does not masquerade as
        # non-uniformity
        vertical_energy[ri] = np.mean(ui[:, 2] ** 2)
        feats[ri, 7:10] = _dominant_direction(ui)
        mean_vec[ri] = ui.mean(axis=0)
    e_r = energy / energy.sum()
    feats[:, 6] = e_r

    # directed edges (both orientations), identical features per orientation
    edge_rows, edge_feats = [], []
    phase = {}
    for a, b, etype in skeleton.edges:
        ia, ib = REGION_INDEX[a], REGION_INDEX[b]
        onehot = [0.0] * 4
        onehot[EDGE_TYPES.index(etype)] = 1.0
        lo, hi = min(e_r[ia], e_r[ib]), max(e_r[ia], e_r[ib])
        ratio = lo / hi if hi > 0 else 0.0
        na, nb = np.linalg.norm(mean_vec[ia]), np.linalg.norm(mean_vec[ib])
        cos = float(mean_vec[ia] @ mean_vec[ib] / (na * nb)) if na > 0 and nb > 0 else 0.0
        phase[(a, b)] = cos
        row = onehot + [ratio, cos]
        edge_rows += [(ia, ib), (ib, ia)]
        edge_feats += [row, row]

    graph = EngineeringGraph(
        node_features=feats,
        edges=np.asarray(edge_rows, dtype=np.int64),
        edge_features=np.asarray(edge_feats),
        node_names=list(REGIONS),
        meta={"vehicle_id": sample.vehicle_id, "mode_id": sample.mode_id,
              "frequency": sample.frequency},
    )

    pooled = _pooled_scalars(e_r, vertical_energy, phase)
    return RegionGraphSample(graph=graph, pooled=pooled, label=sample.label,
                             meta=dict(graph.meta))


def _pooled_scalars(e_r, vertical_energy, phase):
    """Six engineered scalars: floor/roof energy fractions, vertical energy
    uniformity 1/(1+CV), left-right antisymmetry, rail and pillar fractions."""
    def group_energy(group):
        return float(sum(e_r[REGION_INDEX[r]] for r in REGION_GROUPS[group]))

    mean_v = vertical_energy.mean()
    cv = vertical_energy.std() / mean_v if mean_v > 0 else 0.0
    uniformity = 1.0 / (1.0 + cv)
    antisym = float(np.mean([(1.0 - phase[(a, b)]) / 2.0 for a, b in _SYMMETRY_PAIRS]))
    return np.array([
        group_energy("floor"),
        group_energy("roof"),
        uniformity,
        antisym,
        group_energy("rail"),
        group_energy("pillar"),
    ])


def pooled_scalars(sample):
    """Engineered scalar vector of an aggregated sample."""
    return sample.pooled


# ---------------------------------------------------------------------------
# feature standardization
# ---------------------------------------------------------------------------

@dataclass
class Standardizer:
    """Per-dimension z-scoring of node features using training-set statistics."""

    mean: np.ndarray   # (10,)
    std: np.ndarray    # (10,)

    @classmethod
    def fit(cls, samples):
        stacked = np.concatenate([s.graph.node_features for s in samples], axis=0)
        std = stacked.std(axis=0)
        std[std < 1e-12] = 1.0
        return cls(mean=stacked.mean(axis=0), std=std)

    def apply(self, sample):
        g = sample.graph
        feats = (g.node_features - self.mean) / self.std
        graph = EngineeringGraph(feats, g.edges, g.edge_features,
                                 node_names=g.node_names,
                                 meta={**g.meta, "standardized": True})
        return RegionGraphSample(graph=graph, pooled=sample.pooled.copy(),
                                 label=sample.label, meta=dict(sample.meta))

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(mean=np.asarray(d["mean"]), std=np.asarray(d["std"]))


# ---------------------------------------------------------------------------
# wireframe JSON interchange
# ---------------------------------------------------------------------------

def save_wireframe_json(path, vehicle_id, positions, region_tags, modes):
    """Write a wireframe plus its mode samples.

    modes: iterable of ModeSample sharing the wireframe's node set.
    """
    doc = {
        "vehicle_id": vehicle_id,
        "nodes": [
            {"id": i, "x": float(p[0]), "y": float(p[1]), "z": float(p[2]),
             "region": region_tags[i]}
            for i, p in enumerate(positions)
        ],
        "modes": [
            {
                "mode_id": m.mode_id,
                "frequency": m.frequency,
                "label": list(m.label) if m.label else None,
                "displacements": m.displacements.tolist(),
            }
            for m in modes
        ],
    }
    with open(path, "w") as f:
        json.dump(doc, f)


def load_wireframe_json(path):
    """Returns (vehicle_id, positions, region_tags, list of ModeSample)."""
    with open(path) as f:
        doc = json.load(f)
    nodes = sorted(doc["nodes"], key=lambda n: n["id"])
    positions = np.asarray([[n["x"], n["y"], n["z"]] for n in nodes])
    region_tags = [n["region"] for n in nodes]
    modes = [
        ModeSample(
            vehicle_id=doc["vehicle_id"],
            mode_id=m["mode_id"],
            frequency=m["frequency"],
            positions=positions,
            displacements=np.asarray(m["displacements"]),
            label=tuple(m["label"]) if m.get("label") else None,
        )
        for m in doc["modes"]
    ]
    return doc["vehicle_id"], positions, region_tags, modes
