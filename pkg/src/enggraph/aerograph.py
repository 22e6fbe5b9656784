"""Aerodynamic surface-field pipeline: symmetry-preserving downsampling with
random/curvature baselines, k-NN surface graph assembly with normalized
geometric features, and a synthetic analytic dataset generator whose pressure
and wall-shear-stress labels are exact by construction.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import geomesh
from .errors import ContractError, InvalidSampleError
from .graph import EngineeringGraph
from .modesynth import largest_remainder_split

BODY_CONFIGS = ["A", "B", "C"]

# rear pressure-recovery strength per body family
_REAR_RECOVERY = {"A": 0.15, "B": 0.45, "C": 0.30}


@dataclass
class AeroSample:
    body_config: str
    mesh: geomesh.SurfaceMesh
    u_inf: float                    # m/s
    rho: float                      # kg/m^3
    pressure: np.ndarray            # (N,) Pa
    wss: np.ndarray                 # (N, 3) Pa, tangential
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.pressure = np.asarray(self.pressure, dtype=np.float64)
        self.wss = np.asarray(self.wss, dtype=np.float64)
        n = self.mesh.num_vertices
        if self.pressure.shape != (n,) or self.wss.shape != (n, 3):
            raise ContractError("field shapes do not match the mesh")
        q = self.q_inf
        if np.any(self.pressure > q + 1e-9 * max(q, 1.0)):
            raise InvalidSampleError("pressure exceeds stagnation pressure")
        normal_part = np.abs(np.sum(self.wss * self.mesh.normals, axis=1))
        mag = np.linalg.norm(self.wss, axis=1)
        active = mag > 0
        if np.any(normal_part[active] > 1e-9 * mag[active]):
            raise InvalidSampleError("WSS targets are not tangential")

    @property
    def q_inf(self):
        return 0.5 * self.rho * self.u_inf**2


@dataclass
class DownsampleResult:
    selected: np.ndarray        # unique vertex ids, ascending
    pairs: np.ndarray           # (P, 2) mirror-pair vertex ids
    midline: np.ndarray         # selected ids on the symmetry plane
    score: float                # bilateral correspondence in [0, 1]
    method: str                 # symmetric | random | curvature | fps


# ---------------------------------------------------------------------------
# farthest-point sampling
# ---------------------------------------------------------------------------

def fps(points, n, start=None):
    """Farthest-point sampling. Deterministic: starts at the point farthest
    from the centroid unless a start index is given."""
    points = np.asarray(points, dtype=np.float64)
    if not 1 <= n <= len(points):
        raise ContractError(f"cannot sample {n} of {len(points)} points")
    if start is None:
        start = int(np.argmax(np.sum((points - points.mean(axis=0)) ** 2, axis=1)))
    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = start
    mind = np.sum((points - points[start]) ** 2, axis=1)
    for i in range(1, n):
        nxt = int(np.argmax(mind))
        chosen[i] = nxt
        np.minimum(mind, np.sum((points - points[nxt]) ** 2, axis=1), out=mind)
    return chosen


def _measure_correspondence(positions, selected, frame, delta):
    """Fraction of selected off-midline vertices whose mirror image falls
    within delta of another selected vertex. Also returns the pair list."""
    pos = positions[selected]
    sd = frame.signed_distance(pos)
    off = np.abs(sd) > frame.eps
    if not np.any(off):
        return 1.0, np.empty((0, 2), dtype=np.int64)
    tree = cKDTree(pos)
    mirrored = frame.reflect(pos[off])
    dist, idx = tree.query(mirrored)
    ok = dist <= delta
    ids_off = selected[off]
    pairs = np.stack([ids_off[ok], selected[idx[ok]]], axis=1)
    # keep one orientation per pair
    pairs = np.unique(np.sort(pairs, axis=1), axis=0)
    return float(np.mean(ok)), pairs


def downsample_symmetric(mesh, frame, n, seed=0):
    """Symmetry-preserving downsampling: FPS one half, mirror-snap onto the
    other half, FPS the midline separately.

    Falls back to plain FPS (method "fps") when the mesh symmetry quality is
    below 0.9, reporting the correspondence actually measured.
    """
    positions = mesh.vertices
    big_n = len(positions)
    if not 1 <= n <= big_n:
        raise ContractError(f"target count {n} out of range for {big_n} vertices")
    delta = geomesh.match_tolerance(positions)

    if n == big_n:
        selected = np.arange(big_n, dtype=np.int64)
        score, pairs = _measure_correspondence(positions, selected, frame, delta)
        sd = np.abs(frame.signed_distance(positions)) <= frame.eps
        return DownsampleResult(selected, pairs, selected[sd], score, "symmetric")

    if frame.quality < 0.9:
        selected = np.sort(fps(positions, n))
        score, pairs = _measure_correspondence(positions, selected, frame, delta)
        sd = np.abs(frame.signed_distance(positions[selected])) <= frame.eps
        return DownsampleResult(selected, pairs, selected[sd], score, "fps")

    sd = frame.signed_distance(positions)
    mid_ids = np.where(np.abs(sd) <= frame.eps)[0]
    right_ids = np.where(sd > frame.eps)[0]
    left_ids = np.where(sd < -frame.eps)[0]

    m = int(np.ceil(n * len(mid_ids) / big_n))
    m = min(m, len(mid_ids))
    n_right = min(int(np.ceil((n - m) / 2)), len(right_ids))

    picks = right_ids[fps(positions[right_ids], n_right)]
    left_tree = cKDTree(positions[left_ids])
    dist, idx = left_tree.query(frame.reflect(positions[picks]))
    ok = dist <= delta
    partners = left_ids[idx]
    # drop unsnappable picks and duplicate snap targets
    _, first = np.unique(partners[ok], return_index=True)
    keep = np.where(ok)[0][np.sort(first)]
    pairs = np.stack([picks[keep], partners[keep]], axis=1)

    mid_sel = mid_ids[fps(positions[mid_ids], m)] if m else np.empty(0, dtype=np.int64)
    selected = np.sort(np.concatenate([pairs[:, 0], pairs[:, 1], mid_sel]))
    off_count = 2 * len(pairs)
    score = 1.0 if off_count == 0 else 2.0 * len(pairs) / off_count
    return DownsampleResult(selected, pairs, np.sort(mid_sel), score, "symmetric")


def downsample_baselines(mesh, n, method, seed=0, frame=None):
    """Baseline samplers for ablations: seeded uniform random, or top-|H|
    curvature with greedy distance thinning against clustering."""
    positions = mesh.vertices
    big_n = len(positions)
    if not 1 <= n <= big_n:
        raise ContractError(f"target count {n} out of range for {big_n} vertices")
    if method == "random":
        rng = np.random.default_rng(seed)
        selected = np.sort(rng.choice(big_n, size=n, replace=False))
    elif method == "curvature":
        r_min = 0.5 * np.sqrt(mesh.vertex_areas.sum() / n)
        order = np.lexsort((np.arange(big_n), -np.abs(mesh.mean_curvature)))
        retained, skipped = [], []
        tree_pts = []
        for cand in order:
            if len(retained) == n:
                break
            p = positions[cand]
            if tree_pts:
                d = np.min(np.linalg.norm(np.asarray(tree_pts) - p, axis=1))
                if d < r_min:
                    skipped.append(cand)
                    continue
            retained.append(cand)
            tree_pts.append(p)
        for cand in skipped:  # relax thinning if the budget was not filled
            if len(retained) == n:
                break
            retained.append(cand)
        selected = np.sort(np.asarray(retained, dtype=np.int64))
    else:
        raise ContractError(f"unknown baseline method {method!r}")

    if frame is None:
        try:
            frame = geomesh.detect_symmetry(mesh, plane="y0")
        except Exception:
            frame = None
    if frame is None:
        return DownsampleResult(selected, np.empty((0, 2), dtype=np.int64),
                                np.empty(0, dtype=np.int64), 0.0, method)
    delta = geomesh.match_tolerance(positions)
    score, pairs = _measure_correspondence(positions, selected, frame, delta)
    on_mid = np.abs(frame.signed_distance(positions[selected])) <= frame.eps
    return DownsampleResult(selected, pairs, selected[on_mid], score, method)


# ---------------------------------------------------------------------------
# graph assembly
# ---------------------------------------------------------------------------

NODE_FEATURE_DIM = 9
EDGE_FEATURE_DIM = 5


@dataclass
class AeroGraphSample:
    graph: EngineeringGraph
    p_target: np.ndarray        # (n,) pressure / q_inf
    tau_target: np.ndarray      # (n, 3) WSS / tau_ref
    norm: dict                  # constants to denormalize bit-exactly
    ds: DownsampleResult

    def denormalize_pressure(self, p_norm=None):
        p = self.p_target if p_norm is None else p_norm
        return p * self.norm["q_inf"]

    def denormalize_wss(self, tau_norm=None):
        t = self.tau_target if tau_norm is None else tau_norm
        return t * self.norm["tau_ref"]


def assemble_aero_graph(sample, ds, k=16, tau_ref=None):
    """Build the k-NN surface graph over the downsampled vertex set.

    Node features (9): centered position / diameter, area / mean area,
    unit normal, curvature x diameter, distance-to-centroid / radius.
    Edge features (5): unit offset, distance / diameter, normal cosine.
    """
    sel = ds.selected
    if k >= len(sel):
        raise ContractError(f"k={k} must be below the selected count {len(sel)}")
    pos = sample.mesh.vertices[sel]
    centroid = pos.mean(axis=0)
    radii = np.linalg.norm(pos - centroid, axis=1)
    # circumscribing-sphere diameter; keeps the distance feature in [0, 1]
    diag = 2.0 * radii.max()
    areas = sample.mesh.vertex_areas[sel]

    feats = np.empty((len(sel), NODE_FEATURE_DIM))
    feats[:, 0:3] = (pos - centroid) / diag
    feats[:, 3] = areas / areas.mean()
    feats[:, 4:7] = sample.mesh.normals[sel]
    feats[:, 7] = sample.mesh.mean_curvature[sel] * diag
    feats[:, 8] = radii / (diag / 2.0)

    nbrs = geomesh.knn_indices(pos, k)
    src = nbrs.ravel()
    dst = np.repeat(np.arange(len(sel)), k)
    edges = np.unique(
        np.concatenate([np.stack([src, dst], axis=1),
                        np.stack([dst, src], axis=1)]), axis=0)
    offsets = pos[edges[:, 0]] - pos[edges[:, 1]]
    dist = np.linalg.norm(offsets, axis=1)
    efeats = np.empty((len(edges), EDGE_FEATURE_DIM))
    efeats[:, 0:3] = offsets / dist[:, None]
    efeats[:, 3] = dist / diag
    efeats[:, 4] = np.sum(sample.mesh.normals[sel][edges[:, 0]]
                          * sample.mesh.normals[sel][edges[:, 1]], axis=1)

    q = sample.q_inf
    if tau_ref is None:
        mag = np.linalg.norm(sample.wss[sel], axis=1)
        tau_ref = float(np.sqrt(np.mean(mag**2)))
        if tau_ref == 0.0:
            tau_ref = 1.0
    graph = EngineeringGraph(
        node_features=feats, edges=edges, edge_features=efeats,
        meta={"body_config": sample.body_config, "k": k,
              "method": ds.method, "score": ds.score},
    )
    norm = {"q_inf": q, "tau_ref": float(tau_ref), "diag": float(diag),
            "centroid": centroid.tolist()}
    return AeroGraphSample(graph=graph,
                           p_target=sample.pressure[sel] / q,
                           tau_target=sample.wss[sel] / tau_ref,
                           norm=norm, ds=ds)


# ---------------------------------------------------------------------------
# synthetic aerodynamic labels
# ---------------------------------------------------------------------------

def pressure_coefficient(theta):
    """Potential-flow style surface Cp as a function of angle from the nose."""
    return 1.0 - 2.25 * np.sin(theta) ** 2


def _angle_from_nose(vertices):
    c = vertices.mean(axis=0)
    d = vertices - c
    d = d / np.linalg.norm(d, axis=1, keepdims=True)
    return np.arccos(np.clip(d[:, 0], -1.0, 1.0))


def aero_labels(mesh, body_config, u_inf, rho, rng=None, perturbation=0.05):
    """Analytic pressure and WSS fields for a body.

    rng=None disables both the family rear-recovery modifier and the seeded
    perturbations, leaving the bare closed form (the sphere limit).
    """
    q = 0.5 * rho * u_inf**2
    theta = _angle_from_nose(mesh.vertices)

    theta_eff = theta.copy()
    if rng is not None:
        rec = _REAR_RECOVERY[body_config]
        rear = np.clip((theta - np.pi / 2) / (np.pi / 2), 0.0, 1.0)
        theta_eff = theta + rec * (np.pi - theta) * rear
        ext = mesh.vertices.max(axis=0) - mesh.vertices.min(axis=0)
        xn = mesh.vertices[:, 0] / ext[0]
        zn = mesh.vertices[:, 2] / ext[2]
        a, b = rng.uniform(2.0, 5.0, size=2)
        p1, p2 = rng.uniform(0.0, 2 * np.pi, size=2)
        wobble = np.sin(a * np.pi * xn + p1) * np.sin(b * np.pi * zn + p2)
        theta_eff = theta_eff + perturbation * wobble * np.sin(theta)
        theta_eff = np.clip(theta_eff, 0.0, np.pi)
    pressure = q * pressure_coefficient(theta_eff)

    # freestream along -x (nose at +x); tangential projection per vertex
    d = np.array([-1.0, 0.0, 0.0])
    t = d - mesh.normals * (mesh.normals @ d)[:, None]
    t_norm = np.linalg.norm(t, axis=1)
    t_hat = np.zeros_like(t)
    active = t_norm > 1e-12
    t_hat[active] = t[active] / t_norm[active, None]
    # magnitude profile peaks at mid-body; kept independent of the inflow so
    # the normalized target is a pure function of the surface geometry
    g = 2.5 * np.sin(theta_eff) ** 1.5
    wss = g[:, None] * t_hat
    return pressure, wss


@dataclass
class AeroDatasetConfig:
    counts: dict = field(default_factory=lambda: {"A": 4, "B": 4, "C": 4})
    u_range: tuple = (20.0, 60.0)
    rho: float = 1.2
    subdivision: int = 3
    perturbation: float = 0.05
    ratios: tuple = (0.70, 0.15, 0.15)
    seed: int = 0


def synth_aero_dataset(config=None, seed=None):
    """Generate AeroSamples over the three body families with stratified
    70/15/15 splits. Returns (samples, manifest)."""
    config = config or AeroDatasetConfig()
    if seed is not None:
        config.seed = seed
    for fam, count in config.counts.items():
        if fam not in BODY_CONFIGS or count < 1:
            raise ContractError(f"bad dataset count {fam}={count}")

    samples, splits = [], []
    for fam_idx, fam in enumerate(BODY_CONFIGS):
        count = config.counts.get(fam, 0)
        fam_splits = []
        for part, n_part in zip(
                ("train", "val", "test"),
                largest_remainder_split(count, config.ratios)):
            fam_splits += [part] * n_part
        for i in range(count):
            rng = np.random.default_rng(
                np.random.SeedSequence([config.seed, fam_idx, i]))
            params = {
                "taper": fam,
                "length": 4.2 * rng.uniform(0.9, 1.1),
                "width": 1.8 * rng.uniform(0.9, 1.1),
                "height": 1.3 * rng.uniform(0.9, 1.1),
                "cabin": rng.uniform(0.25, 0.45),
            }
            mesh = geomesh.generate_body("car_like", params,
                                         subdivision=config.subdivision)
            u_inf = rng.uniform(*config.u_range)
            pressure, wss = aero_labels(mesh, fam, u_inf, config.rho, rng=rng,
                                        perturbation=config.perturbation)
            samples.append(AeroSample(
                body_config=fam, mesh=mesh, u_inf=u_inf, rho=config.rho,
                pressure=pressure, wss=wss,
                meta={"params": params, "index": i, "split": fam_splits[i]}))
            splits.append(fam_splits[i])

    train_mag = [np.linalg.norm(s.wss, axis=1)
                 for s, sp in zip(samples, splits) if sp == "train"]
    tau_ref = float(np.sqrt(np.mean(np.concatenate(train_mag) ** 2)))
    manifest = {
        "seed": config.seed,
        "counts": dict(config.counts),
        "splits": splits,
        "tau_ref": tau_ref if tau_ref > 0 else 1.0,
        "rho": config.rho,
        "subdivision": config.subdivision,
    }
    return samples, manifest


# ---------------------------------------------------------------------------
# disk interface: OBJ mesh + fields CSV + metadata JSON
# ---------------------------------------------------------------------------

def save_aero_sample(out_dir, name, sample):
    os.makedirs(out_dir, exist_ok=True)
    geomesh.save_obj(os.path.join(out_dir, f"{name}.obj"), sample.mesh)
    geomesh.save_fields_csv(
        os.path.join(out_dir, f"{name}.csv"),
        ["p", "tau_x", "tau_y", "tau_z"],
        [sample.pressure, sample.wss[:, 0], sample.wss[:, 1], sample.wss[:, 2]])
    meta = {"body_config": sample.body_config, "u_inf": sample.u_inf,
            "rho": sample.rho, "meta": _jsonable(sample.meta)}
    with open(os.path.join(out_dir, f"{name}.json"), "w") as f:
        json.dump(meta, f, sort_keys=True)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def load_aero_sample(in_dir, name):
    mesh = geomesh.load_obj(os.path.join(in_dir, f"{name}.obj"))
    names, data = geomesh.load_fields_csv(os.path.join(in_dir, f"{name}.csv"))
    if names != ["p", "tau_x", "tau_y", "tau_z"]:
        raise ContractError(f"unexpected field columns {names}")
    with open(os.path.join(in_dir, f"{name}.json")) as f:
        meta = json.load(f)
    return AeroSample(
        body_config=meta["body_config"], mesh=mesh, u_inf=meta["u_inf"],
        rho=meta["rho"], pressure=data[:, 0], wss=data[:, 1:4],
        meta=meta.get("meta", {}))
