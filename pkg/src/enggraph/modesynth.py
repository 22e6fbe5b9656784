"""Synthetic multi-vehicle mode-shape data: parametric wireframes, analytic
deformation fields per mode subtype, MAC-based mode tracking, and a stratified
dataset builder reproducing the label-scarcity pattern (one richly labeled
reference vehicle, target vehicles with only a handful of labels).
"""

from __future__ import annotations

import json
import os
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import biwgraph
from .biwgraph import REGIONS, REGION_GROUPS, ModeSample, build_canonical_skeleton
from .errors import ConfigError, ContractError, InvalidSampleError

LEVEL1 = ["TORSION", "BENDING", "PUMPING", "LOCAL"]
LEVEL2 = [
    "torsion_global", "torsion_front", "torsion_rear",
    "bending_vertical_1", "bending_vertical_2", "bending_lateral",
    "pumping_floor", "pumping_roof", "pumping_combined",
    "local_panel", "local_pillar",
]
LEVEL2_TO_LEVEL1 = {
    "torsion_global": "TORSION",
    "torsion_front": "TORSION",
    "torsion_rear": "TORSION",
    "bending_vertical_1": "BENDING",
    "bending_vertical_2": "BENDING",
    "bending_lateral": "BENDING",
    "pumping_floor": "PUMPING",
    "pumping_roof": "PUMPING",
    "pumping_combined": "PUMPING",
    "local_panel": "LOCAL",
    "local_pillar": "LOCAL",
}
LEVEL1_INDEX = {c: i for i, c in enumerate(LEVEL1)}
LEVEL2_INDEX = {c: i for i, c in enumerate(LEVEL2)}

# frequency bands (Hz) per subtype, all within the 0-100 Hz band of interest
_FREQ_BANDS = {
    "torsion_global": (25.0, 35.0),
    "torsion_front": (35.0, 45.0),
    "torsion_rear": (38.0, 48.0),
    "bending_vertical_1": (28.0, 38.0),
    "bending_vertical_2": (55.0, 70.0),
    "bending_lateral": (30.0, 40.0),
    "pumping_floor": (40.0, 55.0),
    "pumping_roof": (45.0, 60.0),
    "pumping_combined": (50.0, 65.0),
    "local_panel": (60.0, 88.0),
    "local_pillar": (55.0, 85.0),
}


@dataclass
class VehicleSpec:
    vehicle_id: str
    wheelbase: float = 1.0      # scale factors relative to the base cage
    width: float = 1.0
    height: float = 1.0
    node_count: int = 160
    stiffness: dict = field(default_factory=dict)  # region -> multiplier

    def __post_init__(self):
        if min(self.wheelbase, self.width, self.height) <= 0:
            raise ConfigError("vehicle scale factors must be positive")
        if not 120 <= self.node_count <= 240:
            raise ConfigError("node count must be within [120, 240]")

    def stiffness_of(self, region):
        return float(self.stiffness.get(region, 1.0))


# ---------------------------------------------------------------------------
# wireframe generator
# ---------------------------------------------------------------------------

_BASE_LENGTH = 3.0
_BASE_WIDTH = 1.5
_BASE_HEIGHT = 1.4

# region layout: ("line", (x0, y0, z0), (x1, y1, z1)) with y > 0 on the left
# side (mirrored for _R), or ("panel", x-range, y-half-width, z)
_LAYOUT = {
    "front_rail_L": ("line", (0.00, 0.35, 0.20), (0.25, 0.35, 0.18)),
    "sill_L":       ("line", (0.25, 0.50, 0.12), (0.75, 0.50, 0.12)),
    "rear_rail_L":  ("line", (0.75, 0.35, 0.18), (1.00, 0.35, 0.25)),
    "a_pillar_L":   ("line", (0.25, 0.50, 0.12), (0.35, 0.44, 1.00)),
    "b_pillar_L":   ("line", (0.55, 0.50, 0.12), (0.55, 0.44, 1.00)),
    "c_pillar_L":   ("line", (0.78, 0.50, 0.12), (0.72, 0.44, 1.00)),
    "roof_front":   ("panel", (0.32, 0.46), 0.42, 1.00),
    "roof_mid":     ("panel", (0.46, 0.62), 0.42, 1.00),
    "roof_rear":    ("panel", (0.62, 0.76), 0.42, 1.00),
    "floor_front":  ("panel", (0.20, 0.40), 0.46, 0.08),
    "floor_mid":    ("panel", (0.40, 0.60), 0.46, 0.08),
    "floor_rear":   ("panel", (0.60, 0.80), 0.46, 0.08),
    "firewall":     ("wall", 0.20, 0.40, (0.10, 0.65)),
    "rear_panel":   ("wall", 0.90, 0.38, (0.15, 0.60)),
}


def _sym_linspace(half_width, n):
    """linspace(-h, h, n) forced to be bitwise antisymmetric about 0."""
    ys = np.linspace(-half_width, half_width, n)
    return (ys - ys[::-1]) / 2.0


def _allocate_nodes(node_count):
    """Distribute the node budget: panel/wall regions get double weight."""
    weights = {}
    for region in REGIONS:
        base = region[:-2] + "_L" if region.endswith("_R") else region
        kind = _LAYOUT[base][0]
        weights[region] = 2.0 if kind in ("panel", "wall") else 1.0
    total = sum(weights.values())
    alloc = {r: max(4, int(round(node_count * w / total))) for r, w in weights.items()}
    return alloc


def synth_wireframe(spec, seed=0):
    """Deterministic parametric box-cage wireframe, exactly mirror-symmetric
    about y=0, with all 20 regions populated.

    Returns (positions (N,3), region_tags list).
    """
    rng = np.random.default_rng(seed)
    alloc = _allocate_nodes(spec.node_count)
    sx = _BASE_LENGTH * spec.wheelbase
    sy = _BASE_WIDTH * spec.width
    sz = _BASE_HEIGHT * spec.height

    positions, tags = [], []

    def emit(pts, region):
        for p in pts:
            positions.append(p)
            tags.append(region)

    for region in REGIONS:
        if region.endswith("_R"):
            continue  # mirrored below together with its _L twin
        kind = _LAYOUT[region][0]
        n = alloc[region]
        if kind == "line":
            _, p0, p1 = _LAYOUT[region]
            t = np.linspace(0.0, 1.0, n)
            jitter = rng.normal(scale=0.004, size=(n, 2))  # x/z only
            pts = np.empty((n, 3))
            pts[:, 0] = (p0[0] + t * (p1[0] - p0[0]) + jitter[:, 0]) * sx
            pts[:, 1] = (p0[1] + t * (p1[1] - p0[1])) * sy
            pts[:, 2] = (p0[2] + t * (p1[2] - p0[2]) + jitter[:, 1]) * sz
            if region.endswith("_L"):
                emit(pts, region)
                mirrored = pts.copy()
                mirrored[:, 1] = -mirrored[:, 1]
                emit(mirrored, region[:-2] + "_R")
            else:
                emit(pts, region)
        elif kind == "panel":
            _, (x0, x1), yhw, z = _LAYOUT[region]
            rows = max(2, int(round(np.sqrt(n / 2))))
            cols = max(2, int(round(n / rows)))
            xs = np.linspace(x0, x1, rows)
            ys = _sym_linspace(yhw, cols)
            # jitter per row only, so the y mirror stays exact
            zj = z + rng.normal(scale=0.003, size=rows)
            grid = np.array([(x, y, zj[r]) for r, x in enumerate(xs) for y in ys])
            grid = grid * np.array([sx, sy, sz])
            emit(grid, region)
        else:  # wall: vertical panel at fixed x
            _, x, yhw, (z0, z1) = _LAYOUT[region]
            rows = max(2, int(round(np.sqrt(n / 2))))
            cols = max(2, int(round(n / rows)))
            zs = np.linspace(z0, z1, rows)
            ys = _sym_linspace(yhw, cols)
            xj = x + rng.normal(scale=0.003, size=rows)
            grid = np.array([(xj[r], y, z) for r, z in enumerate(zs) for y in ys])
            grid = grid * np.array([sx, sy, sz])
            emit(grid, region)

    return np.asarray(positions), tags


# ---------------------------------------------------------------------------
# analytic mode fields
# ---------------------------------------------------------------------------

def _closed_form_field(positions, tags, label, rng):
    """Noise-free unit-amplitude deformation field for one subtype."""
    x, y, z = positions[:, 0], positions[:, 1], positions[:, 2]
    x0, x1 = x.min(), x.max()
    span = x1 - x0
    xn = (x - x0) / span
    z_c = z.mean()
    u = np.zeros_like(positions)
    tags = np.asarray(tags)

    if label == "bending_vertical_1":
        u[:, 2] = np.sin(np.pi * xn)
    elif label == "bending_vertical_2":
        u[:, 2] = np.sin(2 * np.pi * xn)
    elif label == "bending_lateral":
        u[:, 1] = np.sin(np.pi * xn)
    elif label.startswith("torsion"):
        if label == "torsion_global":
            theta = xn - 0.5
        elif label == "torsion_front":
            theta = np.clip(0.5 - xn, 0.0, None) * 2.0
        else:  # torsion_rear
            theta = np.clip(xn - 0.5, 0.0, None) * 2.0
        u[:, 1] = -theta * (z - z_c)
        u[:, 2] = theta * y
    elif label in ("pumping_floor", "pumping_roof", "pumping_combined"):
        def bump(group, sign, residual=0.05):
            mask = np.isin(tags, REGION_GROUPS[group])
            center = positions[mask].mean(axis=0)
            r2 = np.sum((positions - center) ** 2, axis=1)
            sigma2 = (0.25 * span) ** 2
            u[mask, 2] += sign * np.exp(-r2[mask] / (2 * sigma2))
            u[~mask, 2] += -sign * residual  # small opposite-sign residual
        if label == "pumping_floor":
            bump("floor", 1.0)
        elif label == "pumping_roof":
            bump("roof", 1.0)
        else:
            # unequal residuals so the two bumps leave a coherent trace on
            # the rest of the structure instead of cancelling exactly
            bump("floor", 1.0, residual=0.05)
            bump("roof", -1.0, residual=0.02)
    elif label in ("local_panel", "local_pillar"):
        group = "panel" if label == "local_panel" else "pillar"
        region = REGION_GROUPS[group][rng.integers(len(REGION_GROUPS[group]))]
        mask = tags == region
        center = positions[mask].mean(axis=0)
        r2 = np.sum((positions - center) ** 2, axis=1)
        sigma2 = (0.08 * span) ** 2
        direction = np.array([0.0, 1.0, 0.0]) if group == "pillar" else np.array([1.0, 0.0, 0.0])
        u[mask] = np.exp(-r2[mask, None] / (2 * sigma2)) * direction
    else:
        raise ContractError(f"unknown mode subtype {label!r}")
    return u


def synth_mode(spec, label, seed, wireframe=None, noise=0.05,
               amplitude=None, sign=None, mode_id=None):
    """Generate one ModeSample with an analytic deformation field.

    noise is Gaussian, scaled by the field RMS; amplitude defaults to a
    random draw in [0.5, 2] and sign to a random global flip.
    """
    if label not in LEVEL2_INDEX:
        raise ContractError(f"label {label!r} not in the taxonomy")
    rng = np.random.default_rng(seed)
    if wireframe is None:
        wireframe = synth_wireframe(spec, seed=0)
    positions, tags = wireframe

    u = _closed_form_field(positions, tags, label, rng)

    # per-region stiffness scaling: stiffer regions respond less
    if spec.stiffness:
        factors = np.array([1.0 / np.sqrt(spec.stiffness_of(t)) for t in tags])
        u = u * factors[:, None]

    if amplitude is None:
        amplitude = rng.uniform(0.5, 2.0)
    if sign is None:
        sign = 1.0 if rng.random() < 0.5 else -1.0
    u = u * (amplitude * sign)
    if noise > 0:
        rms = np.sqrt(np.mean(np.sum(u**2, axis=1)))
        u = u + rng.normal(scale=noise * rms, size=u.shape)

    lo, hi = _FREQ_BANDS[label]
    stiff_mean = np.mean([spec.stiffness_of(r) for r in REGIONS])
    freq = float(np.clip(rng.uniform(lo, hi) * np.sqrt(stiff_mean), 1e-3, 100.0))

    return ModeSample(
        vehicle_id=spec.vehicle_id,
        mode_id=mode_id or f"{label}_{seed}",
        frequency=freq,
        positions=positions,
        displacements=u,
        label=(LEVEL2_TO_LEVEL1[label], label),
    )


# ---------------------------------------------------------------------------
# MAC and mode tracking
# ---------------------------------------------------------------------------

def mac(phi_a, phi_b):
    """Modal assurance criterion of two flattened mode vectors."""
    a = np.asarray(phi_a, dtype=np.float64).ravel()
    b = np.asarray(phi_b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ContractError("mode vectors must have equal length")
    aa, bb = a @ a, b @ b
    if aa == 0.0 or bb == 0.0:
        raise InvalidSampleError("MAC of a zero vector is undefined")
    return float((a @ b) ** 2 / (aa * bb))


def track_modes(base, variant, threshold=0.7):
    """Greedy maximum-MAC matching of variant modes onto base modes.

    Both lists must share the wireframe (same node count and ordering).
    Pairs below the MAC threshold stay unmatched; labels propagate from base
    to matched variant modes. Returns (pairs, unmatched_variant_indices)
    where pairs is a list of (base_idx, variant_idx, mac_value).
    """
    if not base or not variant:
        return [], list(range(len(variant)))
    n_nodes = base[0].displacements.shape[0]
    for s in base + variant:
        if s.displacements.shape[0] != n_nodes:
            raise ContractError("mode tracking requires a shared wireframe skeleton")

    mac_matrix = np.empty((len(base), len(variant)))
    for i, sb in enumerate(base):
        for j, sv in enumerate(variant):
            mac_matrix[i, j] = mac(sb.displacements, sv.displacements)

    order = np.argsort(mac_matrix, axis=None)[::-1]
    used_base, used_var = set(), set()
    pairs = []
    for flat in order:
        i, j = divmod(int(flat), len(variant))
        if mac_matrix[i, j] < threshold:
            break
        if i in used_base or j in used_var:
            continue
        used_base.add(i)
        used_var.add(j)
        pairs.append((i, j, float(mac_matrix[i, j])))
        if base[i].label is not None:
            variant[j].label = base[i].label
    unmatched = [j for j in range(len(variant)) if j not in used_var]
    return pairs, unmatched


# ---------------------------------------------------------------------------
# rule-based label oracle
# ---------------------------------------------------------------------------

def rule_based_level1(region_sample):
    """Threshold classifier on pooled scalars and per-region energies.

    Used as a generator-faithfulness oracle: on noise-free samples it must
    agree with the generating Level-1 label.
    """
    pooled = region_sample.pooled
    e_r = region_sample.graph.node_features[:, 6]
    e_floor, e_roof, _, antisym, _, e_pillar = pooled

    local_regions = REGION_GROUPS["pillar"] + REGION_GROUPS["panel"]
    local_idx = [biwgraph.REGION_INDEX[r] for r in local_regions]
    if max(e_r[i] for i in local_idx) > 0.45:
        return "LOCAL"
    if antisym > 0.5:
        return "TORSION"
    if max(e_floor, e_roof) > 0.5 or (e_floor + e_roof) > 0.75:
        return "PUMPING"
    return "BENDING"


# ---------------------------------------------------------------------------
# dataset builder
# ---------------------------------------------------------------------------

def largest_remainder_split(n, ratios):
    """Integer split of n by ratios (summing to 1), largest-remainder rounding."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError("split ratios must sum to 1")
    raw = [n * r for r in ratios]
    counts = [int(np.floor(v)) for v in raw]
    remainder = n - sum(counts)
    order = np.argsort([v - np.floor(v) for v in raw])[::-1]
    for i in range(remainder):
        counts[order[i]] += 1
    return counts


@dataclass
class DatasetConfig:
    reference: VehicleSpec
    targets: list                       # VehicleSpec
    target_train_budgets: list          # labeled modes fed to training, per target
    reference_class_counts: dict | None = None  # level2 -> count
    target_eval_count: int = 20         # extra labeled target modes for val/test
    ratios: tuple = (0.70, 0.15, 0.15)
    noise: float = 0.05
    seed: int = 0


def default_dataset_config(seed=0):
    """Four vehicles: a richly labeled reference plus targets with 9/2/5
    training labels. Reference class counts are chosen so the training split
    holds 226 labeled modes in total."""
    counts = {c: 27 for c in LEVEL2}
    counts["bending_vertical_1"] = 28
    rng = np.random.default_rng(seed + 77)

    def spec(vid, wheelbase, width, height, n):
        stiff = {r: float(rng.uniform(0.15, 6.0)) for r in REGIONS}
        return VehicleSpec(vid, wheelbase, width, height, n, stiff)

    return DatasetConfig(
        reference=spec("ref_midsize", 1.00, 1.00, 1.00, 160),
        targets=[
            spec("tgt_compact", 0.75, 0.90, 1.25, 140),
            spec("tgt_luxury", 1.35, 1.10, 0.95, 200),
            spec("tgt_sport", 1.05, 1.30, 0.70, 180),
        ],
        target_train_budgets=[9, 2, 5],
        seed=seed,
    )


@dataclass
class ModeDataset:
    samples: list                    # ModeSample
    splits: dict                     # sample key -> "train" | "val" | "test"
    wireframes: dict                 # vehicle_id -> (positions, tags)
    skeletons: dict                  # vehicle_id -> RegionalSkeleton
    manifest: dict

    @staticmethod
    def key(sample):
        return f"{sample.vehicle_id}/{sample.mode_id}"

    def split_samples(self, split):
        return [s for s in self.samples if self.splits[self.key(s)] == split]

    def aggregate(self, sample, normalize_amplitude=True):
        return biwgraph.aggregate_mode(
            sample, self.skeletons[sample.vehicle_id],
            normalize_amplitude=normalize_amplitude)


def build_dataset(config=None, seed=None):
    """Generate the multi-vehicle mode dataset with stratified splits."""
    config = config or default_dataset_config()
    if seed is not None:
        config.seed = seed
    if len(config.targets) != len(config.target_train_budgets):
        raise ConfigError("one training budget per target vehicle is required")
    class_counts = config.reference_class_counts or {
        **{c: 27 for c in LEVEL2}, "bending_vertical_1": 28}

    master = config.seed
    samples, splits = [], {}
    wireframes, skeletons = {}, {}

    def sample_seed(vehicle_id, idx):
        tag = zlib.crc32(vehicle_id.encode())
        return (master * 2654435761 + tag * 97 + idx) % (2**32)

    # reference vehicle: stratified 70/15/15 per Level-2 class
    ref = config.reference
    wf = synth_wireframe(ref, seed=sample_seed(ref.vehicle_id, -1))
    wireframes[ref.vehicle_id] = wf
    skeletons[ref.vehicle_id] = build_canonical_skeleton(wf[1])
    idx = 0
    for label in LEVEL2:
        count = class_counts[label]
        n_train, n_val, n_test = largest_remainder_split(count, config.ratios)
        assigned = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
        for split in assigned:
            s = synth_mode(ref, label, sample_seed(ref.vehicle_id, idx),
                           wireframe=wf, noise=config.noise,
                           mode_id=f"m{idx:04d}_{label}")
            samples.append(s)
            splits[ModeDataset.key(s)] = split
            idx += 1

    # target vehicles: tiny training budgets plus held-out eval samples
    for spec_t, budget in zip(config.targets, config.target_train_budgets):
        wf = synth_wireframe(spec_t, seed=sample_seed(spec_t.vehicle_id, -1))
        wireframes[spec_t.vehicle_id] = wf
        skeletons[spec_t.vehicle_id] = build_canonical_skeleton(wf[1])
        total = budget + config.target_eval_count
        if budget > total:
            raise ConfigError("training budget exceeds generated mode count")
        labels = [LEVEL2[i % len(LEVEL2)] for i in range(total)]
        rng = np.random.default_rng(sample_seed(spec_t.vehicle_id, -2))
        rng.shuffle(labels)
        n_val = config.target_eval_count // 2
        for i, label in enumerate(labels):
            s = synth_mode(spec_t, label, sample_seed(spec_t.vehicle_id, i),
                           wireframe=wf, noise=config.noise,
                           mode_id=f"m{i:04d}_{label}")
            samples.append(s)
            if i < budget:
                split = "train"
            elif i < budget + n_val:
                split = "val"
            else:
                split = "test"
            splits[ModeDataset.key(s)] = split

    manifest = {
        "seed": master,
        "vehicles": [ref.vehicle_id] + [t.vehicle_id for t in config.targets],
        "target_train_budgets": list(config.target_train_budgets),
        "ratios": list(config.ratios),
        "counts": {
            split: sum(1 for v in splits.values() if v == split)
            for split in ("train", "val", "test")
        },
    }
    return ModeDataset(samples=samples, splits=splits, wireframes=wireframes,
                       skeletons=skeletons, manifest=manifest)


# ---------------------------------------------------------------------------
# disk layout (wireframe JSON per vehicle + manifest)
# ---------------------------------------------------------------------------

def save_dataset(dataset, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    by_vehicle = {}
    for s in dataset.samples:
        by_vehicle.setdefault(s.vehicle_id, []).append(s)
    for vid, modes in by_vehicle.items():
        positions, tags = dataset.wireframes[vid]
        biwgraph.save_wireframe_json(
            os.path.join(out_dir, f"{vid}.json"), vid, positions, tags, modes)
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump({"manifest": dataset.manifest, "splits": dataset.splits},
                  f, sort_keys=True)


def load_dataset(in_dir):
    with open(os.path.join(in_dir, "manifest.json")) as f:
        doc = json.load(f)
    samples, wireframes, skeletons = [], {}, {}
    for vid in doc["manifest"]["vehicles"]:
        _, positions, tags, modes = biwgraph.load_wireframe_json(
            os.path.join(in_dir, f"{vid}.json"))
        wireframes[vid] = (positions, tags)
        skeletons[vid] = build_canonical_skeleton(tags)
        samples.extend(modes)
    return ModeDataset(samples=samples, splits=doc["splits"],
                       wireframes=wireframes, skeletons=skeletons,
                       manifest=doc["manifest"])
