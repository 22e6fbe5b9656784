"""Surface mesh services: differential quantities, k-NN graphs, symmetry
detection, discrete surface divergence, and parametric body generators.

Curvature and divergence use the cotangent Laplacian with barycentric vertex
areas, which is testable against analytic sphere/plane cases.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from .errors import (
    AsymmetricGeometryError,
    ContractError,
    DegenerateGeometryError,
    ShapeError,
)

_AREA_EPS = 1e-14


@dataclass
class SurfaceMesh:
    vertices: np.ndarray        # (N, 3) meters
    triangles: np.ndarray       # (M, 3) int64
    normals: np.ndarray         # (N, 3) unit outward
    vertex_areas: np.ndarray    # (N,) m^2, barycentric (incident triangle area / 3)
    mean_curvature: np.ndarray  # (N,) 1/m, signed (convex sphere positive)
    # directed cotangent edge structure (both orientations per undirected edge)
    edge_src: np.ndarray = None
    edge_dst: np.ndarray = None
    edge_weight: np.ndarray = None

    @property
    def num_vertices(self):
        return self.vertices.shape[0]

    def bbox_diagonal(self):
        ext = self.vertices.max(axis=0) - self.vertices.min(axis=0)
        return float(np.linalg.norm(ext))

    def centroid(self):
        return self.vertices.mean(axis=0)


@dataclass
class KnnGraph:
    k: int
    src: np.ndarray          # directed edges before symmetrization, (N*k,)
    dst: np.ndarray
    sym_src: np.ndarray      # symmetrized (closed under swap), no self-edges
    sym_dst: np.ndarray
    offsets: np.ndarray      # (Es, 3) position[dst] - position[src]
    distances: np.ndarray    # (Es,)
    normal_cosines: np.ndarray  # (Es,)


@dataclass
class SymmetryFrame:
    normal: np.ndarray   # unit 3-vector
    offset: float        # plane is {p : p.normal == offset}
    eps: float           # midline classification tolerance (m)
    quality: float = 1.0

    def signed_distance(self, points):
        return points @ self.normal - self.offset

    def reflect(self, points):
        d = self.signed_distance(points)
        return points - 2.0 * d[:, None] * self.normal[None, :]


# ---------------------------------------------------------------------------
# differential quantities
# ---------------------------------------------------------------------------

def compute_differentials(vertices, triangles):
    """Build a SurfaceMesh with normals, barycentric areas, and mean curvature.

    Zero-area triangles and isolated vertices are rejected.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    triangles = np.asarray(triangles, dtype=np.int64)
    n = vertices.shape[0]
    if n < 4:
        raise ContractError("mesh needs at least 4 vertices")
    if triangles.size and triangles.max() >= n:
        raise ShapeError("triangle index out of range")

    p0 = vertices[triangles[:, 0]]
    p1 = vertices[triangles[:, 1]]
    p2 = vertices[triangles[:, 2]]
    cross = np.cross(p1 - p0, p2 - p0)
    double_area = np.linalg.norm(cross, axis=1)
    if np.any(double_area < _AREA_EPS):
        bad = int(np.argmin(double_area))
        raise DegenerateGeometryError(f"zero-area triangle at index {bad}")
    tri_area = 0.5 * double_area
    tri_normal = cross / double_area[:, None]

    # vertex normals: area-weighted incident triangle normals
    normals = np.zeros((n, 3))
    for c in range(3):
        np.add.at(normals, triangles[:, c], tri_normal * tri_area[:, None])
    norm = np.linalg.norm(normals, axis=1)
    touched = np.zeros(n, dtype=bool)
    touched[triangles.ravel()] = True
    if not touched.all():
        bad = int(np.flatnonzero(~touched)[0])
        raise DegenerateGeometryError(f"isolated vertex {bad}")
    normals /= norm[:, None]

    vertex_areas = np.zeros(n)
    for c in range(3):
        np.add.at(vertex_areas, triangles[:, c], tri_area / 3.0)

    # cotangent weights: corner at vertex k contributes to opposite edge (i, j)
    ii, jj, ww = [], [], []
    corners = [(0, 1, 2), (1, 2, 0), (2, 0, 1)]
    for a, b, c in corners:
        u = vertices[triangles[:, b]] - vertices[triangles[:, a]]
        v = vertices[triangles[:, c]] - vertices[triangles[:, a]]
        cot = np.einsum("ij,ij->i", u, v) / double_area
        ii.append(triangles[:, b])
        jj.append(triangles[:, c])
        ww.append(0.5 * cot)
    ii = np.concatenate(ii)
    jj = np.concatenate(jj)
    ww = np.concatenate(ww)
    w_mat = sparse.coo_matrix((ww, (ii, jj)), shape=(n, n)).tocsr()
    w_mat = w_mat + w_mat.T  # symmetric undirected weights, both orientations stored

    coo = w_mat.tocoo()
    edge_src = coo.row.astype(np.int64)
    edge_dst = coo.col.astype(np.int64)
    edge_weight = coo.data

    # mean curvature normal: (1/2A_i) sum_j w_ij (x_j - x_i); sign convention
    # makes a convex sphere (normal opposing the Laplacian vector) positive.
    # Voronoi areas A_vor = (1/4) sum_j w_ij |x_i-x_j|^2 keep the estimate
    # accurate at irregular-valence vertices; barycentric areas stay the
    # exported vertex measure.
    lap = w_mat @ vertices - np.asarray(w_mat.sum(axis=1)) * vertices
    edge_d2 = np.sum((vertices[edge_dst] - vertices[edge_src]) ** 2, axis=1)
    voronoi = np.zeros(n)
    np.add.at(voronoi, edge_src, 0.25 * edge_weight * edge_d2)
    curv_area = np.where(voronoi > _AREA_EPS, voronoi, vertex_areas)
    h_vec = lap / (2.0 * curv_area[:, None])
    h_mag = np.linalg.norm(h_vec, axis=1)
    sign = -np.sign(np.einsum("ij,ij->i", h_vec, normals))
    sign[sign == 0] = 1.0
    mean_curvature = sign * h_mag

    return SurfaceMesh(
        vertices=vertices,
        triangles=triangles,
        normals=normals,
        vertex_areas=vertex_areas,
        mean_curvature=mean_curvature,
        edge_src=edge_src,
        edge_dst=edge_dst,
        edge_weight=edge_weight,
    )


# ---------------------------------------------------------------------------
# k nearest neighbors
# ---------------------------------------------------------------------------

def knn_indices(points, k):
    """Exact k nearest neighbors per point, ties broken by lower index.

    A kd-tree provides the candidate set; final ranking uses squared
    Euclidean distance so results match a brute-force oracle exactly.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if not 1 <= k < n:
        raise ContractError(f"k must satisfy 1 <= k < N, got k={k}, N={n}")
    tree = cKDTree(points)
    kq = min(n, max(2 * k + 2, k + 10))
    _, cand = tree.query(points, k=kq)

    out = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        ci = cand[i][cand[i] != i]
        d2 = np.sum((points[ci] - points[i]) ** 2, axis=1)
        order = np.lexsort((ci, d2))
        ci, d2 = ci[order], d2[order]
        # expand if ties could straddle the candidate boundary
        if len(ci) > k and ci.shape[0] < n - 1 and d2[k - 1] >= d2[-1] * (1 - 1e-12):
            ball = np.asarray(tree.query_ball_point(points[i], np.sqrt(d2[-1]) * (1 + 1e-9)))
            ball = ball[ball != i]
            d2b = np.sum((points[ball] - points[i]) ** 2, axis=1)
            order = np.lexsort((ball, d2b))
            ci = ball[order]
        out[i] = ci[:k]
    return out


def build_knn_graph(mesh, k=16):
    """Directed exact k-NN edges plus the symmetrized (union) edge set with
    offset / distance / normal-cosine features."""
    idx = knn_indices(mesh.vertices, k)
    n = mesh.num_vertices
    src = np.repeat(np.arange(n, dtype=np.int64), k)
    dst = idx.ravel()

    pairs = np.concatenate([np.stack([src, dst], 1), np.stack([dst, src], 1)], axis=0)
    pairs = np.unique(pairs, axis=0)
    sym_src, sym_dst = pairs[:, 0], pairs[:, 1]

    offsets = mesh.vertices[sym_dst] - mesh.vertices[sym_src]
    distances = np.linalg.norm(offsets, axis=1)
    cosines = np.einsum("ij,ij->i", mesh.normals[sym_src], mesh.normals[sym_dst])
    return KnnGraph(
        k=k,
        src=src,
        dst=dst,
        sym_src=sym_src,
        sym_dst=sym_dst,
        offsets=offsets,
        distances=distances,
        normal_cosines=cosines,
    )


# ---------------------------------------------------------------------------
# bilateral symmetry
# ---------------------------------------------------------------------------

def match_tolerance(vertices):
    """Scale-free mirror matching tolerance: 1e-4 x bounding-box diagonal."""
    ext = vertices.max(axis=0) - vertices.min(axis=0)
    return 1e-4 * float(np.linalg.norm(ext))


def symmetry_quality(mesh, frame):
    """Fraction of vertices whose mirror image has a mesh vertex within the
    matching tolerance."""
    delta = match_tolerance(mesh.vertices)
    mirrored = frame.reflect(mesh.vertices)
    tree = cKDTree(mesh.vertices)
    d, _ = tree.query(mirrored, k=1)
    return float(np.mean(d <= delta))


def detect_symmetry(mesh, plane="y0"):
    """Find the bilateral symmetry plane and score it.

    plane="y0" uses the y=0 plane (all generated bodies are built that way);
    plane="pca" takes the least-dominant principal axis through the centroid.
    Raises AsymmetricGeometryError when fewer than 90% of vertices match.
    """
    delta = match_tolerance(mesh.vertices)
    if plane == "y0":
        normal = np.array([0.0, 1.0, 0.0])
        offset = 0.0
    elif plane == "pca":
        centered = mesh.vertices - mesh.centroid()
        cov = centered.T @ centered / len(centered)
        _, evecs = np.linalg.eigh(cov)
        # candidate planes through the centroid along each principal axis,
        # scored by mirror quality; ties favor the least-dominant axis
        best = None
        for col in range(3):
            cand = evecs[:, col]
            if cand[np.argmax(np.abs(cand))] < 0:
                cand = -cand
            fr = SymmetryFrame(cand, float(mesh.centroid() @ cand), delta)
            q = symmetry_quality(mesh, fr)
            if best is None or q > best[0]:
                best = (q, cand, fr.offset)
        _, normal, offset = best
    else:
        raise ContractError(f"unknown symmetry plane mode {plane!r}")

    frame = SymmetryFrame(normal=normal, offset=offset, eps=delta)
    frame.quality = symmetry_quality(mesh, frame)
    if frame.quality < 0.9:
        raise AsymmetricGeometryError(
            f"symmetry quality {frame.quality:.3f} below 0.9 for plane mode {plane!r}"
        )
    return frame


# ---------------------------------------------------------------------------
# discrete surface divergence
# ---------------------------------------------------------------------------

@dataclass
class DivergenceOperator:
    """Finite-volume divergence on a vertex graph.

    div_i = (1/area_i) * sum_j w_ij * ((g_i + g_j)/2) . (x_j - x_i)
    with g the tangential projection of the input field. Symmetric weights
    make the area-weighted integral over a closed surface cancel exactly.
    """

    src: np.ndarray
    dst: np.ndarray
    weights: np.ndarray
    offsets: np.ndarray   # (E, 3) x[dst] - x[src]
    areas: np.ndarray
    normals: np.ndarray

    @classmethod
    def from_mesh(cls, mesh):
        offsets = mesh.vertices[mesh.edge_dst] - mesh.vertices[mesh.edge_src]
        return cls(
            src=mesh.edge_src,
            dst=mesh.edge_dst,
            weights=mesh.edge_weight,
            offsets=offsets,
            areas=mesh.vertex_areas,
            normals=mesh.normals,
        )

    @classmethod
    def from_knn(cls, positions, sym_src, sym_dst, areas, normals):
        """Divergence on a k-NN graph; weights (a_i+a_j)/(2 d^2) stand in for
        cotangents on graphs without triangulation."""
        offsets = positions[sym_dst] - positions[sym_src]
        d2 = np.sum(offsets**2, axis=1)
        w = (areas[sym_src] + areas[sym_dst]) / (2.0 * d2)
        return cls(src=sym_src, dst=sym_dst, weights=w, offsets=offsets,
                   areas=areas, normals=normals)

    def apply(self, field):
        field = np.asarray(field, dtype=np.float64)
        if field.shape != self.normals.shape:
            raise ShapeError("field must be a per-vertex 3-vector array")
        g = field - np.einsum("ij,ij->i", field, self.normals)[:, None] * self.normals
        mid = 0.5 * (g[self.src] + g[self.dst])
        contrib = self.weights * np.einsum("ij,ij->i", mid, self.offsets)
        div = np.zeros(len(self.areas))
        np.add.at(div, self.src, contrib)
        return div / self.areas


def surface_divergence(mesh, field):
    """Per-vertex divergence of a tangential field on a triangulated mesh."""
    return DivergenceOperator.from_mesh(mesh).apply(field)


# ---------------------------------------------------------------------------
# parametric body generators
# ---------------------------------------------------------------------------

def _icosahedron():
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    v = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    v /= np.linalg.norm(v[0])
    f = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    return v, f


def icosphere(subdivisions):
    """Unit icosphere: 10*4^s + 2 vertices. Vertex set is exactly mirror
    symmetric about y=0 (bitwise, by construction)."""
    if subdivisions < 0:
        raise ContractError("subdivisions must be >= 0")
    verts, faces = _icosahedron()
    verts = list(verts)
    for _ in range(subdivisions):
        cache = {}
        new_faces = []

        def midpoint(i, j):
            key = (i, j) if i < j else (j, i)
            if key in cache:
                return cache[key]
            m = 0.5 * (verts[key[0]] + verts[key[1]])
            m = m / np.linalg.norm(m)
            verts.append(m)
            cache[key] = len(verts) - 1
            return cache[key]

        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]]
        faces = np.asarray(new_faces, dtype=np.int64)
    return np.asarray(verts), faces


def generate_body(family, params=None, subdivision=4):
    """Generate a closed analysis body: 'sphere', 'ellipsoid', or 'car_like'.

    car_like adds a cabin bump and a family-tagged rear taper ('A'/'B'/'C'
    profile via params['taper']) on an ellipsoid base; construction is exactly
    mirror symmetric about y=0.
    """
    params = dict(params or {})
    if subdivision < 2:
        raise ContractError("subdivision must be >= 2")
    verts, faces = icosphere(subdivision)

    if family == "sphere":
        r = float(params.get("radius", 1.0))
        if r <= 0:
            raise ContractError("radius must be positive")
        verts = verts * r
    elif family == "ellipsoid":
        axes = np.asarray(params.get("axes", (2.0, 1.0, 0.8)), dtype=np.float64)
        if np.any(axes <= 0):
            raise ContractError("semi-axes must be positive")
        verts = verts * axes
    elif family == "car_like":
        verts = _car_like(verts, params)
    else:
        raise ContractError(f"unknown shape family {family!r}")
    return compute_differentials(verts, faces)


def _car_like(unit_verts, params):
    length = float(params.get("length", 4.2))
    width = float(params.get("width", 1.8))
    height = float(params.get("height", 1.3))
    cabin = float(params.get("cabin", 0.35))
    taper = params.get("taper", "A")
    taper_strength = float(params.get("taper_strength", {"A": 0.15, "B": 0.45, "C": 0.30}[taper]))
    if min(length, width, height) <= 0:
        raise ContractError("body dimensions must be positive")

    v = unit_verts * np.array([length / 2.0, width / 2.0, height / 2.0])
    x = v[:, 0]
    xn = x / (length / 2.0)  # -1 rear .. +1 nose

    # cabin: smooth bump on the upper surface around mid-rear
    upper = np.clip(v[:, 2] / (height / 2.0), 0.0, 1.0)
    bump = cabin * np.exp(-((xn + 0.15) / 0.35) ** 2) * upper
    v[:, 2] = v[:, 2] * (1.0 + bump)

    # rear taper, family-specific profile; functions of (xn, |y| via y-scaling)
    rear = np.clip(-(xn + 0.3) / 0.7, 0.0, 1.0)
    if taper == "A":      # estate-like: gentle squeeze
        profile = rear**2
    elif taper == "B":    # fastback-like: smooth strong slope
        profile = rear**1.5
    elif taper == "C":    # notchback-like: delayed then sharper
        profile = rear**3
    else:
        raise ContractError(f"unknown taper profile {taper!r}")
    shrink = 1.0 - taper_strength * profile
    v[:, 1] *= shrink
    v[:, 2] *= 0.5 * (1.0 + shrink)
    return v


def flat_patch(nx, ny, spacing=1.0):
    """Regular triangulated plane patch in z=0, for tests and demos."""
    xs, ys = np.meshgrid(np.arange(nx) * spacing, np.arange(ny) * spacing, indexing="ij")
    verts = np.stack([xs.ravel(), ys.ravel(), np.zeros(nx * ny)], axis=1)
    faces = []
    for i in range(nx - 1):
        for j in range(ny - 1):
            a = i * ny + j
            b = (i + 1) * ny + j
            faces.append([a, b, a + 1])
            faces.append([b, b + 1, a + 1])
    return verts, np.asarray(faces, dtype=np.int64)


# ---------------------------------------------------------------------------
# OBJ / CSV interchange
# ---------------------------------------------------------------------------

def save_obj(path, mesh):
    with open(path, "w") as f:
        for v in mesh.vertices:
            f.write(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
        for t in mesh.triangles:
            f.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


def load_obj(path):
    """Read an OBJ with triangular faces and rebuild differential quantities."""
    verts, faces = [], []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                verts.append([float(p) for p in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
                if len(idx) != 3:
                    raise ShapeError("only triangular faces are supported")
                faces.append(idx)
    return compute_differentials(np.asarray(verts), np.asarray(faces, dtype=np.int64))


def save_fields_csv(path, names, columns):
    """Write per-vertex fields as `vertex_id,<field columns>`."""
    arr = np.column_stack([np.asarray(c, dtype=np.float64) for c in columns])
    with open(path, "w") as f:
        f.write("vertex_id," + ",".join(names) + "\n")
        for i, row in enumerate(arr):
            f.write(str(i) + "," + ",".join(repr(float(x)) for x in row) + "\n")


def load_fields_csv(path):
    """Read a per-vertex field CSV; returns (names, array of shape (N, C))."""
    with open(path) as f:
        header = f.readline().strip().split(",")
        if header[0] != "vertex_id":
            raise ShapeError("field CSV must start with a vertex_id column")
        rows = [line.strip().split(",") for line in f if line.strip()]
    data = np.asarray([[float(x) for x in r[1:]] for r in rows])
    return header[1:], data
