"""Triangle meshes, primitive shape synthesis, and geometric losses.

All geometry lives in a canonical object frame: shapes are centered at the
origin and assembled objects fit inside the cube [-0.5, 0.5]^3.  Meshes are
plain vertex/face arrays (numpy); the differentiable losses accept torch
tensors so gradients can flow through vertex coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

TEMPLATE_SUBDIVISIONS = 3
MAX_SUBDIVISIONS = 5


# ---------------------------------------------------------------------------
# quaternions (w, x, y, z)

def quat_identity() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_from_axis_angle(axis, angle_rad: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle_rad
    return np.concatenate([[math.cos(half)], math.sin(half) * axis])


def quat_multiply(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64)
    n = w * w + x * x + y * y + z * z
    if abs(n - 1.0) > 1e-6:
        raise ValueError(f"quaternion norm {math.sqrt(n):.6f} is not 1")
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random unit quaternion over SO(3) (Shoemake's method)."""
    u1, u2, u3 = rng.random(3)
    a, b = math.sqrt(1.0 - u1), math.sqrt(u1)
    return np.array([
        b * math.cos(2 * math.pi * u3),
        a * math.sin(2 * math.pi * u2),
        a * math.cos(2 * math.pi * u2),
        b * math.sin(2 * math.pi * u3),
    ])


# ---------------------------------------------------------------------------
# core types

@dataclass
class TriangleMesh:
    """Vertices (V,3 float) and faces (F,3 int, CCW winding, outward normals).

    ``part_index`` optionally tags each vertex with the part it came from
    (filled by :func:`merge_meshes`).
    """

    vertices: np.ndarray
    faces: np.ndarray
    part_index: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size:
            if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
                raise ValueError("face index out of range")
            f = self.faces
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise ValueError("degenerate face (repeated vertex index)")
        if self.part_index is not None:
            self.part_index = np.asarray(self.part_index, dtype=np.int64).reshape(-1)
            if len(self.part_index) != len(self.vertices):
                raise ValueError("part_index length mismatch")

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    def copy(self) -> "TriangleMesh":
        pi = None if self.part_index is None else self.part_index.copy()
        return TriangleMesh(self.vertices.copy(), self.faces.copy(), pi)


@dataclass
class PrimitiveSpec:
    """A primitive shape: kind in {ellipsoid, cuboid, cylinder, cone},
    per-axis scale in [0.1, 0.5], and a unit-quaternion rotation."""

    kind: str
    scale: np.ndarray
    rotation: np.ndarray = field(default_factory=quat_identity)

    KINDS = ("ellipsoid", "cuboid", "cylinder", "cone")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(3)
        if np.any(self.scale <= 0):
            raise ValueError("scale components must be positive")
        if np.any(self.scale < 0.1 - 1e-12) or np.any(self.scale > 0.5 + 1e-12):
            raise ValueError("scale components must lie in [0.1, 0.5]")
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        if abs(np.linalg.norm(self.rotation) - 1.0) > 1e-6:
            raise ValueError("rotation quaternion must have unit norm")


@dataclass
class SimilarityTransform:
    """scale (per axis), then rotation, then translation."""

    scale: np.ndarray = field(default_factory=lambda: np.ones(3))
    rotation: np.ndarray = field(default_factory=quat_identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.any(np.abs(self.translation) > 0.5 + 1e-12):
            raise ValueError("translation must stay within +-0.5 per axis")


def compose_transforms(outer: SimilarityTransform, inner: SimilarityTransform) -> SimilarityTransform:
    """Transform equivalent to applying ``inner`` then ``outer``.

    Only defined when the outer scale is isotropic (an anisotropic scale does
    not commute with the inner rotation).
    """
    if not np.allclose(outer.scale, outer.scale[0]):
        raise ValueError("composition requires an isotropic outer scale")
    c = outer.scale[0]
    r_outer = quat_to_matrix(outer.rotation)
    return SimilarityTransform(
        scale=c * inner.scale,
        rotation=quat_multiply(outer.rotation, inner.rotation),
        translation=r_outer @ (c * inner.translation) + outer.translation,
    )


def apply_transform(mesh: TriangleMesh, t: SimilarityTransform) -> TriangleMesh:
    """Map vertices by scale, then rotation, then translation; faces unchanged."""
    r = quat_to_matrix(t.rotation)
    v = (mesh.vertices * t.scale) @ r.T + t.translation
    pi = None if mesh.part_index is None else mesh.part_index.copy()
    return TriangleMesh(v, mesh.faces.copy(), pi)


def merge_meshes(parts: list[TriangleMesh]) -> TriangleMesh:
    """Concatenate part meshes, re-indexing faces and tagging vertices with
    their part of origin."""
    if not parts:
        raise ValueError("cannot merge an empty part list")
    verts, faces, index = [], [], []
    offset = 0
    for i, p in enumerate(parts):
        verts.append(p.vertices)
        faces.append(p.faces + offset)
        index.append(np.full(p.num_vertices, i, dtype=np.int64))
        offset += p.num_vertices
    return TriangleMesh(np.concatenate(verts), np.concatenate(faces), np.concatenate(index))


# ---------------------------------------------------------------------------
# template icosphere

def _icosahedron() -> tuple[np.ndarray, np.ndarray]:
    # Polar orientation: poles on +-y, rings rotated so that after one
    # subdivision a vertex lands exactly on the +x equator (UV seam anchor).
    lat = math.atan(0.5)
    verts = [(0.0, 1.0, 0.0)]
    for k in range(5):  # upper ring
        phi = math.radians(-18.0 + 72.0 * k)
        verts.append((math.cos(lat) * math.cos(phi), math.sin(lat), math.cos(lat) * math.sin(phi)))
    for k in range(5):  # lower ring
        phi = math.radians(18.0 + 72.0 * k)
        verts.append((math.cos(lat) * math.cos(phi), -math.sin(lat), math.cos(lat) * math.sin(phi)))
    verts.append((0.0, -1.0, 0.0))
    up = [1 + k for k in range(5)]
    lo = [6 + k for k in range(5)]
    faces = []
    for k in range(5):
        kn = (k + 1) % 5
        faces.append((0, up[k], up[kn]))            # top cap
        faces.append((up[k], lo[k], up[kn]))        # upper band
        faces.append((up[kn], lo[k], lo[kn]))       # lower band
        faces.append((11, lo[kn], lo[k]))           # bottom cap
    return np.array(verts), np.array(faces, dtype=np.int64)


def _orient_outward(verts: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Flip faces whose normal points toward the origin (shapes here are
    star-shaped around the origin)."""
    a, b, c = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    n = np.cross(b - a, c - a)
    centroid = (a + b + c) / 3.0
    flip = (n * centroid).sum(axis=1) < 0
    faces = faces.copy()
    faces[flip] = faces[flip][:, ::-1]
    return faces


def make_icosphere(subdivision_level: int, radius: float = 0.5) -> TriangleMesh:
    """Watertight sphere from a subdivided icosahedron.

    Vertex count is 10 * 4**level + 2; level 3 gives the 642-vertex /
    1280-face deformation template.
    """
    if subdivision_level < 0:
        raise ValueError("subdivision level must be non-negative")
    if subdivision_level > MAX_SUBDIVISIONS:
        raise ValueError(f"subdivision level > {MAX_SUBDIVISIONS} rejected (memory guard)")
    verts, faces = _icosahedron()
    verts = [v / np.linalg.norm(v) for v in verts]
    for _ in range(subdivision_level):
        midpoint = {}
        new_faces = []

        def mid(i, j):
            key = (i, j) if i < j else (j, i)
            if key not in midpoint:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                midpoint[key] = len(verts) - 1
            return midpoint[key]

        for (i, j, k) in faces:
            a, b, c = mid(i, j), mid(j, k), mid(k, i)
            new_faces.extend([(i, a, c), (j, b, a), (k, c, b), (a, b, c)])
        faces = np.array(new_faces, dtype=np.int64)
    verts = np.array(verts) * radius
    return TriangleMesh(verts, _orient_outward(verts, faces))


_template_cache: dict[int, TriangleMesh] = {}


def template_sphere(level: int = TEMPLATE_SUBDIVISIONS) -> TriangleMesh:
    """The shared deformation template (cached; treat as read-only)."""
    if level not in _template_cache:
        _template_cache[level] = make_icosphere(level)
    return _template_cache[level]


# ---------------------------------------------------------------------------
# primitive meshes (base shapes have half-extent 1, centered at origin)

def _weld(verts: np.ndarray, faces: np.ndarray, decimals: int = 9):
    keys = np.round(verts, decimals)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    return verts[first], inverse[faces]


def _unit_sphere(resolution: int):
    rings, segs = resolution, 2 * resolution
    verts = [(0.0, 0.0, 1.0)]
    for r in range(1, rings):
        theta = math.pi * r / rings
        for s in range(segs):
            phi = 2 * math.pi * s / segs
            verts.append((math.sin(theta) * math.cos(phi),
                          math.sin(theta) * math.sin(phi),
                          math.cos(theta)))
    verts.append((0.0, 0.0, -1.0))
    south = len(verts) - 1
    idx = lambda r, s: 1 + (r - 1) * segs + (s % segs)
    faces = []
    for s in range(segs):
        faces.append((0, idx(1, s), idx(1, s + 1)))
        faces.append((south, idx(rings - 1, s + 1), idx(rings - 1, s)))
    for r in range(1, rings - 1):
        for s in range(segs):
            a, b = idx(r, s), idx(r, s + 1)
            c, d = idx(r + 1, s), idx(r + 1, s + 1)
            faces.extend([(a, c, b), (b, c, d)])
    return np.array(verts), np.array(faces, dtype=np.int64)


def _unit_cuboid(resolution: int):
    n = max(1, resolution // 2)
    grid = np.linspace(-1.0, 1.0, n + 1)
    verts, faces = [], []
    # axis = constant coordinate, sign = which side; (u, v) span the face
    for axis in range(3):
        for sign in (-1.0, 1.0):
            base = len(verts)
            for gu in grid:
                for gv in grid:
                    p = np.zeros(3)
                    p[axis] = sign
                    p[(axis + 1) % 3] = gu
                    p[(axis + 2) % 3] = gv
                    verts.append(p)
            for i in range(n):
                for j in range(n):
                    a = base + i * (n + 1) + j
                    b, c, d = a + 1, a + (n + 1), a + (n + 1) + 1
                    faces.extend([(a, b, c), (b, d, c)])
    verts, faces = _weld(np.array(verts), np.array(faces, dtype=np.int64))
    return verts, _orient_outward(verts, faces)


def _unit_cylinder(resolution: int):
    # axis +z, unit radius, z in [-1, 1]
    segs, hdiv = 2 * resolution, max(1, resolution // 2)
    verts = []
    for r in range(hdiv + 1):
        z = -1.0 + 2.0 * r / hdiv
        for s in range(segs):
            phi = 2 * math.pi * s / segs
            verts.append((math.cos(phi), math.sin(phi), z))
    top_c, bot_c = len(verts), len(verts) + 1
    verts.extend([(0.0, 0.0, 1.0), (0.0, 0.0, -1.0)])
    idx = lambda r, s: r * segs + (s % segs)
    faces = []
    for r in range(hdiv):
        for s in range(segs):
            a, b = idx(r, s), idx(r, s + 1)
            c, d = idx(r + 1, s), idx(r + 1, s + 1)
            faces.extend([(a, b, c), (b, d, c)])
    for s in range(segs):
        faces.append((top_c, idx(hdiv, s), idx(hdiv, s + 1)))
        faces.append((bot_c, idx(0, s + 1), idx(0, s)))
    verts, faces = np.array(verts), np.array(faces, dtype=np.int64)
    return verts, _orient_outward(verts, faces)


def _unit_cone(resolution: int):
    # apex at +z, unit-radius base disc at z = -1
    segs, hdiv = 2 * resolution, max(1, resolution // 2)
    verts = []
    for r in range(hdiv):  # rings from base toward apex (apex excluded)
        t = r / hdiv
        z = -1.0 + 2.0 * t
        rad = 1.0 - t
        for s in range(segs):
            phi = 2 * math.pi * s / segs
            verts.append((rad * math.cos(phi), rad * math.sin(phi), z))
    apex, base_c = len(verts), len(verts) + 1
    verts.extend([(0.0, 0.0, 1.0), (0.0, 0.0, -1.0)])
    idx = lambda r, s: r * segs + (s % segs)
    faces = []
    for r in range(hdiv - 1):
        for s in range(segs):
            a, b = idx(r, s), idx(r, s + 1)
            c, d = idx(r + 1, s), idx(r + 1, s + 1)
            faces.extend([(a, b, c), (b, d, c)])
    for s in range(segs):
        faces.append((apex, idx(hdiv - 1, s), idx(hdiv - 1, s + 1)))
        faces.append((base_c, idx(0, s + 1), idx(0, s)))
    verts, faces = np.array(verts), np.array(faces, dtype=np.int64)
    return verts, _orient_outward(verts, faces)


_UNIT_BUILDERS = {
    "ellipsoid": _unit_sphere,
    "cuboid": _unit_cuboid,
    "cylinder": _unit_cylinder,
    "cone": _unit_cone,
}


def make_primitive(spec: PrimitiveSpec, resolution: int = 16) -> TriangleMesh:
    """Tessellate a primitive and apply its scale and rotation.

    The base shapes have half-extent 1, so the axis-aligned bounding box of
    an unrotated primitive equals +-spec.scale.
    """
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    verts, faces = _UNIT_BUILDERS[spec.kind](resolution)
    verts = (verts * spec.scale) @ quat_to_matrix(spec.rotation).T
    return TriangleMesh(verts, faces)


# ---------------------------------------------------------------------------
# mesh utilities

def edge_face_counts(mesh: TriangleMesh) -> np.ndarray:
    """Number of faces incident to each undirected edge."""
    f = mesh.faces
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    e = np.sort(e, axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    return counts


def is_watertight(mesh: TriangleMesh) -> bool:
    """Every undirected edge shared by exactly two faces."""
    if mesh.num_faces == 0:
        return False
    return bool(np.all(edge_face_counts(mesh) == 2))


def vertex_neighbors(faces: np.ndarray, num_vertices: int):
    """One-ring adjacency from face connectivity.

    Returns (edges, degree): ``edges`` is an (E,2) int array of directed
    neighbor pairs (i receives neighbor j), ``degree`` the per-vertex count.
    """
    f = np.asarray(faces, dtype=np.int64)
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]],
                        f[:, [1, 0]], f[:, [2, 1]], f[:, [0, 2]]])
    e = np.unique(e, axis=0)
    degree = np.bincount(e[:, 0], minlength=num_vertices)
    return e, degree


def sample_surface(mesh: TriangleMesh, count: int, rng: np.random.Generator) -> np.ndarray:
    """Area-weighted uniform samples on the mesh surface (count, 3)."""
    v, f = mesh.vertices, mesh.faces
    a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has zero surface area")
    face_idx = rng.choice(len(f), size=count, p=areas / total)
    r1, r2 = rng.random(count), rng.random(count)
    flip = r1 + r2 > 1.0
    r1[flip], r2[flip] = 1.0 - r1[flip], 1.0 - r2[flip]
    fa, fb, fc = a[face_idx], b[face_idx], c[face_idx]
    return fa + r1[:, None] * (fb - fa) + r2[:, None] * (fc - fa)


# ---------------------------------------------------------------------------
# geometric losses (torch; numpy inputs are promoted to float64 tensors)

def _as_points(x) -> torch.Tensor:
    if isinstance(x, TriangleMesh):
        x = x.vertices
    if isinstance(x, np.ndarray):
        return torch.as_tensor(x, dtype=torch.float64)
    return x


def chamfer_distance(p, q) -> torch.Tensor:
    """Symmetric squared-distance Chamfer between two point sets (N,3), (M,3).

    Mean over p of squared distance to the nearest q, plus the same with the
    roles swapped.  Differentiable w.r.t. both inputs: nearest-neighbor
    indices are found without autograd and the loss is evaluated through the
    selected pairs (the minimum's gradient flows through its argmin branch),
    which keeps the backward graph tiny.
    """
    p, q = _as_points(p), _as_points(q)
    if p.numel() == 0 or q.numel() == 0:
        raise ValueError("chamfer_distance requires non-empty point sets")
    with torch.no_grad():
        d = torch.cdist(p.detach(), q.detach())
        idx_pq = d.argmin(dim=-1)
        idx_qp = d.argmin(dim=-2)
    nearest_q = torch.take_along_dim(q, idx_pq.unsqueeze(-1), dim=-2)
    nearest_p = torch.take_along_dim(p, idx_qp.unsqueeze(-1), dim=-2)
    return ((p - nearest_q) ** 2).sum(-1).mean(-1) \
        + ((q - nearest_p) ** 2).sum(-1).mean(-1)


def squared_distances(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """Pairwise squared Euclidean distances (..., N, M)."""
    p2 = (p * p).sum(-1)
    q2 = (q * q).sum(-1)
    cross = p @ q.transpose(-1, -2)
    return (p2.unsqueeze(-1) + q2.unsqueeze(-2) - 2.0 * cross).clamp_min(0.0)


class VertexNeighborhood:
    """Precomputed one-ring structure for fast repeated Laplacian evaluation."""

    def __init__(self, faces: np.ndarray, num_vertices: int):
        edges, degree = vertex_neighbors(faces, num_vertices)
        if np.any(degree == 0):
            raise ValueError("mesh has isolated vertices")
        self.num_vertices = num_vertices
        self.src = torch.as_tensor(edges[:, 0])
        self.dst = torch.as_tensor(edges[:, 1])
        self.degree = torch.as_tensor(degree, dtype=torch.float64)

    def loss(self, verts: torch.Tensor) -> torch.Tensor:
        """Mean squared distance of each vertex to its neighbor centroid.

        ``verts`` is (V,3) or (B,V,3).
        """
        deg = self.degree.to(verts.dtype).unsqueeze(-1)
        if verts.dim() == 2:
            nbr = torch.zeros_like(verts).index_add_(0, self.src, verts[self.dst])
            return ((verts - nbr / deg) ** 2).sum(-1).mean()
        nbr = torch.zeros_like(verts).index_add_(1, self.src, verts[:, self.dst])
        return ((verts - nbr / deg) ** 2).sum(-1).mean()


def laplacian_loss(mesh, faces: np.ndarray | None = None) -> torch.Tensor:
    """Uniform-graph Laplacian smoothness: mean over vertices of the squared
    distance to the centroid of their one-ring neighbors."""
    if isinstance(mesh, TriangleMesh):
        verts, faces = _as_points(mesh.vertices), mesh.faces
    else:
        verts = _as_points(mesh)
        if faces is None:
            raise ValueError("faces required when passing raw vertices")
    hood = VertexNeighborhood(np.asarray(faces), verts.shape[-2])
    return hood.loss(verts)


# ---------------------------------------------------------------------------
# Wavefront OBJ with part groups

def save_obj(path, mesh: TriangleMesh) -> None:
    """Write vertices/faces; faces grouped as ``g part_<i>`` by vertex part."""
    part = mesh.part_index
    face_part = None if part is None else part[mesh.faces[:, 0]]
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        if face_part is None:
            for f in mesh.faces:
                fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")
        else:
            for p in np.unique(face_part):
                fh.write(f"g part_{p}\n")
                for f in mesh.faces[face_part == p]:
                    fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def load_obj(path) -> TriangleMesh:
    verts, faces, face_part = [], [], []
    current = 0
    with open(path) as fh:
        for line in fh:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "v":
                verts.append([float(x) for x in tok[1:4]])
            elif tok[0] == "g" and len(tok) > 1 and tok[1].startswith("part_"):
                current = int(tok[1][5:])
            elif tok[0] == "f":
                idx = [int(t.split("/")[0]) - 1 for t in tok[1:4]]
                faces.append(idx)
                face_part.append(current)
    verts = np.array(verts)
    faces = np.array(faces, dtype=np.int64)
    part = np.zeros(len(verts), dtype=np.int64)
    for f, p in zip(faces, face_part):
        part[f] = p
    return TriangleMesh(verts, faces, part)
