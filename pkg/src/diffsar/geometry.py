"""Triangle meshes: OBJ I/O, dome construction, subdivision, normals, voxels."""
from __future__ import annotations

import io
import os
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .autodiff import Tensor, as_tensor, cross, index, norm, sqrt, tsum, mul
from .errors import DegenerateFaceError, ParseError, TopologyError, ValidationError


@dataclass(eq=False)
class TriangleMesh:
    """Vertices in meters (z up, floor at z=0) and CCW faces (outward normals).

    ``vertices`` may be a plain array or a :class:`Tensor` when the mesh is
    the optimization variable; topology is derived from ``faces`` only.
    """

    vertices: np.ndarray | Tensor
    faces: np.ndarray

    def __post_init__(self):
        if not isinstance(self.vertices, Tensor):
            self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        nv = len(self.vertices)
        if self.faces.size:
            if self.faces.min() < 0 or self.faces.max() >= nv:
                raise ValidationError(f"face index out of range for {nv} vertices")
            f = self.faces
            bad = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
            if bad.any():
                raise ValidationError(f"face {int(np.flatnonzero(bad)[0])} repeats a vertex index")

    @property
    def verts(self) -> np.ndarray:
        """Vertex positions as a plain array."""
        v = self.vertices
        return v.data if isinstance(v, Tensor) else v

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @cached_property
    def _edge_table(self):
        f = self.faces
        directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        owner = np.tile(np.arange(len(f)), 3)
        undirected = np.sort(directed, axis=1)
        edges, inverse, counts = np.unique(undirected, axis=0, return_inverse=True, return_counts=True)
        return edges.reshape(-1, 2), inverse.reshape(-1), counts, owner

    @property
    def edges(self) -> np.ndarray:
        """Each undirected edge once, as sorted vertex-index pairs (E, 2)."""
        return self._edge_table[0]

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def euler_characteristic(self) -> int:
        return self.n_vertices - self.n_edges + self.n_faces

    def boundary_edges(self) -> np.ndarray:
        edges, _, counts, _ = self._edge_table
        return edges[counts == 1]

    def check_manifold(self, allow_boundary=False):
        counts = self._edge_table[2]
        if (counts > 2).any():
            raise TopologyError("non-manifold edge shared by more than two faces")
        if not allow_boundary and (counts == 1).any():
            raise TopologyError("open mesh: boundary edge shared by only one face")

    @cached_property
    def edge_faces(self) -> np.ndarray:
        """(E_interior, 2) face pairs across each interior edge; boundary edges skipped."""
        self.check_manifold(allow_boundary=True)
        _, inverse, counts, owner = self._edge_table
        order = np.argsort(inverse, kind="stable")
        inv_sorted = inverse[order]
        starts = np.searchsorted(inv_sorted, np.flatnonzero(counts == 2))
        return np.stack([owner[order[starts]], owner[order[starts + 1]]], axis=1)

    @cached_property
    def neighbors(self) -> list[np.ndarray]:
        e = self.edges
        both = np.concatenate([e, e[:, ::-1]])
        both = both[np.lexsort((both[:, 1], both[:, 0]))]
        splits = np.searchsorted(both[:, 0], np.arange(self.n_vertices + 1))
        return [both[splits[i]:splits[i + 1], 1] for i in range(self.n_vertices)]

    def with_vertices(self, vertices) -> "TriangleMesh":
        m = TriangleMesh.__new__(TriangleMesh)
        m.vertices = vertices if isinstance(vertices, Tensor) else np.asarray(vertices, dtype=np.float64)
        m.faces = self.faces
        # topology is shared, so reuse the cached tables
        for key in ("_edge_table", "edge_faces", "neighbors"):
            if key in self.__dict__:
                m.__dict__[key] = self.__dict__[key]
        return m

    def translated(self, offset) -> "TriangleMesh":
        return TriangleMesh(self.verts + np.asarray(offset, dtype=np.float64), self.faces)

    def surface_area(self) -> float:
        v = self.verts
        f = self.faces
        return 0.5 * float(np.linalg.norm(np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]]), axis=1).sum())

    def volume(self) -> float:
        v = self.verts
        f = self.faces
        return float(np.einsum("ij,ij->i", v[f[:, 0]], np.cross(v[f[:, 1]], v[f[:, 2]])).sum() / 6.0)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.verts.min(axis=0), self.verts.max(axis=0)


def merge(*meshes: TriangleMesh) -> TriangleMesh:
    verts, faces, offset = [], [], 0
    for m in meshes:
        verts.append(m.verts)
        faces.append(m.faces + offset)
        offset += m.n_vertices
    return TriangleMesh(np.concatenate(verts), np.concatenate(faces))


# ---------------------------------------------------------------------------
# Wavefront OBJ

def load_obj(source) -> TriangleMesh:
    """Parse ``v`` and triangular ``f`` records from an OBJ text stream (or path)."""
    if isinstance(source, (str, os.PathLike)):
        with open(source, "r", encoding="utf-8") as fh:
            return load_obj(fh)
    verts, faces = [], []
    for lineno, line in enumerate(source, start=1):
        toks = line.split("#", 1)[0].split()
        if not toks:
            continue
        if toks[0] == "v":
            if len(toks) < 4:
                raise ParseError("vertex record needs three coordinates", lineno)
            try:
                verts.append([float(t) for t in toks[1:4]])
            except ValueError:
                raise ParseError(f"bad vertex coordinate in {line.strip()!r}", lineno) from None
        elif toks[0] == "f":
            if len(toks) != 4:
                raise ParseError(f"non-triangular face with {len(toks) - 1} vertices", lineno)
            try:
                idx = [int(t.split("/")[0]) for t in toks[1:]]
            except ValueError:
                raise ParseError(f"bad face index in {line.strip()!r}", lineno) from None
            # negative indices are relative to the vertices read so far
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            faces.append(idx)
    return TriangleMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                        np.array(faces, dtype=np.int64).reshape(-1, 3))


def loads_obj(text: str) -> TriangleMesh:
    return load_obj(io.StringIO(text))


def write_obj(mesh: TriangleMesh, sink) -> None:
    if isinstance(sink, (str, os.PathLike)):
        with open(sink, "w", encoding="utf-8") as fh:
            return write_obj(mesh, fh)
    for x, y, z in mesh.verts.tolist():
        sink.write(f"v {x!r} {y!r} {z!r}\n")
    for a, b, c in (mesh.faces + 1).tolist():
        sink.write(f"f {a} {b} {c}\n")


# ---------------------------------------------------------------------------
# Constructors

def _orient_outward(verts, faces):
    """Flip faces of a star-shaped mesh so normals point away from its centroid."""
    center = verts.mean(axis=0)
    tri = verts[faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    flip = np.einsum("ij,ij->i", n, tri.mean(axis=1) - center) < 0
    faces = faces.copy()
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return faces


def make_icosahedron(radius=1.0) -> TriangleMesh:
    """Regular icosahedron with one vertex on each pole of the z axis."""
    ring_z = 1.0 / np.sqrt(5.0)
    ring_r = 2.0 / np.sqrt(5.0)
    az = np.deg2rad(np.arange(5) * 72.0)
    upper = np.stack([ring_r * np.cos(az), ring_r * np.sin(az), np.full(5, ring_z)], axis=1)
    lower = np.stack([ring_r * np.cos(az + np.pi / 5), ring_r * np.sin(az + np.pi / 5), np.full(5, -ring_z)], axis=1)
    verts = np.concatenate([[[0.0, 0.0, 1.0]], upper, lower, [[0.0, 0.0, -1.0]]]) * radius
    faces = []
    for i in range(5):
        j = (i + 1) % 5
        faces.append([0, 1 + i, 1 + j])
        faces.append([1 + i, 6 + i, 1 + j])
        faces.append([1 + j, 6 + i, 6 + j])
        faces.append([11, 6 + j, 6 + i])
    faces = np.array(faces)
    return TriangleMesh(verts, _orient_outward(verts, faces))


def make_dome(radius=2.0, center_height=None) -> TriangleMesh:
    """Level-1 icosphere (42 vertices, 80 faces) resting on the floor.

    With ``center_height`` given, the sphere center is placed at that height
    instead of grounding the lowest vertex.
    """
    if not radius > 0:
        raise ValidationError(f"dome radius must be positive, got {radius}")
    sub = make_icosphere(1, radius)
    v = sub.verts.copy()
    if center_height is None:
        v[:, 2] -= v[:, 2].min()
    else:
        v[:, 2] += center_height
    return TriangleMesh(v, sub.faces)


def make_icosphere(level=1, radius=1.0, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Icosahedron subdivided ``level`` times with every level projected to the sphere."""
    mesh = make_icosahedron(1.0)
    for _ in range(level):
        mesh = subdivide_midpoint(mesh)
        v = mesh.verts
        mesh = TriangleMesh(v / np.linalg.norm(v, axis=1, keepdims=True), mesh.faces)
    return TriangleMesh(mesh.verts * radius + np.asarray(center, dtype=np.float64), mesh.faces)


def make_box(size=(1.0, 1.0, 1.0), center=(0.0, 0.0), z0=0.0) -> TriangleMesh:
    """Axis-aligned cuboid, ``size`` = (x, y, z) extents, base at height ``z0``."""
    sx, sy, sz = size
    cx, cy = center
    corners = np.array([[i, j, k] for k in (0, 1) for j in (0, 1) for i in (0, 1)], dtype=np.float64)
    verts = corners * [sx, sy, sz] + [cx - sx / 2, cy - sy / 2, z0]
    quads = [(0, 2, 3, 1), (4, 5, 7, 6), (0, 1, 5, 4), (2, 6, 7, 3), (0, 4, 6, 2), (1, 3, 7, 5)]
    faces = np.array([t for a, b, c, d in quads for t in ((a, b, c), (a, c, d))])
    return TriangleMesh(verts, _orient_outward(verts, faces))


def make_plate(size=(4.0, 4.0), cells=(40, 40), center=(0.0, 0.0), z=0.0) -> TriangleMesh:
    """Finely tessellated horizontal plate with upward normals (an open mesh)."""
    nx, ny = cells
    xs = np.linspace(-size[0] / 2, size[0] / 2, nx + 1) + center[0]
    ys = np.linspace(-size[1] / 2, size[1] / 2, ny + 1) + center[1]
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    verts = np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, float(z))], axis=1)
    vid = np.arange(gx.size).reshape(nx + 1, ny + 1)
    a, b = vid[:-1, :-1].ravel(), vid[1:, :-1].ravel()
    c, d = vid[1:, 1:].ravel(), vid[:-1, 1:].ravel()
    faces = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
    return TriangleMesh(verts, faces)


def subdivide_midpoint(mesh: TriangleMesh) -> TriangleMesh:
    """Split every face into four by inserting edge midpoints (no reprojection)."""
    mesh.check_manifold()
    edges, inverse, _, _ = mesh._edge_table
    v = mesh.verts
    nv, nf = mesh.n_vertices, mesh.n_faces
    mids = 0.5 * (v[edges[:, 0]] + v[edges[:, 1]])
    # inverse is ordered [edge01 of all faces, edge12 ..., edge20 ...]
    e01, e12, e20 = (inverse[k * nf:(k + 1) * nf] + nv for k in range(3))
    a, b, c = mesh.faces.T
    faces = np.concatenate([
        np.stack([a, e01, e20], 1),
        np.stack([e01, b, e12], 1),
        np.stack([e20, e12, c], 1),
        np.stack([e01, e12, e20], 1),
    ])
    return TriangleMesh(np.concatenate([v, mids]), faces)


# ---------------------------------------------------------------------------
# Normals

def face_normals_tensor(vertices, faces, eps=0.0) -> Tensor:
    """Differentiable unit face normals (F, 3); ``eps`` guards collapsed faces."""
    v = as_tensor(vertices)
    f = np.asarray(faces)
    v0, v1, v2 = index(v, f[:, 0]), index(v, f[:, 1]), index(v, f[:, 2])
    n = cross(v1 - v0, v2 - v0)
    length = sqrt(tsum(mul(n, n), axis=1, keepdims=True) + eps * eps)
    return n / length


def face_normals(mesh: TriangleMesh) -> np.ndarray:
    v = mesh.verts
    f = mesh.faces
    n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    length = np.linalg.norm(n, axis=1)
    scale = np.maximum(np.abs(v).max(), 1.0) if len(v) else 1.0
    bad = length <= 1e-14 * scale * scale
    if bad.any():
        raise DegenerateFaceError(int(np.flatnonzero(bad)[0]))
    return n / length[:, None]


# ---------------------------------------------------------------------------
# Voxels

@dataclass(eq=False)
class VoxelGrid:
    occupancy: np.ndarray
    origin: np.ndarray
    spacing: float

    def __post_init__(self):
        occ = np.asarray(self.occupancy)
        if occ.dtype != bool:
            raise ValidationError("voxel occupancy must be boolean")
        if occ.ndim != 3:
            raise ValidationError("voxel occupancy must be 3-D")
        self.occupancy = occ
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.spacing = float(self.spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.occupancy.shape)

    def count(self) -> int:
        return int(self.occupancy.sum())


@dataclass(frozen=True)
class GridSpec:
    """Voxel lattice: ``origin`` is the minimum corner, centers at origin + (i + 1/2) spacing."""

    origin: tuple
    spacing: float
    dims: tuple

    def centers(self, axis: int) -> np.ndarray:
        return self.origin[axis] + (np.arange(self.dims[axis]) + 0.5) * self.spacing

    def translated(self, offset) -> "GridSpec":
        return GridSpec(tuple(np.add(self.origin, offset)), self.spacing, self.dims)


def default_grid(*meshes: TriangleMesh, resolution=64, pad=0.1) -> GridSpec:
    """Cubic ``resolution``^3 lattice over the union bounding box padded by ``pad``."""
    lo = np.min([m.verts.min(axis=0) for m in meshes], axis=0)
    hi = np.max([m.verts.max(axis=0) for m in meshes], axis=0)
    center = 0.5 * (lo + hi)
    extent = float((hi - lo).max()) * (1.0 + 2.0 * pad)
    spacing = extent / resolution
    origin = center - 0.5 * extent
    return GridSpec(tuple(float(o) for o in origin), spacing, (resolution,) * 3)


def voxelize(mesh: TriangleMesh, grid: GridSpec, seed=0, max_retries=16) -> VoxelGrid:
    """Inside test per voxel center by parity of +x ray crossings.

    Rays that graze an edge or vertex exactly are re-cast from an origin
    jittered by 1e-7 * spacing (seeded, so results are deterministic).
    """
    mesh.check_manifold()
    nx, ny, nz = grid.dims
    xs, ys, zs = (grid.centers(a) for a in range(3))
    gy, gz = np.meshgrid(ys, zs, indexing="ij")
    ry, rz = gy.ravel().copy(), gz.ravel().copy()

    tri = mesh.verts[mesh.faces]
    y0, z0 = tri[:, 0, 1], tri[:, 0, 2]
    e1y, e1z = tri[:, 1, 1] - y0, tri[:, 1, 2] - z0
    e2y, e2z = tri[:, 2, 1] - y0, tri[:, 2, 2] - z0
    det = e1y * e2z - e2y * e1z
    scale = max(float(np.abs(tri).max()), 1.0) if len(tri) else 1.0
    usable = np.abs(det) > 1e-14 * scale * scale
    y0, z0, e1y, e1z, e2y, e2z, det = (a[usable] for a in (y0, z0, e1y, e1z, e2y, e2z, det))
    x0 = tri[usable, 0, 0]
    e1x = tri[usable, 1, 0] - x0
    e2x = tri[usable, 2, 0] - x0

    def cast(py, pz):
        dy = py[:, None] - y0
        dz = pz[:, None] - z0
        b1 = (dy * e2z - e2y * dz) / det
        b2 = (e1y * dz - dy * e1z) / det
        b0 = 1.0 - b1 - b2
        bmin = np.minimum(np.minimum(b0, b1), b2)
        tol = 1e-12
        hit = bmin > tol
        graze = (bmin >= -tol) & ~hit
        xhit = np.where(hit, x0 + b1 * e1x + b2 * e2x, -np.inf)
        return xhit, graze.any(axis=1)

    rng = np.random.default_rng(seed)
    jitter = 1e-7 * grid.spacing
    occupancy = np.zeros((nx, ny, nz), dtype=bool)
    chunk = max(1, 2_000_000 // max(len(x0), 1))
    for start in range(0, len(ry), chunk):
        sl = slice(start, start + chunk)
        py, pz = ry[sl].copy(), rz[sl].copy()
        xhit, grazed = cast(py, pz)
        for _ in range(max_retries):
            if not grazed.any():
                break
            rows = np.flatnonzero(grazed)
            py[rows] += rng.uniform(-jitter, jitter, len(rows))
            pz[rows] += rng.uniform(-jitter, jitter, len(rows))
            xr, gr = cast(py[rows], pz[rows])
            xhit[rows] = xr
            grazed[rows] = gr
        xhit.sort(axis=1)
        counts = np.empty((len(xhit), nx), dtype=np.int64)
        for r in range(len(xhit)):
            counts[r] = xhit.shape[1] - np.searchsorted(xhit[r], xs, side="right")
        occ = (counts % 2 == 1).T  # (nx, rows)
        idx = np.arange(start, start + len(xhit))
        occupancy[:, idx // nz, idx % nz] = occ
    return VoxelGrid(occupancy, np.array(grid.origin), grid.spacing)


def write_vox(grid: VoxelGrid, sink) -> None:
    """Header line ``VOX nx ny nz ox oy oz spacing`` then one byte per voxel, x fastest."""
    if isinstance(sink, (str, os.PathLike)):
        with open(sink, "wb") as fh:
            return write_vox(grid, fh)
    nx, ny, nz = grid.dims
    ox, oy, oz = grid.origin.tolist()
    sink.write(f"VOX {nx} {ny} {nz} {ox!r} {oy!r} {oz!r} {grid.spacing!r}\n".encode("ascii"))
    sink.write(grid.occupancy.astype(np.uint8).ravel(order="F").tobytes())


def read_vox(source) -> VoxelGrid:
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            return read_vox(fh)
    header = source.readline().decode("ascii").split()
    if len(header) != 8 or header[0] != "VOX":
        raise ParseError("bad VOX header", 1)
    nx, ny, nz = (int(t) for t in header[1:4])
    origin = [float(t) for t in header[4:7]]
    spacing = float(header[7])
    raw = np.frombuffer(source.read(nx * ny * nz), dtype=np.uint8)
    if raw.size != nx * ny * nz:
        raise ParseError("truncated VOX payload")
    occ = raw.reshape((nx, ny, nz), order="F").astype(bool)
    return VoxelGrid(occ, origin, spacing)
