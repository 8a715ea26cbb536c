import io
import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from diffsar.errors import DegenerateFaceError, ParseError, TopologyError, ValidationError
from diffsar.geometry import (GridSpec, TriangleMesh, VoxelGrid, default_grid, face_normals,
                              load_obj, loads_obj, make_box, make_dome, make_icosahedron,
                              make_icosphere, make_plate, read_vox, subdivide_midpoint, voxelize,
                              write_obj, write_vox)

CUBE_OBJ = """\
v 0 0 0
v 1 0 0
v 1 1 0
v 0 1 0
v 0 0 1
v 1 0 1
v 1 1 1
v 0 1 1
f 1 3 2
f 1 4 3
f 5 6 7
f 5 7 8
f 1 2 6
f 1 6 5
f 2 3 7
f 2 7 6
f 3 4 8
f 3 8 7
f 4 1 5
f 4 5 8
"""


def brute_force_edges(faces):
    edges = set()
    for f in faces:
        for a, b in itertools.combinations(f, 2):
            edges.add((min(a, b), max(a, b)))
    return edges


# --- load_obj -------------------------------------------------------------

def test_smallest_obj():
    m = loads_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
    assert m.n_vertices == 3 and m.n_faces == 1
    assert m.faces.tolist() == [[0, 1, 2]]


def test_quad_face_rejected():
    with pytest.raises(ParseError, match="non-triangular face"):
        loads_obj("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")


def test_parse_error_reports_line():
    with pytest.raises(ParseError, match="line 2"):
        loads_obj("v 0 0 0\nv 1 zero 0\n")


def test_face_index_out_of_range():
    with pytest.raises(ValidationError):
        loads_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 4\n")


def test_cube_euler_characteristic_brute_force():
    m = loads_obj(CUBE_OBJ)
    n_edges = len(brute_force_edges(m.faces.tolist()))
    assert n_edges == 18
    assert m.n_edges == n_edges
    assert m.n_vertices - n_edges + m.n_faces == 2


def test_obj_slash_records_and_comments():
    m = loads_obj("# tri\nv 0 0 0\nv 1 0 0\nv 0 1 0\nvn 0 0 1\nf 1//1 2//1 3//1  # end\n")
    assert m.faces.tolist() == [[0, 1, 2]]


def test_obj_roundtrip_exact():
    m = make_dome(1.3)
    buf = io.StringIO()
    write_obj(m, buf)
    back = loads_obj(buf.getvalue())
    assert np.array_equal(back.verts, m.verts)
    assert np.array_equal(back.faces, m.faces)


def test_load_obj_from_path(tmp_path):
    p = tmp_path / "cube.obj"
    p.write_text(CUBE_OBJ)
    assert load_obj(p).n_faces == 12


# --- dome / subdivision -----------------------------------------------------

def test_dome_counts():
    m = make_dome(2.0)
    assert (m.n_vertices, m.n_faces, m.n_edges) == (42, 80, 120)
    assert m.euler_characteristic() == 2


def test_dome_vertices_on_sphere():
    m = make_dome(1.0)
    center = np.array([0.0, 0.0, -m.verts[:, 2].min() * 0 + 1.0])
    # the grounded sphere's center sits one radius above the floor
    r = np.linalg.norm(m.verts - center, axis=1)
    assert np.all(r <= 1.0 + 1e-9)
    assert np.allclose(r, 1.0, atol=1e-9)


def test_dome_grounded():
    assert make_dome(2.0).verts[:, 2].min() == 0.0


def test_dome_center_height():
    m = make_dome(1.5, center_height=3.0)
    assert np.isclose(m.verts[:, 2].max(), 4.5) and np.isclose(m.verts[:, 2].min(), 1.5)


def test_dome_bad_radius():
    with pytest.raises(ValidationError):
        make_dome(0.0)


def test_dome_outward_normals():
    m = make_dome(2.0)
    n = face_normals(m)
    c = m.verts[m.faces].mean(axis=1) - np.array([0, 0, 2.0])
    assert np.all(np.einsum("ij,ij->i", n, c) > 0)


def test_subdivide_dome():
    s = subdivide_midpoint(make_dome(2.0))
    assert (s.n_vertices, s.n_faces) == (162, 320)
    assert s.euler_characteristic() == 2


def test_subdivide_single_triangle_rejected():
    tri = TriangleMesh(np.eye(3), [[0, 1, 2]])
    with pytest.raises(TopologyError):
        subdivide_midpoint(tri)


def test_subdivide_cube_counts():
    m = loads_obj(CUBE_OBJ)
    s = subdivide_midpoint(m)
    assert s.n_vertices == m.n_vertices + len(brute_force_edges(m.faces.tolist())) == 26
    assert s.n_faces == 4 * m.n_faces == 48


def test_subdivision_midpoints_and_area():
    m = make_dome(2.0)
    s = subdivide_midpoint(m)
    mids = 0.5 * (m.verts[m.edges[:, 0]] + m.verts[m.edges[:, 1]])
    assert np.array_equal(s.verts[:42], m.verts)
    assert np.allclose(s.verts[42:], mids, atol=0)
    assert np.isclose(s.surface_area(), m.surface_area(), rtol=1e-12)
    assert np.isclose(s.volume(), m.volume(), rtol=1e-12)


def test_icosahedron_is_regular():
    m = make_icosahedron(1.0)
    lengths = np.linalg.norm(m.verts[m.edges[:, 0]] - m.verts[m.edges[:, 1]], axis=1)
    assert np.ptp(lengths) < 1e-12


# --- normals ----------------------------------------------------------------

def test_normal_ccw_and_reversed():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=float)
    assert np.allclose(face_normals(TriangleMesh(v, [[0, 1, 2]])), [[0, 0, 1]])
    assert np.allclose(face_normals(TriangleMesh(v, [[0, 2, 1]])), [[0, 0, -1]])


def test_normal_degenerate_face_named():
    v = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0]], dtype=float)
    with pytest.raises(DegenerateFaceError, match="face 1"):
        face_normals(TriangleMesh(v, [[0, 1, 3], [0, 1, 2]]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=9, max_size=9))
def test_normal_orthogonal_to_edges(coords):
    v = np.array(coords).reshape(3, 3)
    e1, e2 = v[1] - v[0], v[2] - v[0]
    area2 = np.linalg.norm(np.cross(e1, e2))
    if area2 < 1e-3 * max(np.linalg.norm(e1) * np.linalg.norm(e2), 1e-12) or area2 < 1e-6:
        return
    n = face_normals(TriangleMesh(v, [[0, 1, 2]]))[0]
    assert abs(np.linalg.norm(n) - 1) < 1e-9
    assert abs(n @ e1) < 1e-9 * max(1.0, np.linalg.norm(e1))
    assert abs(n @ e2) < 1e-9 * max(1.0, np.linalg.norm(e2))


# --- voxelize ---------------------------------------------------------------

def test_voxelize_grid_inside_cube():
    cube = loads_obj(CUBE_OBJ)
    grid = GridSpec((0.1, 0.1, 0.1), 0.1, (8, 8, 8))
    assert voxelize(cube, grid).occupancy.all()


def test_voxelize_grid_outside():
    cube = loads_obj(CUBE_OBJ)
    grid = GridSpec((2.0, 2.0, 2.0), 0.1, (8, 8, 8))
    assert not voxelize(cube, grid).occupancy.any()


def test_voxelize_sphere_volume():
    r = 1.0
    sphere = make_icosphere(4, r)
    grid = GridSpec((-1.2, -1.2, -1.2), 2.4 / 60, (60, 60, 60))
    vox = voxelize(sphere, grid)
    vol = vox.count() * grid.spacing ** 3
    assert abs(vol - 4 / 3 * np.pi * r ** 3) / (4 / 3 * np.pi * r ** 3) < 0.03


def test_voxelize_exact_grazing_hits():
    # voxel centers at 0.5, 1.5 ... land exactly on the cube's edges and diagonals
    cube = TriangleMesh(loads_obj(CUBE_OBJ).verts * 2.0, loads_obj(CUBE_OBJ).faces)
    grid = GridSpec((-0.5, -0.5, -0.5), 0.5, (6, 6, 6))
    a = voxelize(cube, grid, seed=1)
    b = voxelize(cube, grid, seed=1)
    assert np.array_equal(a.occupancy, b.occupancy)
    c = grid.centers(0)
    inside = (c > 0) & (c < 2)
    expected = inside[:, None, None] & inside[None, :, None] & inside[None, None, :]
    assert np.array_equal(a.occupancy, expected)


def test_voxelize_open_mesh_rejected():
    with pytest.raises(TopologyError):
        voxelize(make_plate((1, 1), (2, 2)), GridSpec((0, 0, 0), 0.1, (4, 4, 4)))


def test_voxelize_invariant_to_face_order_and_rotation():
    m = make_box((1.0, 2.0, 0.7), center=(0.1, -0.2))
    grid = default_grid(m, resolution=24)
    base = voxelize(m, grid).occupancy
    rng = np.random.default_rng(3)
    perm = rng.permutation(m.n_faces)
    faces = np.roll(m.faces[perm], 1, axis=1)
    assert np.array_equal(voxelize(TriangleMesh(m.verts, faces), grid).occupancy, base)


def test_voxelize_translation_invariance():
    m = make_dome(1.0)
    grid = default_grid(m, resolution=20)
    t = np.array([0.37, -1.1, 0.25])
    a = voxelize(m, grid).occupancy
    b = voxelize(m.translated(t), grid.translated(t)).occupancy
    assert np.array_equal(a, b)


def test_voxel_grid_invariants():
    with pytest.raises(ValidationError):
        VoxelGrid(np.zeros((2, 2, 2)), (0, 0, 0), 1.0)
    g = VoxelGrid(np.zeros((2, 3, 4), dtype=bool), (0, 0, 0), 1.0)
    assert g.dims == (2, 3, 4)


def test_vox_roundtrip_x_fastest():
    occ = np.zeros((3, 2, 2), dtype=bool)
    occ[1, 0, 0] = True
    occ[0, 1, 1] = True
    g = VoxelGrid(occ, (0.5, -1.0, 2.0), 0.25)
    buf = io.BytesIO()
    write_vox(g, buf)
    raw = buf.getvalue()
    header, payload = raw.split(b"\n", 1)
    assert header.split()[:4] == [b"VOX", b"3", b"2", b"2"]
    # x varies fastest: voxel (1,0,0) is byte 1, voxel (0,1,1) is byte 0 + 3*1 + 6*1
    assert payload[1] == 1 and payload[9] == 1 and sum(payload) == 2
    back = read_vox(io.BytesIO(raw))
    assert np.array_equal(back.occupancy, occ)
    assert np.allclose(back.origin, g.origin) and back.spacing == g.spacing


def test_with_vertices_shares_topology():
    m = make_dome(1.0)
    _ = m.edges, m.edge_faces, m.neighbors
    m2 = m.with_vertices(m.verts * 2)
    assert m2.edges is m.edges and m2.edge_faces is m.edge_faces
