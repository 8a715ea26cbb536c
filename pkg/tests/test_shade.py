import io

import numpy as np
import pytest
from scipy import stats

from diffsar.autodiff import Tensor, check_gradient
from diffsar.errors import ContractError, ParseError, ShapeError, ValidationError
from diffsar.geometry import TriangleMesh, make_box, make_dome, merge
from diffsar.raster import RasterConfig
from diffsar.sarcam import AspectPose, SceneExtent
from diffsar.shade import (BRANCHES, FeatureMaps, NoiseConfig, SarImage, ShaderParams, analytic_shader,
                           augment, choose_branch, face_dot, init_shader_weights, inverse_pedf,
                           learned_shader_forward, load_shader_weights, pedf_remap, pedf_threshold,
                           read_png, read_sarf, render_features, save_shader_weights, shader_net,
                           visible_faces, write_png, write_sarf)


def plate_facing(normal, half=1.0, center=(0.0, 0.0, 0.5)):
    """Square plate with the given outward unit normal."""
    n = np.asarray(normal, float)
    n /= np.linalg.norm(n)
    u = np.cross(n, [0.0, 0.0, 1.0]) if abs(n[2]) < 0.99 else np.array([1.0, 0.0, 0.0])
    u /= np.linalg.norm(u)
    v = np.cross(n, u)
    c = np.asarray(center)
    verts = np.array([c - half * u - half * v, c + half * u - half * v,
                      c + half * u + half * v, c - half * u + half * v])
    faces = np.array([[0, 1, 2], [0, 2, 3]])
    if np.cross(verts[1] - verts[0], verts[2] - verts[0]) @ n < 0:
        faces = faces[:, ::-1]
    return TriangleMesh(verts, faces)


def tilted(pose, degrees):
    """Unit normal rotated ``degrees`` from the direction back toward the sensor."""
    look = -pose.boresight
    axis = np.cross(look, [0, 0, 1.0])
    axis /= np.linalg.norm(axis)
    t = np.deg2rad(degrees)
    return look * np.cos(t) + np.cross(axis, look) * np.sin(t)


CFG = RasterConfig(32, 32, sigma=1e-4)
EXT = SceneExtent.for_image(32, 32, 0.15)


def test_plate_head_on_dot_is_one():
    # a plate square to the line of sight has zero extent in ground range,
    # so the per-face value is checked directly
    pose = AspectPose(30.0, 40.0)
    mesh = plate_facing(-pose.boresight)
    assert np.allclose(face_dot(mesh.verts, mesh.faces, pose).data, 1.0, atol=1e-12)


def test_plate_edge_on_dot_is_zero():
    pose = AspectPose(30.0, 40.0)
    side = np.cross(pose.boresight, [0, 0, 1.0])
    mesh = plate_facing(side)
    assert np.allclose(face_dot(mesh.verts, mesh.faces, pose).data, 0.0, atol=1e-12)


def test_plate_tilted_sixty_degrees():
    pose = AspectPose(0.0, 30.0)
    mesh = plate_facing(tilted(pose, 60.0), half=1.5)
    f = render_features(mesh, pose, CFG, EXT)
    inner = f.silhouette.data > 1 - 1e-6
    assert inner.any()
    assert np.allclose(f.normal_dot.data[inner], 0.5, atol=1e-6)


def test_convex_alpha_matches_lit_coverage():
    pose = AspectPose(45.0, 30.0)
    mesh = make_dome(1.5)
    f = render_features(mesh, pose, RasterConfig(48, 48, sigma=0.0), SceneExtent.for_image(48, 48, 0.1))
    assert visible_faces(mesh, pose, RasterConfig(48, 48), SceneExtent.for_image(48, 48, 0.1))[
        face_dot(mesh.verts, mesh.faces, pose).data > 0].all()
    expect = f.silhouette.data * np.maximum(f.normal_dot.data, 0.0)
    assert np.allclose(f.alpha.data, expect, atol=1e-9)


def _ray_hits(origin, direction, verts, faces):
    """Moller-Trumbore: does the ray hit any triangle at t > 1e-6?"""
    for a, b, c in verts[faces]:
        e1, e2 = b - a, c - a
        p = np.cross(direction, e2)
        det = e1 @ p
        if abs(det) < 1e-12:
            continue
        s = origin - a
        u = (s @ p) / det
        q = np.cross(s, e1)
        v = (direction @ q) / det
        t = (e2 @ q) / det
        if u >= 0 and v >= 0 and u + v <= 1 and t > 1e-6:
            return True
    return False


def test_wall_shadows_low_box():
    pose = AspectPose(0.0, 20.0)
    box = make_box((1.0, 1.0, 0.4), center=(-0.5, 0.0))
    wall = make_box((0.2, 3.0, 2.0), center=(1.0, 0.0))
    scene = merge(box, wall)
    cfg, ext = RasterConfig(64, 64, sigma=0.0), SceneExtent.for_image(64, 64, 0.1)
    vis = visible_faces(scene, pose, cfg, ext)
    to_sensor = -pose.boresight
    lit = face_dot(scene.verts, scene.faces, pose).data > 0
    for fi in range(box.n_faces):
        if not lit[fi]:
            continue
        c = scene.verts[scene.faces[fi]].mean(0)
        assert _ray_hits(c, to_sensor, wall.verts, wall.faces)
        assert not vis[fi]
    # pixels where only the box projects carry no alpha
    f_scene = render_features(scene, pose, cfg, ext)
    f_wall = render_features(wall, pose, cfg, ext)
    box_only = (f_scene.silhouette.data > 0.5) & (f_wall.silhouette.data < 0.5)
    assert box_only.any()
    assert np.all(f_scene.alpha.data[box_only] < 1e-6)


def test_back_facing_contributes_nothing():
    pose = AspectPose(0.0, 45.0)
    mesh = plate_facing(tilted(pose, 150.0), half=1.5)
    f = render_features(mesh, pose, CFG, EXT)
    assert f.silhouette.data.max() > 0.99
    assert f.normal_dot.data.min() < -0.85
    assert np.all(f.alpha.data == 0)


def test_empty_mesh_zero_channels():
    empty = TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=int))
    f = render_features(empty, AspectPose(0, 30), CFG, EXT)
    assert not f.numpy().any()


def test_cuboid_layover():
    spacing, el, h = 0.075, 30.0, 1.0
    cfg, ext = RasterConfig(96, 96, sigma=0.0), SceneExtent.for_image(96, 96, spacing)
    pose = AspectPose(0.0, el)
    tall = render_features(make_box((2.0, 2.0, h)), pose, cfg, ext).silhouette.data
    flat = render_features(make_box((2.0, 2.0, 1e-3)), pose, cfg, ext).silhouette.data
    # near range is at the bottom of the image
    near_tall = np.flatnonzero(tall.any(1)).max()
    near_flat = np.flatnonzero(flat.any(1)).max()
    shift = (near_tall - near_flat) * spacing
    assert abs(shift - h * np.tan(np.deg2rad(el))) <= 1.5 * spacing


def test_features_invariants_and_gradient():
    pose = AspectPose(40.0, 35.0)
    base = make_dome(1.0)
    v0 = base.verts + np.random.default_rng(0).normal(scale=0.02, size=base.verts.shape)
    cfg, ext = RasterConfig(20, 20, sigma=1e-3), SceneExtent.for_image(20, 20, 0.15)
    f = render_features(base.with_vertices(v0), pose, cfg, ext)
    arr = f.numpy()
    assert np.all(np.isfinite(arr))
    assert np.all(f.alpha.data <= f.silhouette.data + 1e-6)

    def total(v):
        g = render_features(base.with_vertices(v), pose, cfg, ext)
        return g.silhouette.sum() + g.normal_dot.sum() + g.alpha.sum()

    assert check_gradient(total, v0, epsilon=1e-6) <= 1e-2


def _feats(s, d, a):
    return FeatureMaps(Tensor(np.asarray(s, float)), Tensor(np.asarray(d, float)), Tensor(np.asarray(a, float)))


def test_analytic_background_only():
    f = _feats(np.zeros((4, 4)), np.zeros((4, 4)), np.zeros((4, 4)))
    out = analytic_shader(f, ShaderParams(background=0.12)).array
    assert np.allclose(out, 0.12)


def test_unlit_object_darker_than_clutter():
    s = np.array([[0.0, 1.0, 1.0]])
    d = np.array([[0.0, -0.5, 0.8]])
    a = np.array([[0.0, 0.0, 0.8]])
    out = analytic_shader(_feats(s, d, a), ShaderParams(diffuse=1.0, specular=0.0, background=0.1)).array
    assert np.allclose(out, [[0.1, 0.0, 0.64]])


def test_analytic_diffuse_only():
    f = _feats(np.ones((2, 2)), np.ones((2, 2)), np.ones((2, 2)))
    assert np.allclose(analytic_shader(f, ShaderParams(diffuse=0.8, specular=0.0)).array, 0.8)


def test_specular_exponent_concentrates_energy():
    d = np.linspace(0, 1, 101).reshape(1, -1)
    f = _feats(np.ones_like(d), d, np.ones_like(d))
    fractions = []
    for p in range(1, 17):
        e = analytic_shader(f, ShaderParams(diffuse=0.0, specular=1.0, exponent=p)).array ** 2
        fractions.append(e[d > 0.9].sum() / e.sum())
    assert all(b > a for a, b in zip(fractions, fractions[1:]))


def test_shader_params_validation():
    with pytest.raises(ValidationError):
        ShaderParams(exponent=0.5)
    with pytest.raises(ValidationError):
        NoiseConfig(p_add=0.5)
    with pytest.raises(ValidationError):
        NoiseConfig(multiplicative_halfwidth=1.0)


def test_learned_zero_weights_constant_bias():
    w = init_shader_weights("zero")
    w["b3"][:] = 0.25
    rng = np.random.default_rng(0)
    f = _feats(rng.uniform(size=(6, 7)), rng.uniform(-1, 1, (6, 7)), rng.uniform(size=(6, 7)))
    assert np.allclose(learned_shader_forward(f, w).array, 0.25)


def test_learned_identity_matches_analytic():
    rng = np.random.default_rng(1)
    s = rng.uniform(size=(9, 9))
    a = s * rng.uniform(size=(9, 9))
    f = _feats(s, rng.uniform(-1, 1, (9, 9)), a)
    out = learned_shader_forward(f, init_shader_weights("identity")).array
    ref = analytic_shader(f, ShaderParams(diffuse=1.0, specular=0.0, background=0.0)).array
    assert np.max(np.abs(out - ref)) <= 1e-6


def test_learned_shader_shape_checks():
    with pytest.raises(ShapeError):
        shader_net(np.zeros((1, 2, 4, 4)), init_shader_weights("zero"))
    w = init_shader_weights("zero")
    w["w1"] = np.zeros((16, 3, 3, 3))
    with pytest.raises(ShapeError):
        shader_net(np.zeros((1, 3, 4, 4)), w)


def test_shader_weights_roundtrip(tmp_path):
    w = init_shader_weights("random", seed=2)
    save_shader_weights(w, tmp_path / "w.npz")
    back = load_shader_weights(tmp_path / "w.npz")
    assert all(np.array_equal(w[k], back[k]) for k in w)


def test_augment_zero_noise_is_identity():
    img = np.random.default_rng(3).uniform(size=(8, 8))
    cfg = NoiseConfig(additive_std=0.0, multiplicative_halfwidth=0.0)
    for branch in BRANCHES:
        assert np.array_equal(augment(img, cfg, seed=1, branch=branch).array, img)


def test_augment_additive_rayleigh():
    cfg = NoiseConfig(additive_std=0.1, reference_magnitude=1.0)
    out = augment(np.zeros((100, 1000)), cfg, seed=7, branch="additive").array.ravel()
    scale = 0.1 / np.sqrt(2)
    assert stats.kstest(out, "rayleigh", args=(0, scale)).pvalue > 0.01


def test_branch_frequencies():
    rng = np.random.default_rng(11)
    draws = [choose_branch(NoiseConfig(), rng) for _ in range(10_000)]
    for branch, p in zip(BRANCHES, (0.25, 0.25, 0.5)):
        assert abs(draws.count(branch) / 10_000 - p) <= 0.02


def test_augment_rejects_remapped():
    with pytest.raises(ContractError):
        augment(SarImage(np.zeros((2, 2)), remapped=True))


def test_pedf_zero_and_monotone():
    rng = np.random.default_rng(5)
    x = np.concatenate([[0.0], rng.exponential(size=500)])
    r = pedf_remap(x, threshold=0.7).array
    assert r[0] == 0.0
    a, b = rng.exponential(size=(2, 1000)) * 3
    ra, rb = pedf_remap(a, 0.7).array, pedf_remap(b, 0.7).array
    assert np.all((ra <= rb) | (a > b))
    assert np.all((r >= 0) & (r <= 1))


def test_pedf_round_trip():
    T, D = 0.5, 30.0
    x = np.linspace(0, T * 10 ** (D / 20) * 0.999, 400)
    r = pedf_remap(x, T, D)
    back = inverse_pedf(r).array
    assert np.max(np.abs(back - x)) <= 1e-9 * max(1.0, x.max())


def test_pedf_continuity_at_threshold():
    T = 0.4
    eps = 1e-7
    lo, hi = pedf_remap(np.array([T - eps, T, T + eps]), T).array[[0, 1]], pedf_remap(np.array([T + eps]), T).array
    assert abs((hi[0] - lo[1]) - (lo[1] - lo[0])) < 1e-9


def test_pedf_contract_errors():
    with pytest.raises(ContractError):
        pedf_remap(np.array([-1.0, 2.0]))
    with pytest.raises(ContractError):
        pedf_remap(SarImage(np.zeros((2, 2)), remapped=True))
    assert pedf_threshold(np.zeros((3, 3))) == 1.0


def test_sarf_roundtrip_and_header():
    img = np.random.default_rng(8).uniform(size=(3, 5))
    buf = io.BytesIO()
    write_sarf(img, buf)
    assert buf.getvalue().startswith(b"SARF 3 5\n")
    buf.seek(0)
    assert np.array_equal(read_sarf(buf), img)
    with pytest.raises(ParseError):
        read_sarf(io.BytesIO(b"FRAS 3 5\n"))


def test_png_roundtrip(tmp_path):
    vals = np.linspace(0, 1, 256).reshape(16, 16)
    write_png(vals, tmp_path / "a.png")
    assert np.max(np.abs(read_png(tmp_path / "a.png") - vals)) <= 0.5 / 255 + 1e-12
