import numpy as np
import pytest

from diffsar.autodiff import check_gradient
from diffsar.errors import ValidationError
from diffsar.raster import (RasterConfig, coverage, depth_buffer, pixel_centers, rasterize,
                            soft_blend, soft_silhouette)


def square(z=0.5, half=0.5, cx=0.0, cy=0.0):
    v = np.array([[cx - half, cy - half, z], [cx + half, cy - half, z],
                  [cx + half, cy + half, z], [cx - half, cy + half, z]])
    return v, np.array([[0, 1, 2], [0, 2, 3]])


def test_config_validation():
    for kw in ({"sigma": -1.0}, {"tau": 0.0}, {"faces_per_pixel": 0}):
        with pytest.raises(ValidationError):
            RasterConfig(**kw)


def test_large_triangle_covers_every_pixel():
    v = np.array([[-5.0, -5.0, 0.5], [5.0, -5.0, 0.5], [0.0, 5.0, 0.5]])
    fr = rasterize(v, [[0, 1, 2]], RasterConfig(8, 8, sigma=0.0))
    idx = fr.face_indices(1)[..., 0]
    assert np.all(idx == 0)
    assert fr.inside.all() and np.all(fr.signed_distance() > 0)


def test_empty_region_has_no_candidates():
    v = np.array([[-1.0, 0.2, 0.5], [-0.2, 1.0, 0.5], [-1.0, 1.0, 0.5]])
    fr = rasterize(v, [[0, 1, 2]], RasterConfig(16, 16, sigma=1e-4))
    idx = fr.face_indices(2)
    assert np.all(idx[8:, 8:] == -1)
    assert (idx[..., 0] >= 0).any()


def test_centroid_barycentrics():
    xs, ys = pixel_centers(4, 4)
    cx, cy = xs[2], ys[1]
    v = np.array([[cx - 0.5, cy - 0.3, 0.5], [cx + 0.5, cy - 0.3, 0.5], [cx, cy + 0.6, 0.5]])
    fr = rasterize(v, [[0, 1, 2]], RasterConfig(4, 4, sigma=0.0))
    k = np.flatnonzero(fr.pix == 1 * 4 + 2)[0]
    assert np.allclose(fr.bary.data[k], 1 / 3, atol=1e-12)


def test_barycentrics_sum_to_one_and_depth_order():
    rng = np.random.default_rng(0)
    v = np.column_stack([rng.uniform(-1, 1, (12, 2)), rng.uniform(0, 1, 12)])
    f = rng.integers(0, 12, size=(10, 3))
    f = f[(f[:, 0] != f[:, 1]) & (f[:, 1] != f[:, 2]) & (f[:, 0] != f[:, 2])]
    fr = rasterize(v, f, RasterConfig(16, 16, sigma=1e-3))
    inside = fr.inside
    assert np.allclose(fr.bary.data[inside].sum(1), 1.0, atol=1e-9)
    same = fr.pix[1:] == fr.pix[:-1]
    assert np.all(fr.depth.data[1:][same] >= fr.depth.data[:-1][same])


def test_silhouette_saturates():
    v, f = square(half=0.6)
    sil = soft_silhouette(rasterize(v, f, RasterConfig(16, 16, sigma=1e-4))).data
    assert sil[8, 8] >= 1 - 1e-6
    assert sil[0, 0] <= 1e-6


def test_edge_pixel_is_half_covered():
    xs, ys = pixel_centers(4, 4)
    # vertical edge through a pixel center
    v = np.array([[xs[2], -0.9, 0.5], [0.9, -0.9, 0.5], [xs[2], 0.9, 0.5]])
    fr = rasterize(v, [[0, 1, 2]], RasterConfig(4, 4, sigma=1e-3))
    D = coverage(fr).data
    k = np.flatnonzero(fr.pix == 1 * 4 + 2)[0]
    assert D[k] == pytest.approx(0.5, abs=1e-12)


def test_blend_single_face_interior():
    v, f = square(half=0.8)
    fr = rasterize(v, f, RasterConfig(8, 8, sigma=1e-4))
    out = soft_blend(fr, np.array([0.7, 0.7])).data
    assert abs(out[4, 4] - 0.7) < 1e-6


def test_blend_equal_depth_average():
    v, f = square(half=0.8)
    verts = np.vstack([v, v])
    faces = np.vstack([f, f + 4])
    fr = rasterize(verts, faces, RasterConfig(8, 8, sigma=1e-4))
    out = soft_blend(fr, np.array([0.2, 0.2, 0.9, 0.9])).data
    assert abs(out[4, 4] - 0.55) < 1e-9


def test_blend_prefers_near_face_as_tau_shrinks():
    near, f = square(z=0.3, half=0.8)
    far, _ = square(z=0.35, half=0.8)
    verts, faces = np.vstack([near, far]), np.vstack([f, f + 4])
    fr = rasterize(verts, faces, RasterConfig(8, 8, sigma=1e-4))
    errors = [abs(soft_blend(fr, np.array([1.0, 1.0, 0.0, 0.0]), tau=tau).data[4, 4] - 1.0)
              for tau in (1e-1, 1e-2, 1e-3, 1e-4)]
    assert all(a > b or a == b == 0.0 for a, b in zip(errors, errors[1:]))
    assert errors[0] > errors[1] > 0
    assert errors[-1] < 1e-9


def test_depth_flat_square_and_empty():
    v, f = square(z=0.42, half=0.5)
    fr = rasterize(v, f, RasterConfig(16, 16, sigma=0.0))
    z = depth_buffer(fr, far=1.0).data
    cov = fr.covered()
    assert cov.any() and np.allclose(z[cov], 0.42, atol=1e-15)
    assert np.all(z[~cov] == 1.0)


def test_depth_tilted_plane_linear():
    v, f = square(half=0.9)
    v[:, 2] = 0.5 + 0.2 * v[:, 0]
    fr = rasterize(v, f, RasterConfig(16, 16, sigma=0.0))
    z = depth_buffer(fr).data
    xs, _ = pixel_centers(16, 16)
    cov = fr.covered()
    expect = np.broadcast_to(0.5 + 0.2 * xs, (16, 16))
    assert np.max(np.abs(z[cov] - expect[cov])) < 1e-6


def test_silhouette_gradient_matches_finite_differences():
    v, f = square(half=0.45)
    v[:, :2] += np.random.default_rng(3).uniform(-0.02, 0.02, (4, 2))
    target = np.random.default_rng(4).uniform(size=(10, 10))
    cfg = RasterConfig(10, 10, sigma=5e-3)

    def loss(t):
        d = soft_silhouette(rasterize(t, f, cfg)) - target
        return (d * d).mean()

    assert check_gradient(loss, v, epsilon=1e-5) <= 1e-2


def test_hard_silhouette_matches_coverage():
    v, f = square(half=0.5)
    fr = rasterize(v, f, RasterConfig(8, 8, sigma=0.0))
    assert np.array_equal(soft_silhouette(fr).data, fr.covered().astype(float))
