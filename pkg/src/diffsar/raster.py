"""Soft rasterization of NDC triangles.

Pixel centers sit at ``x = -1 + (2c + 1) / W`` and ``y = 1 - (2r + 1) / H``
(row 0 at the top).  For every pixel the rasterizer keeps the ``K``
nearest faces whose squared distance to the pixel is within ``9 sigma``
(or that contain it), and records differentiable barycentrics, squared
boundary distance and interpolated depth for each (pixel, face) pair.

Candidate selection is a discrete gate computed on plain arrays; the
recorded quantities are then recomputed on the kept pairs through the
autodiff engine so gradients reach the vertex positions.
"""
from __future__ import annotations

from dataclasses import dataclass, replace as _dc_replace

import numpy as np

from .autodiff import (Tensor, as_tensor, clip, exp, index, log, minimum, reshape,
                       segment_sum, sigmoid, softplus, sqrt, stack, where)
from .errors import ValidationError

# Outside a face, coverage is tapered to exactly zero between 2 and 3 blur
# radii so pairs leaving the candidate set do not cause value jumps.
TAPER_START = 2.0
CUTOFF = 3.0


@dataclass(frozen=True)
class RasterConfig:
    height: int = 128
    width: int = 128
    sigma: float = 1e-4
    tau: float = 1e-4
    faces_per_pixel: int = 8
    background_eps: float = 1e-3
    znear: float = 0.0
    zfar: float = 1.0

    def __post_init__(self):
        if self.sigma < 0 or self.tau <= 0 or self.faces_per_pixel < 1:
            raise ValidationError("need sigma >= 0, tau > 0, faces_per_pixel >= 1")

    def replace(self, **kw) -> "RasterConfig":
        return _dc_replace(self, **kw)


@dataclass(eq=False)
class Fragments:
    """Sparse per-pixel candidate lists, sorted by pixel then ascending depth."""

    height: int
    width: int
    pix: np.ndarray        # flat pixel index of each pair
    face: np.ndarray       # face index of each pair
    rank: np.ndarray       # position in the pixel's depth-sorted list
    bary: Tensor           # (M, 3) unclipped barycentrics
    dist2: Tensor          # (M,) squared NDC distance to the face boundary
    inside: np.ndarray     # (M,) bool
    depth: Tensor          # (M,) interpolated depth (clipped barycentrics)
    sigma: float
    faces_per_pixel: int = 8   # depth blending sees only this many nearest faces

    @property
    def n_pairs(self) -> int:
        return len(self.pix)

    @property
    def n_pixels(self) -> int:
        return self.height * self.width

    def nearest(self) -> np.ndarray:
        """Indices of pairs within each pixel's ``faces_per_pixel`` nearest candidates."""
        return np.flatnonzero(self.rank < self.faces_per_pixel)

    def signed_distance(self) -> np.ndarray:
        d = np.sqrt(self.dist2.data)
        return np.where(self.inside, d, -d)

    def face_indices(self, k: int | None = None) -> np.ndarray:
        """Dense (H, W, K) face-index array, -1 where a slot is empty."""
        k = int(self.rank.max() + 1) if k is None else k
        if self.n_pairs == 0:
            k = max(k, 1)
        out = np.full((self.n_pixels, k), -1, dtype=np.int64)
        keep = self.rank < k
        out[self.pix[keep], self.rank[keep]] = self.face[keep]
        return out.reshape(self.height, self.width, k)

    def covered(self) -> np.ndarray:
        """(H, W) bool, pixels inside at least one face."""
        mask = np.zeros(self.n_pixels, dtype=bool)
        mask[self.pix[self.inside]] = True
        return mask.reshape(self.height, self.width)


def pixel_centers(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    xs = -1.0 + (2.0 * np.arange(width) + 1.0) / width
    ys = 1.0 - (2.0 * np.arange(height) + 1.0) / height
    return xs, ys


def _pair_geometry(x0, y0, z0, x1, y1, z1, x2, y2, z2, px, py):
    """Barycentrics, squared boundary distance and clipped-bary depth per pair."""
    area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
    w0 = ((x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)) / area
    w1 = ((x2 - px) * (y0 - py) - (x0 - px) * (y2 - py)) / area
    w2 = ((x0 - px) * (y1 - py) - (x1 - px) * (y0 - py)) / area

    def seg_dist2(ax, ay, bx, by):
        ex, ey = bx - ax, by - ay
        qx, qy = px - ax, py - ay
        t = clip((qx * ex + qy * ey) / (ex * ex + ey * ey), 0.0, 1.0)
        dx, dy = qx - t * ex, qy - t * ey
        return dx * dx + dy * dy

    d2 = minimum(minimum(seg_dist2(x0, y0, x1, y1), seg_dist2(x1, y1, x2, y2)),
                 seg_dist2(x2, y2, x0, y0))
    c0, c1, c2 = clip(w0, 0.0, None), clip(w1, 0.0, None), clip(w2, 0.0, None)
    depth = (c0 * z0 + c1 * z1 + c2 * z2) / (c0 + c1 + c2)
    return w0, w1, w2, d2, depth


def _candidate_pairs(tri, height, width, margin):
    xs = tri[:, :, 0]
    ys = tri[:, :, 1]
    c0 = np.ceil((xs.min(1) - margin + 1.0) * width / 2.0 - 0.5)
    c1 = np.floor((xs.max(1) + margin + 1.0) * width / 2.0 - 0.5)
    r0 = np.ceil((1.0 - ys.max(1) - margin) * height / 2.0 - 0.5)
    r1 = np.floor((1.0 - ys.min(1) + margin) * height / 2.0 - 0.5)
    c0 = np.clip(c0, 0, width - 1).astype(np.int64)
    c1 = np.clip(c1, -1, width - 1).astype(np.int64)
    r0 = np.clip(r0, 0, height - 1).astype(np.int64)
    r1 = np.clip(r1, -1, height - 1).astype(np.int64)
    nc = np.maximum(c1 - c0 + 1, 0)
    nr = np.maximum(r1 - r0 + 1, 0)
    n = nc * nr
    face = np.repeat(np.arange(len(tri)), n)
    local = np.arange(int(n.sum())) - np.repeat(np.cumsum(n) - n, n)
    rows = r0[face] + local // nc[face]
    cols = c0[face] + local % nc[face]
    return face, rows, cols


def rasterize(ndc_vertices, faces, config: RasterConfig, sigma: float | None = None) -> Fragments:
    """Gather per-pixel candidate faces; ``sigma`` overrides ``config.sigma``.

    Every candidate within the blur margin is kept so the silhouette sees all
    of them; ``faces_per_pixel`` limits only the depth blend.
    """
    sigma = config.sigma if sigma is None else float(sigma)
    H, W, K = config.height, config.width, config.faces_per_pixel
    V = as_tensor(ndc_vertices)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    vd = V.data
    tri = vd[faces] if len(faces) else np.zeros((0, 3, 3))
    area = ((tri[:, 1, 0] - tri[:, 0, 0]) * (tri[:, 2, 1] - tri[:, 0, 1])
            - (tri[:, 2, 0] - tri[:, 0, 0]) * (tri[:, 1, 1] - tri[:, 0, 1]))
    # edge-on faces have no 2-D interior
    usable = np.flatnonzero(np.abs(area) > 1e-12)
    margin = CUTOFF * np.sqrt(sigma)
    fsub, rows, cols = _candidate_pairs(tri[usable], H, W, margin)
    face = usable[fsub]
    xs, ys = pixel_centers(H, W)
    px, py = xs[cols], ys[rows]

    pair_tri = tri[usable][fsub]
    coords = [pair_tri[:, i // 3, i % 3] for i in range(9)]
    w0, w1, w2, d2, depth = (as_tensor(t).data for t in _pair_geometry(*coords, px, py))
    inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
    keep = inside | (d2 <= margin * margin) if sigma > 0 else inside
    pix = (rows * W + cols)[keep]
    face, depth, px, py = face[keep], depth[keep], px[keep], py[keep]

    order = np.lexsort((face, depth, pix))
    pix, face, px, py = pix[order], face[order], px[order], py[order]
    starts = np.searchsorted(pix, pix, side="left")
    rank = np.arange(len(pix)) - starts

    # differentiable recomputation on the kept pairs
    vx, vy, vz = V[:, 0], V[:, 1], V[:, 2]
    fv = faces[face]
    gathered = []
    for i in range(3):
        ids = fv[:, i]
        gathered += [index(vx, ids), index(vy, ids), index(vz, ids)]
    w0, w1, w2, d2, depth = _pair_geometry(*gathered, px, py)
    bary = stack([w0, w1, w2], axis=1)
    inside = (w0.data >= 0) & (w1.data >= 0) & (w2.data >= 0)
    return Fragments(H, W, pix, face, rank, bary, d2, inside, depth, sigma, K)


# ---------------------------------------------------------------------------
# Aggregation

def _smoothstep_down(u):
    """1 for u <= TAPER_START, 0 for u >= CUTOFF, C1 in between (on arrays or Tensors)."""
    x = clip((u - TAPER_START) * (1.0 / (CUTOFF - TAPER_START)), 0.0, 1.0)
    return 1.0 - x * x * (3.0 - 2.0 * x)


def coverage(fragments: Fragments, sigma: float | None = None) -> Tensor:
    """Per-pair coverage probability ``logistic(sign * d^2 / sigma)`` (tapered far outside)."""
    sigma = fragments.sigma if sigma is None else sigma
    if sigma == 0:
        return Tensor(fragments.inside.astype(np.float64))
    sign = np.where(fragments.inside, 1.0, -1.0)
    D = sigmoid(fragments.dist2 * (sign / sigma))
    band = ~fragments.inside & (fragments.dist2.data > (TAPER_START ** 2) * sigma)
    if not band.any():
        return D
    safe = where(band, fragments.dist2, np.full(fragments.n_pairs, 4.0 * sigma))
    taper = _smoothstep_down(sqrt(safe * (1.0 / sigma)))
    return D * taper


def soft_silhouette(fragments: Fragments, sigma: float | None = None) -> Tensor:
    """``1 - prod_j (1 - D_j)`` per pixel, (H, W); hard coverage when sigma is 0."""
    sigma = fragments.sigma if sigma is None else sigma
    H, W = fragments.height, fragments.width
    if sigma == 0:
        return Tensor(fragments.covered().astype(np.float64))
    sign = np.where(fragments.inside, 1.0, -1.0)
    band = ~fragments.inside & (fragments.dist2.data > (TAPER_START ** 2) * sigma)
    core = np.flatnonzero(~band)
    edge = np.flatnonzero(band)
    # log(1 - sigmoid(x)) = -softplus(x) stays finite deep inside faces
    x_core = index(fragments.dist2, core) * (sign[core] / sigma)
    log_empty = segment_sum(-softplus(x_core), fragments.pix[core], H * W)
    if len(edge):
        d2e = index(fragments.dist2, edge)
        De = sigmoid(d2e * (-1.0 / sigma)) * _smoothstep_down(sqrt(d2e * (1.0 / sigma)))
        log_empty = log_empty + segment_sum(log(1.0 - De), fragments.pix[edge], H * W)
    return reshape(1.0 - exp(log_empty), (H, W))


def soft_blend(fragments: Fragments, per_face_values, sigma: float | None = None,
               tau: float = 1e-4, background_eps: float = 1e-3,
               znear: float = 0.0, zfar: float = 1.0) -> Tensor:
    """Depth-softmax weighted mean of per-face values, (H, W).

    Weights are ``D_j * exp(zbar_j / tau)`` with ``zbar = (zfar - z) / (zfar - znear)``
    plus a background term ``exp(eps / tau)`` carrying value 0.
    """
    H, W = fragments.height, fragments.width
    n = H * W
    values = as_tensor(per_face_values)
    keep = fragments.nearest()
    D, depth = coverage(fragments, sigma), fragments.depth
    if len(keep) < fragments.n_pairs:
        D, depth = index(D, keep), index(depth, keep)
    pix, face, rank = fragments.pix[keep], fragments.face[keep], fragments.rank[keep]
    zbar = (zfar - depth) * (1.0 / (zfar - znear))
    # shift by the per-pixel max (rank 0 is the nearest) for stability; the
    # shift cancels between numerator and denominator
    zmax = np.full(n, background_eps)
    first = rank == 0
    zmax[pix[first]] = zbar.data[first]
    w = D * exp((zbar - zmax[pix]) * (1.0 / tau))
    num = segment_sum(w * index(values, face), pix, n)
    den = segment_sum(w, pix, n) + np.exp((background_eps - zmax) / tau)
    return reshape(num / den, (H, W))


def blend_weights(fragments: Fragments, sigma=None, tau=1e-4, background_eps=1e-3,
                  znear=0.0, zfar=1.0) -> tuple[np.ndarray, np.ndarray]:
    """Normalised per-pair weights and per-pixel background weight (plain arrays).

    Pairs beyond a pixel's ``faces_per_pixel`` nearest get weight 0.
    """
    n = fragments.n_pixels
    D = coverage(fragments, sigma).data * (fragments.rank < fragments.faces_per_pixel)
    zbar = (zfar - fragments.depth.data) / (zfar - znear)
    zmax = np.full(n, background_eps)
    first = fragments.rank == 0
    zmax[fragments.pix[first]] = zbar[first]
    w = D * np.exp((zbar - zmax[fragments.pix]) / tau)
    bg = np.exp((background_eps - zmax) / tau)
    den = np.bincount(fragments.pix, weights=w, minlength=n) + bg
    return w / den[fragments.pix], bg / den


def depth_buffer(fragments: Fragments, far: float = 1.0) -> Tensor:
    """Nearest covering face's interpolated depth per pixel; ``far`` where uncovered."""
    n = fragments.n_pixels
    inside = np.flatnonzero(fragments.inside)
    # pairs are sorted by (pixel, depth): the first inside pair of a pixel is the nearest
    pix_in = fragments.pix[inside]
    first = inside[np.unique(pix_in, return_index=True)[1]] if len(inside) else inside
    covered = np.zeros(n, dtype=bool)
    covered[fragments.pix[first]] = True
    z = segment_sum(index(fragments.depth, first), fragments.pix[first], n)
    return reshape(z + np.where(covered, 0.0, far), (fragments.height, fragments.width))
