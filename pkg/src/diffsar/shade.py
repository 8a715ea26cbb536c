"""SAR feature maps, shaders, noise augmentation and PEDF-style remapping."""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .errors import ContractError, ParseError, ShapeError, ValidationError
from .geometry import TriangleMesh, face_normals_tensor
from .raster import Fragments, RasterConfig, depth_buffer, rasterize, soft_blend, soft_silhouette
from .sarcam import AspectPose, SceneExtent, reference_view_ndc, to_ndc

DEFAULT_SPACING = 0.075


@dataclass(eq=False)
class FeatureMaps:
    silhouette: Tensor
    normal_dot: Tensor
    alpha: Tensor

    def stack(self) -> Tensor:
        """(3, H, W) tensor in channel order silhouette, normal_dot, alpha."""
        return ad.stack([self.silhouette, self.normal_dot, self.alpha], axis=0)

    def numpy(self) -> np.ndarray:
        return np.stack([self.silhouette.data, self.normal_dot.data, self.alpha.data])

    @property
    def shape(self):
        return self.silhouette.shape


@dataclass(eq=False)
class SarImage:
    """Magnitude image.  ``data`` is linear magnitude, or in [0, 1] when ``remapped``."""

    data: Tensor | np.ndarray
    spacing: float = DEFAULT_SPACING
    remapped: bool = False
    noise_branch: str | None = None
    pedf_threshold: float | None = None

    @property
    def array(self) -> np.ndarray:
        return self.data.data if isinstance(self.data, Tensor) else np.asarray(self.data)

    @property
    def shape(self):
        return self.array.shape


@dataclass(frozen=True)
class NoiseConfig:
    """Additive std and multiplicative half-width are relative to the image's mean nonzero magnitude."""

    additive_std: float = 0.05
    multiplicative_halfwidth: float = 0.3
    p_add: float = 0.25
    p_mul: float = 0.25
    p_none: float = 0.50
    reference_magnitude: float | None = None

    def __post_init__(self):
        if abs(self.p_add + self.p_mul + self.p_none - 1.0) > 1e-12:
            raise ValidationError("noise branch probabilities must sum to 1")
        if self.additive_std < 0 or not 0 <= self.multiplicative_halfwidth < 1:
            raise ValidationError("need additive_std >= 0 and 0 <= multiplicative_halfwidth < 1")


@dataclass(frozen=True)
class ShaderParams:
    diffuse: float = 0.7
    specular: float = 0.3
    exponent: float = 8.0
    background: float = 0.0

    def __post_init__(self):
        if self.exponent < 1 or self.background < 0 or self.diffuse < 0 or self.specular < 0:
            raise ValidationError("shader gains must be nonnegative and exponent >= 1")


# ---------------------------------------------------------------------------
# Feature maps

def face_dot(vertices, faces, pose: AspectPose) -> Tensor:
    """Per-face ``d = -q . n`` with q the boresight (sensor into scene)."""
    n = face_normals_tensor(vertices, faces, eps=1e-12)
    return ad.matmul(n, -pose.boresight.reshape(3, 1)).reshape(-1)


def _extent_for(config: RasterConfig, extent):
    return extent if extent is not None else SceneExtent.for_image(config.height, config.width, DEFAULT_SPACING)


def normal_dot_feature(mesh: TriangleMesh, pose: AspectPose, fragments: Fragments,
                       config: RasterConfig | None = None) -> Tensor:
    config = config or RasterConfig(fragments.height, fragments.width, sigma=fragments.sigma)
    d = face_dot(mesh.vertices, mesh.faces, pose)
    return soft_blend(fragments, d, fragments.sigma, config.tau, config.background_eps,
                      config.znear, config.zfar)


def visible_faces(mesh: TriangleMesh, pose: AspectPose, config: RasterConfig,
                  extent: SceneExtent | None = None, depth_tol: float = 1e-3) -> np.ndarray:
    """Faces seen by the radar in a hard reference view at twice the main resolution.

    A face is visible if it is nearest at any reference pixel.  Faces too
    small to cover a pixel center fall back to comparing their centroid
    depth with the reference depth buffer.
    """
    extent = _extent_for(config, extent)
    ref = RasterConfig(2 * config.height, 2 * config.width, sigma=0.0, faces_per_pixel=1)
    ndc = reference_view_ndc(mesh.verts, pose, extent).data
    fr = rasterize(ndc, mesh.faces, ref)
    visible = np.zeros(mesh.n_faces, dtype=bool)
    visible[fr.face[fr.nearest()]] = True
    rest = np.flatnonzero(~visible)
    if len(rest):
        zbuf = depth_buffer(fr, far=np.inf).data.ravel()
        cen = ndc[mesh.faces[rest]].mean(axis=1)
        col = np.floor((cen[:, 0] + 1.0) * ref.width / 2.0).astype(np.int64)
        row = np.floor((1.0 - cen[:, 1]) * ref.height / 2.0).astype(np.int64)
        on_image = (col >= 0) & (col < ref.width) & (row >= 0) & (row < ref.height)
        z = np.full(len(rest), np.inf)
        z[on_image] = zbuf[row[on_image] * ref.width + col[on_image]]
        visible[rest] = ~on_image | (cen[:, 2] <= z + depth_tol)
    return visible


def shadow_alpha(mesh: TriangleMesh, pose: AspectPose, config: RasterConfig,
                 extent: SceneExtent | None = None, fragments: Fragments | None = None,
                 silhouette: Tensor | None = None, use_shadow_mask: bool = True) -> Tensor:
    """Silhouette times the blended ``visibility * max(d, 0)`` per pixel."""
    extent = _extent_for(config, extent)
    if fragments is None:
        fragments = rasterize(to_ndc(mesh.vertices, pose, extent), mesh.faces, config)
    if silhouette is None:
        silhouette = soft_silhouette(fragments)
    lit = ad.relu(face_dot(mesh.vertices, mesh.faces, pose))
    if use_shadow_mask:
        lit = lit * visible_faces(mesh, pose, config, extent).astype(np.float64)
    blended = soft_blend(fragments, lit, fragments.sigma, config.tau, config.background_eps,
                         config.znear, config.zfar)
    return silhouette * blended


def render_features(mesh: TriangleMesh, pose: AspectPose, config: RasterConfig,
                    extent: SceneExtent | None = None, sigma: float | None = None) -> FeatureMaps:
    extent = _extent_for(config, extent)
    if sigma is not None:
        config = config.replace(sigma=sigma)
    if mesh.n_faces == 0:
        zero = Tensor(np.zeros((config.height, config.width)))
        return FeatureMaps(zero, zero, zero)
    fr = rasterize(to_ndc(mesh.vertices, pose, extent), mesh.faces, config)
    sil = soft_silhouette(fr)
    nd = normal_dot_feature(mesh, pose, fr, config)
    alpha = shadow_alpha(mesh, pose, config, extent, fragments=fr, silhouette=sil)
    return FeatureMaps(sil, nd, alpha)


# ---------------------------------------------------------------------------
# Shaders

def analytic_shader(features: FeatureMaps, params: ShaderParams = ShaderParams(),
                    spacing: float = DEFAULT_SPACING) -> SarImage:
    """``alpha * (kd m + ks m^p) + b (1 - silhouette)`` with ``m = max(d, 0)``.

    The clutter floor ``b`` fills only pixels outside the object, so shadowed
    and back-facing object pixels stay darker than the surrounding ground.
    """
    m = ad.relu(features.normal_dot)
    a = features.alpha
    lit = m * params.diffuse
    if params.specular:
        lit = lit + ad.power(m, params.exponent) * params.specular
    mag = a * lit
    if params.background:
        mag = mag + (1.0 - features.silhouette) * params.background
    return SarImage(mag, spacing=spacing)


SHADER_CHANNELS = 16


def _lift(x: Tensor) -> Tensor:
    """(N, 3, H, W) -> (N, 6, H, W): the three maps and their pairwise products."""
    s, d, a = x[:, 0:1], x[:, 1:2], x[:, 2:3]
    return ad.concatenate([s, d, a, s * d, s * a, d * a], axis=1)


def init_shader_weights(kind: str = "random", seed: int = 0, channels: int = SHADER_CHANNELS) -> dict:
    """Weights for the 3-layer 3x3 conv shader.

    ``identity`` passes ``max(alpha * d, 0)`` straight through; ``zero`` gives
    a constant-bias output; ``random`` is He-initialised.
    """
    shapes = {"w1": (channels, 6, 3, 3), "b1": (channels,),
              "w2": (channels, channels, 3, 3), "b2": (channels,),
              "w3": (1, channels, 3, 3), "b3": (1,)}
    w = {k: np.zeros(s) for k, s in shapes.items()}
    if kind == "identity":
        w["w1"][0, 5, 1, 1] = 1.0
        w["w2"][0, 0, 1, 1] = 1.0
        w["w3"][0, 0, 1, 1] = 1.0
    elif kind == "random":
        rng = np.random.default_rng(seed)
        for k in ("w1", "w2", "w3"):
            fan_in = np.prod(shapes[k][1:])
            w[k] = rng.normal(scale=np.sqrt(2.0 / fan_in), size=shapes[k])
        w["b3"][:] = 0.0
    elif kind != "zero":
        raise ValidationError(f"unknown shader init {kind!r}")
    return w


def shader_net(x, weights: dict) -> Tensor:
    """Batch forward: (N, 3, H, W) features -> (N, H, W) magnitudes."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"shader expects (N, 3, H, W) features, got {x.shape}")
    W = {k: as_tensor(v) for k, v in weights.items()}
    if W["w1"].shape[1] != 6:
        raise ShapeError(f"first-layer weights expect {W['w1'].shape[1]} channels, features give 6")
    h = _lift(x)
    h = ad.relu(ad.conv2d(h, W["w1"]) + W["b1"].reshape(1, -1, 1, 1))
    h = ad.relu(ad.conv2d(h, W["w2"]) + W["b2"].reshape(1, -1, 1, 1))
    out = ad.relu(ad.conv2d(h, W["w3"]) + W["b3"].reshape(1, -1, 1, 1))
    return out.reshape(out.shape[0], out.shape[2], out.shape[3])


def learned_shader_forward(features: FeatureMaps, weights: dict, spacing: float = DEFAULT_SPACING) -> SarImage:
    x = features.stack()
    out = shader_net(x.reshape(1, *x.shape), weights)
    return SarImage(out.reshape(out.shape[1], out.shape[2]), spacing=spacing)


def save_shader_weights(weights: dict, path) -> None:
    np.savez(path, **{k: np.asarray(as_tensor(v).data) for k, v in weights.items()})


def load_shader_weights(path) -> dict:
    with np.load(path) as z:
        return {k: z[k].astype(np.float64) for k in z.files}


# ---------------------------------------------------------------------------
# Noise augmentation

BRANCHES = ("additive", "multiplicative", "none")


def choose_branch(cfg: NoiseConfig, rng: np.random.Generator) -> str:
    u = rng.random()
    if u < cfg.p_add:
        return "additive"
    if u < cfg.p_add + cfg.p_mul:
        return "multiplicative"
    return "none"


def _mean_nonzero(mag: np.ndarray) -> float:
    nz = mag[mag > 0]
    return float(nz.mean()) if nz.size else 0.0


def augment(image: SarImage | np.ndarray, cfg: NoiseConfig = NoiseConfig(), seed: int = 0,
            branch: str | None = None) -> SarImage:
    """Apply one randomly chosen noise branch (or the given ``branch``) to a linear image.

    Complex input is supported; the result is always magnitude-detected.
    """
    if isinstance(image, SarImage):
        if image.remapped:
            raise ContractError("augmentation must precede remapping")
        spacing = image.spacing
        s = image.array
    else:
        spacing = DEFAULT_SPACING
        s = np.asarray(image)
    rng = np.random.default_rng(seed)
    chosen = choose_branch(cfg, rng)
    branch = chosen if branch is None else branch
    if branch not in BRANCHES:
        raise ValidationError(f"unknown noise branch {branch!r}")
    mag = np.abs(s)
    ref = cfg.reference_magnitude
    if ref is None:
        ref = _mean_nonzero(mag) or 1.0
    if branch == "additive":
        scale = cfg.additive_std * ref / np.sqrt(2.0)
        z = rng.normal(scale=scale, size=s.shape) + 1j * rng.normal(scale=scale, size=s.shape)
        out = np.abs(s + z)
    elif branch == "multiplicative":
        u = cfg.multiplicative_halfwidth
        out = mag * (1.0 + rng.uniform(-u, u, size=s.shape))
    else:
        out = mag.astype(np.float64)
    return SarImage(out, spacing=spacing, noise_branch=branch)


# ---------------------------------------------------------------------------
# PEDF-style remap: linear up to a threshold T, logarithmic above it with
# matching slope at T, clipped D dB above T.

def _pedf_knee(dynamic_range_db: float) -> float:
    a = 20.0 / (dynamic_range_db * np.log(10.0))
    return a / (1.0 + a)


def pedf_threshold(magnitude: np.ndarray, factor: float = 3.0) -> float:
    t = factor * _mean_nonzero(np.asarray(magnitude))
    return t if t > 0 else 1.0


def pedf_remap(image: SarImage | Tensor | np.ndarray, threshold: float | None = None,
               dynamic_range_db: float = 30.0) -> SarImage:
    """Monotone, C1 map of linear magnitudes onto [0, 1]; differentiable in the input."""
    spacing = DEFAULT_SPACING
    if isinstance(image, SarImage):
        if image.remapped:
            raise ContractError("image is already remapped")
        spacing = image.spacing
        threshold = image.pedf_threshold if threshold is None else threshold
        x = as_tensor(image.data)
    else:
        x = as_tensor(image)
    if np.any(x.data < 0):
        raise ContractError("PEDF remap needs nonnegative magnitudes")
    T = pedf_threshold(x.data) if threshold is None else float(threshold)
    c = _pedf_knee(dynamic_range_db)
    lin = x * (c / T)
    above = ad.log10(ad.maximum(x, T) * (1.0 / T)) * (20.0 * (1.0 - c) / dynamic_range_db) + c
    out = ad.clip(ad.where(x.data <= T, lin, above), None, 1.0)
    return SarImage(out, spacing=spacing, remapped=True, pedf_threshold=T)


def inverse_pedf(image: SarImage | np.ndarray, threshold: float | None = None,
                 dynamic_range_db: float = 30.0) -> SarImage:
    if isinstance(image, SarImage):
        r = image.array
        threshold = image.pedf_threshold if threshold is None else threshold
        spacing = image.spacing
    else:
        r, spacing = np.asarray(image, dtype=np.float64), DEFAULT_SPACING
    if threshold is None:
        raise ContractError("inverse remap needs the threshold used in the forward map")
    T, c = float(threshold), _pedf_knee(dynamic_range_db)
    exponent = (np.maximum(r, c) - c) * dynamic_range_db / (20.0 * (1.0 - c))
    mag = np.where(r <= c, r * T / c, T * 10.0 ** exponent)
    return SarImage(mag, spacing=spacing, pedf_threshold=T)


# ---------------------------------------------------------------------------
# File formats

def write_sarf(image: SarImage | np.ndarray, sink) -> None:
    """``SARF H W`` header line, then H*W little-endian float64, row-major."""
    if isinstance(sink, (str, os.PathLike)):
        with open(sink, "wb") as fh:
            return write_sarf(image, fh)
    arr = image.array if isinstance(image, SarImage) else np.asarray(image)
    h, w = arr.shape
    sink.write(f"SARF {h} {w}\n".encode("ascii"))
    sink.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_sarf(source) -> np.ndarray:
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            return read_sarf(fh)
    header = source.readline().decode("ascii").split()
    if len(header) != 3 or header[0] != "SARF":
        raise ParseError("bad SARF header", 1)
    h, w = int(header[1]), int(header[2])
    raw = source.read(8 * h * w)
    if len(raw) != 8 * h * w:
        raise ParseError("truncated SARF payload")
    return np.frombuffer(raw, dtype="<f8").reshape(h, w).astype(np.float64)


def write_png(values: np.ndarray, path, vmax: float = 1.0) -> None:
    """8-bit grayscale PNG of values scaled from [0, vmax]."""
    from PIL import Image
    arr = np.clip(np.asarray(values, dtype=np.float64) / vmax, 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8), mode="L").save(path, format="PNG")


def read_png(path) -> np.ndarray:
    from PIL import Image
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0
