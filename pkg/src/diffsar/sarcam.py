"""SAR ground-plane imaging geometry.

The world-to-NDC chain has four affine stages:

    view_transform    world -> camera frame (x right, y up, z = range)
    range_transform   range becomes the image row axis; the old up axis
                      is kept (negated) as the depth used for z-tests
    ground_projection range scaled by 1 / cos(elevation) so image rows
                      sample the ground at equal spacing
    ndc_orthographic  affine normalisation, no perspective division

Display convention: far range is at the top of the image (NDC +y).
Higher points along the retained up axis are *nearer* in depth, so at a
layover pixel the upper surface wins the z-test.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, matmul, add
from .errors import ValidationError


@dataclass(frozen=True)
class AspectPose:
    """Monostatic sensor pose: azimuth and elevation in degrees, standoff in meters."""

    azimuth: float
    elevation: float
    standoff: float = 100.0

    def __post_init__(self):
        if not 0.0 < self.elevation < 90.0:
            raise ValidationError(f"elevation must lie strictly in (0, 90) degrees, got {self.elevation}")
        if not self.standoff > 0:
            raise ValidationError(f"standoff must be positive, got {self.standoff}")
        object.__setattr__(self, "azimuth", float(self.azimuth) % 360.0)

    @property
    def eye(self) -> np.ndarray:
        th, ph = np.deg2rad(self.azimuth), np.deg2rad(self.elevation)
        return self.standoff * np.array([np.cos(ph) * np.cos(th), np.cos(ph) * np.sin(th), np.sin(ph)])

    @property
    def boresight(self) -> np.ndarray:
        """Unit illumination direction q, pointing from the sensor into the scene."""
        return -self.eye / self.standoff

    def rotation(self) -> np.ndarray:
        """Rows are the camera axes (right, up, boresight) in world coordinates."""
        f = self.boresight
        up = np.array([0.0, 0.0, 1.0]) - f[2] * f
        up /= np.linalg.norm(up)
        right = np.cross(f, up)
        return np.stack([right, up, f])


@dataclass(frozen=True)
class SceneExtent:
    """Orthographic NDC box in ground space (meters)."""

    half_width: float
    half_height: float
    near: float
    far: float

    def __post_init__(self):
        if min(self.half_width, self.half_height) <= 0:
            raise ValidationError("scene extents must be positive")
        if not self.far > self.near:
            raise ValidationError("far depth must exceed near depth")

    @classmethod
    def for_image(cls, height: int, width: int, spacing: float, depth: float | None = None):
        hw, hh = 0.5 * width * spacing, 0.5 * height * spacing
        d = max(hw, hh) if depth is None else depth
        return cls(hw, hh, -d, d)


def _affine(points, matrix: np.ndarray, offset: np.ndarray) -> Tensor:
    return add(matmul(as_tensor(points), matrix), offset)


def view_transform(points, pose: AspectPose) -> Tensor:
    R = pose.rotation()
    # (p - eye) R^T
    return _affine(points, R.T, -pose.eye @ R.T)


_RANGE = np.array([[1.0, 0.0, 0.0],
                   [0.0, 0.0, -1.0],
                   [0.0, 1.0, 0.0]])


def range_transform(points_view, reference_depth: float = 0.0) -> Tensor:
    """(x, y, z) -> (x, z - reference_depth, -y)."""
    return _affine(points_view, _RANGE, np.array([0.0, -reference_depth, 0.0]))


def inverse_range_transform(points_range, reference_depth: float = 0.0) -> Tensor:
    shifted = add(as_tensor(points_range), np.array([0.0, reference_depth, 0.0]))
    return matmul(shifted, _RANGE.T)


def ground_projection(points_range, elevation: float) -> Tensor:
    if not 0.0 < elevation < 90.0:
        raise ValidationError(f"elevation must lie strictly in (0, 90) degrees, got {elevation}")
    scale = np.diag([1.0, 1.0 / np.cos(np.deg2rad(elevation)), 1.0])
    return matmul(as_tensor(points_range), scale)


def ndc_orthographic(points_ground, extent: SceneExtent) -> Tensor:
    depth = extent.far - extent.near
    scale = np.diag([1.0 / extent.half_width, 1.0 / extent.half_height, 1.0 / depth])
    return _affine(points_ground, scale, np.array([0.0, 0.0, -extent.near / depth]))


def to_ndc(points, pose: AspectPose, extent: SceneExtent, ground_plane: bool = True) -> Tensor:
    """World points (or a mesh's vertices) to NDC through the full chain.

    ``ground_plane=False`` skips the ground projection, giving slant-plane geometry.
    """
    points = getattr(points, "vertices", points)
    p = range_transform(view_transform(points, pose), pose.standoff)
    if ground_plane:
        p = ground_projection(p, pose.elevation)
    return ndc_orthographic(p, extent)


def reference_view_ndc(points, pose: AspectPose, extent: SceneExtent) -> Tensor:
    """Orthographic projection along the radar line of sight (shadow reference view).

    Image axes are the camera right/up axes; depth is range from the sensor.
    """
    points = getattr(points, "vertices", points)
    half = max(extent.half_width, extent.half_height)
    depth = extent.far - extent.near
    scale = np.diag([1.0 / half, 1.0 / half, 1.0 / depth])
    offset = np.array([0.0, 0.0, -(pose.standoff + extent.near) / depth])
    return _affine(view_transform(points, pose), scale, offset)


def bottom_up_ndc(points, extent: SceneExtent, camera_distance: float) -> Tensor:
    """Camera ``camera_distance`` below the floor looking straight up.

    x, y are normalised by the scene extent; depth is left in meters
    (distance from the camera, i.e. ``camera_distance + z``).
    """
    points = getattr(points, "vertices", points)
    scale = np.diag([1.0 / extent.half_width, 1.0 / extent.half_height, 1.0])
    return _affine(points, scale, np.array([0.0, 0.0, camera_distance]))
