"""Voxel overlap scores, their translation-invariant variants, and the L2* image error."""
from __future__ import annotations

import csv
import json
import os
import warnings
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .errors import ContractError, ShapeError, ValidationError
from .geometry import GridSpec, TriangleMesh, VoxelGrid, default_grid, voxelize

PERFECT_DB = -300.0
DEFAULT_WINDOW = 3


def _occupancy(g) -> np.ndarray:
    return g.occupancy if isinstance(g, VoxelGrid) else np.asarray(g, dtype=bool)


def _check_same_grid(a, b):
    if isinstance(a, VoxelGrid) and isinstance(b, VoxelGrid):
        if a.dims != b.dims or not np.allclose(a.origin, b.origin) or not np.isclose(a.spacing, b.spacing):
            raise ShapeError("voxel grids differ in dims, origin or spacing")
    elif _occupancy(a).shape != _occupancy(b).shape:
        raise ShapeError(f"voxel grids differ in shape: {_occupancy(a).shape} vs {_occupancy(b).shape}")


def _counts(a: np.ndarray, b: np.ndarray) -> tuple[int, int, int]:
    return int(np.count_nonzero(a & b)), int(np.count_nonzero(a)), int(np.count_nonzero(b))


def _iou(inter, na, nb) -> float:
    union = na + nb - inter
    return 1.0 if union == 0 else inter / union


def _cs(inter, na, nb) -> float:
    if na == 0 or nb == 0:
        return 0.0
    return float(inter / np.sqrt(float(na) * float(nb)))


def iou(a, b) -> float:
    """Intersection over union; 1 when both grids are empty."""
    _check_same_grid(a, b)
    return _iou(*_counts(_occupancy(a), _occupancy(b)))


def cosine_similarity(a, b) -> float:
    """Overlap over the geometric mean of the two volumes; 0 (with a warning) if either is empty."""
    _check_same_grid(a, b)
    inter, na, nb = _counts(_occupancy(a), _occupancy(b))
    if na == 0 or nb == 0:
        warnings.warn("cosine similarity of an empty grid", RuntimeWarning, stacklevel=2)
    return _cs(inter, na, nb)


def shift(a, offset) -> np.ndarray:
    """Integer voxel translation; voxels moved out are dropped, vacated voxels are False."""
    occ = _occupancy(a)
    out = np.zeros_like(occ)
    src, dst = [], []
    for s, n in zip(offset, occ.shape):
        s = int(s)
        if abs(s) >= n:
            return out
        src.append(slice(max(0, -s), n - max(0, s)))
        dst.append(slice(max(0, s), n - max(0, -s)))
    out[tuple(dst)] = occ[tuple(src)]
    return out


def _overlap_after_shift(a: np.ndarray, b: np.ndarray, s) -> int:
    """|shift(a, s) & b| without materializing the shifted grid."""
    src, dst = [], []
    for k, n in zip(s, a.shape):
        if abs(k) >= n:
            return 0
        src.append(slice(max(0, -k), n - max(0, k)))
        dst.append(slice(max(0, k), n - max(0, -k)))
    return int(np.count_nonzero(a[tuple(src)] & b[tuple(dst)]))


_SCORES = {iou: _iou, cosine_similarity: _cs}


def translation_invariant(metric: Callable, a, b, n: int = DEFAULT_WINDOW) -> float:
    """Best ``metric(shift(a, s), b)`` over integer shifts ``s`` in ``[-n, n]^3``.

    Only the first grid is shifted, so the result is not symmetric in general.
    """
    if n < 0:
        raise ValidationError("window n must be nonnegative")
    _check_same_grid(a, b)
    A, B = _occupancy(a), _occupancy(b)
    nb = int(np.count_nonzero(B))
    score = _SCORES.get(metric)
    best = -np.inf
    r = range(-n, n + 1)
    for s in ((i, j, k) for i in r for j in r for k in r):
        if score is None:
            val = metric(shift(A, s), B)
        else:
            na = _kept_count(A, s)
            val = score(_overlap_after_shift(A, B, s), na, nb)
        best = max(best, val)
    return float(best)


def _kept_count(a: np.ndarray, s) -> int:
    src = []
    for k, n in zip(s, a.shape):
        if abs(k) >= n:
            return 0
        src.append(slice(max(0, -k), n - max(0, k)))
    return int(np.count_nonzero(a[tuple(src)]))


def l2_star(label, pred) -> float:
    """Residual energy relative to label energy, in dB; ``PERFECT_DB`` for an exact match."""
    y = np.asarray(getattr(label, "array", label), dtype=np.float64)
    p = np.asarray(getattr(pred, "array", pred), dtype=np.float64)
    if y.shape != p.shape:
        raise ShapeError(f"image shapes differ: {y.shape} vs {p.shape}")
    energy = float(np.sum(y * y))
    if energy == 0:
        raise ContractError("label image has zero energy")
    resid = float(np.sum((y - p) ** 2))
    if resid == 0:
        return PERFECT_DB
    return max(10.0 * np.log10(resid / energy), PERFECT_DB)


@dataclass
class MetricReport:
    iou: float
    iou_star: float
    cs: float
    cs_star: float
    window: int = DEFAULT_WINDOW
    l2_star: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json() + "\n")

    @staticmethod
    def csv_header() -> list[str]:
        return ["iou", "iou_star", "cs", "cs_star", "window", "l2_star"]

    def csv_row(self) -> list:
        return [getattr(self, k) for k in self.csv_header()]

    def write_csv(self, sink, header: bool = True) -> None:
        if isinstance(sink, (str, os.PathLike)):
            with open(sink, "w", newline="") as fh:
                return self.write_csv(fh, header)
        w = csv.writer(sink, lineterminator="\n")
        if header:
            w.writerow(self.csv_header())
        w.writerow(["" if v is None else v for v in self.csv_row()])


def compare_grids(a, b, n: int = DEFAULT_WINDOW) -> MetricReport:
    return MetricReport(iou=iou(a, b), iou_star=translation_invariant(iou, a, b, n),
                        cs=cosine_similarity(a, b), cs_star=translation_invariant(cosine_similarity, a, b, n),
                        window=n)


def compare_meshes(pred: TriangleMesh, truth: TriangleMesh, resolution: int = 64,
                   n: int = DEFAULT_WINDOW, grid: GridSpec | None = None, seed: int = 0) -> MetricReport:
    """Voxelize both meshes on a shared grid and score ``pred`` against ``truth``."""
    grid = grid or default_grid(pred, truth, resolution=resolution)
    return compare_grids(voxelize(pred, grid, seed=seed), voxelize(truth, grid, seed=seed), n)
