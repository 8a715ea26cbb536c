"""Losses, optimizers, shader training and coarse-to-fine mesh reconstruction."""
from __future__ import annotations

import csv
import logging
import os
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .errors import ContractError, NumericError, ShapeError, TopologyError, ValidationError
from .geometry import TriangleMesh, face_normals_tensor, make_dome, subdivide_midpoint, write_obj
from .raster import RasterConfig, depth_buffer, rasterize
from .sarcam import AspectPose, SceneExtent, bottom_up_ndc
from .shade import (FeatureMaps, SarImage, ShaderParams, analytic_shader, init_shader_weights,
                    pedf_remap, render_features, shader_net)

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("mse", "laplacian", "normal", "edge", "floor")


@dataclass(frozen=True)
class LossWeights:
    mse: float = 1.0
    laplacian: float = 1.5
    normal: float = 0.02
    edge: float = 0.03
    floor: float = 0.4

    def __post_init__(self):
        if min(self.mse, self.laplacian, self.normal, self.edge, self.floor) < 0:
            raise ValidationError("loss weights must be nonnegative")


def _image(x) -> Tensor:
    return as_tensor(x.data if isinstance(x, SarImage) else x)


def _reduce(terms: Tensor, reduction: str) -> Tensor:
    if reduction == "sum":
        return terms.sum()
    if reduction == "mean":
        return terms.mean() if terms.size else terms.sum()
    raise ValidationError(f"unknown reduction {reduction!r}")


# ---------------------------------------------------------------------------
# Loss terms

def loss_mse(pred, label) -> Tensor:
    p, y = _image(pred), _image(label)
    if p.shape != y.shape:
        raise ShapeError(f"image shapes differ: {p.shape} vs {y.shape}")
    r = p - y
    return (r * r).mean()


def loss_laplacian(mesh: TriangleMesh, reduction: str = "sum") -> Tensor:
    """Sum over vertices of the distance from each vertex to its neighbors' centroid."""
    v = as_tensor(mesh.vertices)
    e = mesh.edges
    deg = np.bincount(e.ravel(), minlength=mesh.n_vertices)
    if (deg == 0).any():
        raise TopologyError(f"isolated vertex {int(np.flatnonzero(deg == 0)[0])}")
    src = np.concatenate([e[:, 0], e[:, 1]])
    dst = np.concatenate([e[:, 1], e[:, 0]])
    centroid = ad.segment_sum(ad.index(v, dst), src, mesh.n_vertices) * (1.0 / deg[:, None])
    diff = centroid - v
    # tiny floor keeps the gradient bounded where a vertex sits on its centroid
    lengths = ad.sqrt((diff * diff).sum(axis=1) + 1e-30)
    return _reduce(lengths, reduction)


def loss_normal_consistency(mesh: TriangleMesh, reduction: str = "sum") -> Tensor:
    """Sum of ``1 - n_a . n_b`` over interior edges; boundary edges are skipped."""
    pairs = mesh.edge_faces
    n = face_normals_tensor(mesh.vertices, mesh.faces, eps=1e-12)
    cos = (ad.index(n, pairs[:, 0]) * ad.index(n, pairs[:, 1])).sum(axis=1)
    return _reduce(1.0 - cos, reduction)


def loss_edge_length(mesh: TriangleMesh, reduction: str = "sum") -> Tensor:
    """Sum of squared deviations of edge lengths from their mean."""
    v = as_tensor(mesh.vertices)
    e = mesh.edges
    if len(e) == 0:
        raise TopologyError("mesh has no edges")
    d = ad.index(v, e[:, 1]) - ad.index(v, e[:, 0])
    length = ad.sqrt((d * d).sum(axis=1))
    dev = length.mean() - length
    return _reduce(dev * dev, reduction)


@dataclass(frozen=True)
class FloorView:
    """Bottom-up camera for the floor-plane term: ``distance`` meters below z = 0."""

    distance: float = 10.0
    resolution: int = 64
    half_extent: float = 4.8


def loss_floor_plane(mesh: TriangleMesh, view: FloorView = FloorView()) -> Tensor:
    """Mean of ``(r - Z)^2`` over pixels covered in a bottom-up depth buffer.

    Z is distance from a camera ``r`` below the floor, so ``r - Z`` is minus
    the height of the lowest surface above each pixel.
    """
    extent = SceneExtent(view.half_extent, view.half_extent, -view.distance, view.distance)
    ndc = bottom_up_ndc(mesh.vertices, extent, view.distance)
    cfg = RasterConfig(view.resolution, view.resolution, sigma=0.0, faces_per_pixel=1)
    fr = rasterize(ndc, mesh.faces, cfg)
    covered = fr.covered().ravel()
    if not covered.any():
        warnings.warn("floor-plane view has no coverage", RuntimeWarning, stacklevel=2)
        return Tensor(np.zeros(()))
    z = depth_buffer(fr, far=0.0).reshape(-1)
    h = view.distance - ad.index(z, np.flatnonzero(covered))
    return (h * h).mean()


def loss_terms(pred, label, mesh: TriangleMesh, floor: FloorView = FloorView(),
               reduction: str = "sum") -> dict[str, Tensor]:
    return {
        "mse": loss_mse(pred, label),
        "laplacian": loss_laplacian(mesh, reduction),
        "normal": loss_normal_consistency(mesh, reduction),
        "edge": loss_edge_length(mesh, reduction),
        "floor": loss_floor_plane(mesh, floor),
    }


def combine(terms: dict[str, Tensor], weights: LossWeights) -> Tensor:
    total = Tensor(np.zeros(()))
    for name in LOSS_COLUMNS:
        w = getattr(weights, name)
        if w:
            total = total + terms[name] * w
    return total


def loss_total(pred, label, mesh: TriangleMesh, weights: LossWeights = LossWeights(),
               floor: FloorView = FloorView(), reduction: str = "sum") -> Tensor:
    return combine(loss_terms(pred, label, mesh, floor, reduction), weights)


# ---------------------------------------------------------------------------
# Optimizers.  State is a plain dict so callers can checkpoint it.

def _check_finite(grads):
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter {i}; step aborted")


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: dict | None,
             lr: float, momentum: float = 0.9, dampening: float = 0.9):
    """Momentum SGD; the buffer starts at g and then follows ``b = m b + (1 - d) g``."""
    _check_finite(grads)
    state = {} if state is None else state
    bufs = state.get("momentum_buffer")
    if momentum == 0:
        new_bufs = [np.asarray(g, dtype=np.float64) for g in grads]
    elif bufs is None:
        new_bufs = [np.array(g, dtype=np.float64) for g in grads]
    else:
        new_bufs = [momentum * b + (1.0 - dampening) * g for b, g in zip(bufs, grads)]
    new_params = [p - lr * b for p, b in zip(params, new_bufs)]
    return new_params, {"momentum_buffer": new_bufs, "step": state.get("step", 0) + 1}


def adamw_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: dict | None,
               lr: float, betas: tuple[float, float] = (0.9, 0.999), weight_decay: float = 0.01,
               eps: float = 1e-8):
    """Adam with bias correction and decoupled weight decay."""
    _check_finite(grads)
    b1, b2 = betas
    state = {} if state is None else state
    t = state.get("step", 0) + 1
    m = state.get("exp_avg") or [np.zeros_like(p) for p in params]
    v = state.get("exp_avg_sq") or [np.zeros_like(p) for p in params]
    m = [b1 * mi + (1 - b1) * g for mi, g in zip(m, grads)]
    v = [b2 * vi + (1 - b2) * g * g for vi, g in zip(v, grads)]
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    new_params = [p * (1 - lr * weight_decay) - lr * (mi / c1) / (np.sqrt(vi / c2) + eps)
                  for p, mi, vi in zip(params, m, v)]
    return new_params, {"step": t, "exp_avg": m, "exp_avg_sq": v}


def linear_lr(epoch: int, epochs: int, start: float = 2e-4, end: float = 2e-5) -> float:
    """Per-epoch linear decay, ``start`` at epoch 0 and ``end`` at the final epoch."""
    if epochs <= 1:
        return start
    frac = min(max(epoch, 0), epochs - 1) / (epochs - 1)
    return start + (end - start) * frac


# ---------------------------------------------------------------------------
# Shader training

def _as_pair_arrays(pairs) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    for feats, label in pairs:
        xs.append(feats.numpy() if isinstance(feats, FeatureMaps) else np.asarray(feats, dtype=np.float64))
        ys.append(label.array if isinstance(label, SarImage) else np.asarray(label, dtype=np.float64))
    return np.stack(xs), np.stack(ys)


def shader_l1(weights: dict, x: np.ndarray, y: np.ndarray, batch_size: int = 16) -> float:
    total = 0.0
    for i in range(0, len(x), batch_size):
        out = shader_net(x[i:i + batch_size], weights).data
        total += np.abs(out - y[i:i + batch_size]).sum()
    return total / y.size


@dataclass
class ShaderTrainResult:
    weights: dict
    train_l1: list[float] = field(default_factory=list)
    val_l1: list[float] = field(default_factory=list)
    best_epoch: int = -1

    @property
    def best_val_l1(self) -> float:
        return self.val_l1[self.best_epoch] if self.val_l1 else float("nan")


def train_shader(train, val=None, epochs: int = 50, batch_size: int = 4, seed: int = 0,
                 init: str = "random", lr_start: float = 2e-4, lr_end: float = 2e-5,
                 weight_decay: float = 0.01, patience: int = 10, weights: dict | None = None,
                 on_epoch: Callable | None = None) -> ShaderTrainResult:
    """Fit the conv shader to (features, label) pairs with L1 loss and AdamW.

    The learning rate decays linearly per epoch.  With validation data the
    best-validation weights are returned and training stops after
    ``patience`` epochs without improvement.
    """
    if len(train) == 0:
        raise ContractError("empty training set")
    x, y = _as_pair_arrays(train)
    xv, yv = _as_pair_arrays(val) if val else (None, None)
    rng = np.random.default_rng(seed)
    w = weights if weights is not None else init_shader_weights(init, seed=seed)
    names = sorted(w)
    params = [np.asarray(w[k], dtype=np.float64) for k in names]
    state = None
    result = ShaderTrainResult(weights=dict(zip(names, params)))
    best, stale = np.inf, 0
    for epoch in range(epochs):
        lr = linear_lr(epoch, epochs, lr_start, lr_end)
        order = rng.permutation(len(x))
        running = 0.0
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            leaves = [Tensor(p, requires_grad=True) for p in params]
            out = shader_net(x[idx], dict(zip(names, leaves)))
            loss = ad.tabs(out - y[idx]).mean()
            g = ad.backward(loss)
            params, state = adamw_step(params, [g.get(t, np.zeros_like(t.data)) for t in leaves],
                                       state, lr, weight_decay=weight_decay)
            running += float(loss.data) * len(idx)
        result.train_l1.append(running / len(x))
        current = dict(zip(names, params))
        if xv is None:
            result.weights, result.best_epoch = current, epoch
        else:
            v = shader_l1(current, xv, yv)
            result.val_l1.append(v)
            if v < best:
                best, stale = v, 0
                result.weights, result.best_epoch = current, epoch
            else:
                stale += 1
        if on_epoch is not None:
            on_epoch(epoch, result)
        if xv is not None and stale >= patience:
            break
    return result


# ---------------------------------------------------------------------------
# Reconstruction

@dataclass(frozen=True)
class LevelSchedule:
    iterations: int
    batch_size: int
    sigma: float

    def __post_init__(self):
        if self.iterations <= 0 or self.batch_size <= 0 or self.sigma < 0:
            raise ValidationError("level needs iterations > 0, batch_size > 0, sigma >= 0")


@dataclass(frozen=True)
class ReconSchedule:
    levels: tuple[LevelSchedule, ...] = (LevelSchedule(1080, 2, 1e-3), LevelSchedule(540, 4, 2.5e-4))
    lr: float = 1.0
    momentum: float = 0.9
    dampening: float = 0.9
    weights: LossWeights = LossWeights()
    floor: FloorView = FloorView()
    regularizer_reduction: str = "mean"
    dome_radius: float = 2.0
    # the four mesh regularizers see vertices divided by this length (meters);
    # None keeps meters
    regularizer_scale: float | None = None

    def with_iterations(self, *counts) -> "ReconSchedule":
        levels = tuple(LevelSchedule(n, lv.batch_size, lv.sigma) if n is not None else lv
                       for lv, n in zip(self.levels, counts + (None,) * len(self.levels)))
        return replace(self, levels=levels)


Shader = Callable[[FeatureMaps], SarImage]


def analytic(params: ShaderParams = ShaderParams()) -> Shader:
    return lambda f: analytic_shader(f, params)


@dataclass
class ReconResult:
    mesh: TriangleMesh
    history: list[dict]

    def write_csv(self, sink) -> None:
        write_loss_csv(self.history, sink)


def write_loss_csv(history: list[dict], sink) -> None:
    if isinstance(sink, (str, os.PathLike)):
        with open(sink, "w", newline="") as fh:
            return write_loss_csv(history, fh)
    w = csv.writer(sink, lineterminator="\n")
    w.writerow(("iter",) + LOSS_COLUMNS + ("total",))
    for row in history:
        w.writerow([row["iter"]] + [repr(float(row[k])) for k in LOSS_COLUMNS + ("total",)])


def _batches(n_labels: int, batch_size: int, rng: np.random.Generator):
    """Endless stream of batches drawn without replacement from reshuffled passes."""
    if batch_size > n_labels:
        raise ValidationError(f"batch size {batch_size} exceeds the {n_labels} labels")
    pool: list[int] = []
    while True:
        if len(pool) < batch_size:
            pool = pool + list(rng.permutation(n_labels))
        batch, pool = pool[:batch_size], pool[batch_size:]
        yield batch


def render_prediction(mesh: TriangleMesh, pose: AspectPose, label: SarImage, config: RasterConfig,
                      shader: Shader, dynamic_range_db: float = 30.0) -> SarImage:
    """Render and shade at the label's pose and size; remap with the label's threshold."""
    h, w = label.shape
    extent = SceneExtent.for_image(h, w, label.spacing)
    feats = render_features(mesh, pose, config.replace(height=h, width=w), extent)
    pred = shader(feats)
    if not label.remapped:
        return pred
    return pedf_remap(pred, label.pedf_threshold, dynamic_range_db)


def reconstruct(labels: Sequence[tuple[SarImage, AspectPose]], schedule: ReconSchedule = ReconSchedule(),
                shader: Shader | None = None, seed: int = 0, config: RasterConfig = RasterConfig(),
                init_mesh: TriangleMesh | None = None, checkpoint_dir=None, checkpoint_every: int = 0,
                on_iteration: Callable | None = None, dynamic_range_db: float = 30.0) -> ReconResult:
    """Fit a mesh to labelled SAR images by gradient descent through the renderer.

    Starts from a grounded dome, runs each schedule level with its own
    batch size and blur radius, and subdivides between levels.  Only the
    vertex positions are optimized.
    """
    if not labels:
        raise ContractError("no labels")
    shader = shader or analytic()
    rng = np.random.default_rng(seed)
    mesh = init_mesh if init_mesh is not None else make_dome(schedule.dome_radius)
    history: list[dict] = []
    it = 0
    for li, level in enumerate(schedule.levels):
        if li > 0:
            mesh = subdivide_midpoint(mesh)
        cfg = config.replace(sigma=level.sigma)
        batches = _batches(len(labels), level.batch_size, rng)
        verts = mesh.verts.copy()
        state = None
        for _ in range(level.iterations):
            batch = next(batches)
            v = Tensor(verts, requires_grad=True)
            m = mesh.with_vertices(v)
            reg, floor = m, schedule.floor
            if schedule.regularizer_scale:
                k = 1.0 / schedule.regularizer_scale
                reg = mesh.with_vertices(v * k)
                floor = FloorView(floor.distance * k, floor.resolution, floor.half_extent * k)
            mse = Tensor(np.zeros(()))
            for j in batch:
                label, pose = labels[j]
                pred = render_prediction(m, pose, label, cfg, shader, dynamic_range_db)
                mse = mse + loss_mse(pred, label)
            terms = {"mse": mse * (1.0 / len(batch)),
                     "laplacian": loss_laplacian(reg, schedule.regularizer_reduction),
                     "normal": loss_normal_consistency(reg, schedule.regularizer_reduction),
                     "edge": loss_edge_length(reg, schedule.regularizer_reduction),
                     "floor": loss_floor_plane(reg, floor)}
            total = combine(terms, schedule.weights)
            if not np.isfinite(total.data):
                poses = ", ".join(f"({labels[j][1].azimuth:g}, {labels[j][1].elevation:g})" for j in batch)
                raise NumericError(f"loss is not finite at iteration {it} (level {li + 1}, poses {poses})")
            g = ad.backward(total).get(v, np.zeros_like(verts))
            try:
                (verts,), state = sgd_step([verts], [g], state, schedule.lr,
                                           schedule.momentum, schedule.dampening)
            except NumericError as exc:
                raise NumericError(f"{exc} at iteration {it} (level {li + 1})") from None
            row = {"iter": it, **{k: float(t.data) for k, t in terms.items()}, "total": float(total.data)}
            history.append(row)
            if on_iteration is not None:
                on_iteration(row)
            it += 1
            if checkpoint_dir and checkpoint_every and it % checkpoint_every == 0:
                write_obj(mesh.with_vertices(verts), os.path.join(checkpoint_dir, f"mesh_{it:05d}.obj"))
        mesh = mesh.with_vertices(verts)
    return ReconResult(TriangleMesh(mesh.verts.copy(), mesh.faces.copy()), history)
