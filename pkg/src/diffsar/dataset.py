"""Synthetic label generation and loading shared by the CLI and the test suites."""
from __future__ import annotations

from pathlib import Path
from typing import Callable

import numpy as np

from .config import DatasetManifest, ManifestRecord, RunConfig
from .geometry import TriangleMesh
from .raster import RasterConfig
from .sarcam import AspectPose, SceneExtent
from .shade import (FeatureMaps, SarImage, analytic_shader, augment, learned_shader_forward,
                    load_shader_weights, pedf_remap, pedf_threshold, read_sarf, render_features,
                    write_png, write_sarf)

SHADER_SIGMAS = (0.0, 1e-5, 1e-4, 1e-3)


def pose_seed(seed: int, index: int) -> int:
    """Independent per-image RNG seed derived from the run seed."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def make_shader(cfg: RunConfig) -> Callable[[FeatureMaps], SarImage]:
    if cfg.shader == "learned":
        weights = load_shader_weights(cfg.shader_weights)
        return lambda f: learned_shader_forward(f, weights, spacing=cfg.spacing)
    params = cfg.shader_params
    return lambda f: analytic_shader(f, params, spacing=cfg.spacing)


def scene_extent(cfg: RunConfig) -> SceneExtent:
    return SceneExtent.for_image(cfg.height, cfg.width, cfg.spacing)


def render_label(mesh: TriangleMesh, pose: AspectPose, cfg: RunConfig, seed: int,
                 shader=None) -> tuple[SarImage, SarImage]:
    """(linear, remapped) label for one pose: render, shade, augment, remap."""
    shader = shader or make_shader(cfg)
    feats = render_features(mesh, pose, RasterConfig(cfg.height, cfg.width, sigma=cfg.label_sigma),
                            scene_extent(cfg))
    linear = SarImage(shader(feats).array, spacing=cfg.spacing)
    if cfg.noise:
        linear = augment(linear, cfg.noise_config, seed=seed)
    else:
        linear.noise_branch = "none"
    T = pedf_threshold(linear.array, cfg.pedf_factor)
    remapped = pedf_remap(linear, T, cfg.dynamic_range_db)
    linear.pedf_threshold = T
    return linear, SarImage(remapped.array, cfg.spacing, True, linear.noise_branch, T)


def generate_dataset(mesh: TriangleMesh, cfg: RunConfig, out_dir, object_id: str = "object") -> DatasetManifest:
    """Write one SARF (linear) and one PNG (remapped) per pose plus ``manifest.json``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    shader = make_shader(cfg)
    records = []
    for i, pose in enumerate(cfg.pose_grid()):
        seed = pose_seed(cfg.seed, i)
        linear, remapped = render_label(mesh, pose, cfg, seed, shader)
        stem = f"images/{object_id}_{i:04d}"
        write_sarf(linear, out / f"{stem}.sarf")
        write_png(remapped.array, out / f"{stem}.png")
        records.append(ManifestRecord(f"{stem}.sarf", pose.azimuth, pose.elevation, cfg.label_sigma,
                                      linear.noise_branch, seed, object_id, linear.pedf_threshold,
                                      cfg.spacing, f"{stem}.png"))
    manifest = DatasetManifest(records, str(out))
    manifest.write(out / "manifest.json")
    return manifest


def load_labels(manifest: DatasetManifest, dynamic_range_db: float = 30.0) -> list[tuple[SarImage, AspectPose]]:
    """Remapped label images with their poses, using each record's stored threshold."""
    labels = []
    for i, rec in enumerate(manifest.records):
        path = manifest.path_of(rec)
        if not path.exists():
            raise FileNotFoundError(f"manifest row {i}: missing image file {rec.image}")
        lin = read_sarf(path)
        r = pedf_remap(lin, rec.pedf_threshold, dynamic_range_db)
        labels.append((SarImage(r.array, rec.spacing, True, rec.noise_branch, rec.pedf_threshold), rec.pose))
    return labels


def shader_pairs(mesh: TriangleMesh, poses, cfg: RunConfig, sigmas=SHADER_SIGMAS, shader=None):
    """(features, target) pairs: every pose rendered at each blur radius.

    Targets come from the analytic shader applied to the same feature maps.
    """
    shader = shader or (lambda f: analytic_shader(f, cfg.shader_params))
    extent = scene_extent(cfg)
    pairs = []
    for pose in poses:
        for s in sigmas:
            f = render_features(mesh, pose, RasterConfig(cfg.height, cfg.width, sigma=s), extent)
            pairs.append((f.numpy(), shader(f).array))
    return pairs
