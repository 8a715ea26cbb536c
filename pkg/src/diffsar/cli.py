"""Command-line entry point: ``diffsar <command> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import DatasetManifest, RunConfig, resolve_config
from .dataset import generate_dataset, load_labels, make_shader, scene_extent, shader_pairs
from .errors import DiffSarError, NumericError
from .geometry import load_obj, make_dome, voxelize, default_grid, write_obj, write_vox
from .metrics import compare_grids
from .optimize import (FloorView, LevelSchedule, LossWeights, ReconSchedule, reconstruct,
                       train_shader, write_loss_csv)
from .raster import RasterConfig
from .sarcam import AspectPose
from .shade import pedf_remap, pedf_threshold, render_features, save_shader_weights, write_png, write_sarf

log = logging.getLogger("diffsar")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON config file (default: $DIFFSAR_CONFIG)")
    p.add_argument("--seed", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--spacing", type=float, help="pixel spacing in meters")


def _shader_opts(p):
    p.add_argument("--shader", choices=("analytic", "learned"))
    p.add_argument("--shader-weights")
    p.add_argument("--background", type=float, help="analytic shader background level")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="diffsar", description="Differentiable SAR rendering and mesh reconstruction.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dataset-gen", help="render a labelled SAR dataset from a mesh")
    _common(p)
    _shader_opts(p)
    p.add_argument("--mesh", required=True, help="OBJ file of the target object")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--object-id", default=None)
    p.add_argument("--views", type=int, help="evenly spaced subset of the pose grid")
    p.add_argument("--no-noise", dest="noise", action="store_const", const=False)
    p.add_argument("--label-sigma", type=float)

    p = sub.add_parser("reconstruct", help="fit a mesh to a dataset")
    _common(p)
    _shader_opts(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--iterations-l1", type=int)
    p.add_argument("--iterations-l2", type=int)
    p.add_argument("--truth", help="ground-truth OBJ; adds a metric report")
    p.add_argument("--checkpoint-every", type=int, default=0)

    p = sub.add_parser("eval", help="voxel metrics between two meshes")
    _common(p)
    p.add_argument("mesh_a")
    p.add_argument("mesh_b")
    p.add_argument("--resolution", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--json", help="write the report as JSON")
    p.add_argument("--csv", help="write the report as a CSV row")
    p.add_argument("--vox-dir", help="also write both VOX grids here")

    p = sub.add_parser("render", help="render one pose to PNG, SARF and a feature figure")
    _common(p)
    _shader_opts(p)
    p.add_argument("mesh")
    p.add_argument("--azimuth", type=float, required=True)
    p.add_argument("--elevation", type=float, required=True)
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--out", required=True, help="output path prefix")

    p = sub.add_parser("gradcheck", help="finite-difference check of every primitive")
    p.add_argument("--all", action="store_true", help="include the full render pipeline")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epsilon", type=float, default=1e-6)
    p.add_argument("--tolerance", type=float, default=1e-2)

    p = sub.add_parser("train-shader", help="fit the conv shader to analytic-shader targets")
    _common(p)
    p.add_argument("--mesh", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--views", type=int)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--holdout-every", type=int, default=4, help="every k-th pose is held out")
    p.add_argument("--init", choices=("random", "identity", "zero"), default="random",
                   help="initial shader weights")
    return ap


def _config(args, **extra) -> RunConfig:
    keys = ("seed", "height", "width", "spacing", "shader", "shader_weights", "background", "views",
            "noise", "label_sigma", "iterations_l1", "iterations_l2", "window")
    cli = {k: getattr(args, k, None) for k in keys}
    res = getattr(args, "resolution", None)
    if res is not None:
        cli["voxel_resolution"] = res
    cli.update(extra)
    return resolve_config(cli, getattr(args, "config", None))


def cmd_dataset_gen(args) -> int:
    cfg = _config(args)
    mesh = load_obj(args.mesh)
    object_id = args.object_id or Path(args.mesh).stem
    man = generate_dataset(mesh, cfg, args.out, object_id)
    print(f"wrote {len(man.records)} images and {Path(args.out) / 'manifest.json'}")
    return EXIT_OK


def schedule_from(cfg: RunConfig) -> ReconSchedule:
    return ReconSchedule(levels=(LevelSchedule(cfg.iterations_l1, cfg.batch_l1, cfg.sigma_l1),
                                 LevelSchedule(cfg.iterations_l2, cfg.batch_l2, cfg.sigma_l2)),
                         lr=cfg.lr, momentum=cfg.momentum, dampening=cfg.dampening,
                         regularizer_reduction=cfg.regularizer_reduction, dome_radius=cfg.dome_radius,
                         regularizer_scale=cfg.regularizer_scale)


def cmd_reconstruct(args) -> int:
    from .plotting import plot_loss_curve
    from .metrics import compare_meshes
    cfg = _config(args)
    man = DatasetManifest.load(args.manifest)
    labels = load_labels(man, cfg.dynamic_range_db)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoints" if args.checkpoint_every else None
    if ckpt:
        ckpt.mkdir(exist_ok=True)
    t0 = time.perf_counter()
    res = reconstruct(labels, schedule_from(cfg), make_shader(cfg), seed=cfg.seed,
                      config=RasterConfig(cfg.height, cfg.width), checkpoint_dir=ckpt,
                      checkpoint_every=args.checkpoint_every, dynamic_range_db=cfg.dynamic_range_db)
    log.info("reconstruction took %.1f s", time.perf_counter() - t0)
    write_obj(res.mesh, out / "mesh.obj")
    write_loss_csv(res.history, out / "loss.csv")
    plot_loss_curve(res.history, out / "loss.png")
    if args.truth:
        report = compare_meshes(res.mesh, load_obj(args.truth), cfg.voxel_resolution, cfg.window)
        report.write_json(out / "metrics.json")
        print(report.to_json())
    print(f"wrote {out / 'mesh.obj'}, {out / 'loss.csv'}, {out / 'loss.png'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    a, b = load_obj(args.mesh_a), load_obj(args.mesh_b)
    grid = default_grid(a, b, resolution=cfg.voxel_resolution)
    va, vb = voxelize(a, grid, seed=cfg.seed), voxelize(b, grid, seed=cfg.seed)
    report = compare_grids(va, vb, cfg.window)
    if args.vox_dir:
        Path(args.vox_dir).mkdir(parents=True, exist_ok=True)
        write_vox(va, Path(args.vox_dir) / "a.vox")
        write_vox(vb, Path(args.vox_dir) / "b.vox")
    if args.json:
        report.write_json(args.json)
    if args.csv:
        report.write_csv(args.csv)
    print(report.to_json())
    return EXIT_OK


def cmd_render(args) -> int:
    from .plotting import plot_features
    cfg = _config(args)
    mesh = load_obj(args.mesh)
    pose = AspectPose(args.azimuth, args.elevation)
    feats = render_features(mesh, pose, RasterConfig(cfg.height, cfg.width, sigma=args.sigma), scene_extent(cfg))
    image = make_shader(cfg)(feats)
    lin = image.array
    T = pedf_threshold(lin, cfg.pedf_factor)
    remapped = pedf_remap(lin, T, cfg.dynamic_range_db).array
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    write_sarf(lin, f"{prefix}.sarf")
    write_png(remapped, f"{prefix}.png")
    write_png(feats.silhouette.data, f"{prefix}_silhouette.png")
    plot_features(feats, lin, f"{prefix}_features.png",
                  title=f"azimuth {pose.azimuth:g} deg, elevation {pose.elevation:g} deg")
    print(json.dumps({"silhouette_pixels": int((feats.silhouette.data > 0.5).sum()),
                      "max_magnitude": float(lin.max()), "pedf_threshold": T}))
    return EXIT_OK


def pipeline_problems(seed: int = 0, n_configs: int = 5):
    """Test problems for the full chain vertices -> features -> shader -> remap -> MSE."""
    from .optimize import loss_mse
    from .sarcam import SceneExtent

    def make(rng):
        problems = []
        for _ in range(n_configs):
            mesh = make_dome(1.0)
            v0 = mesh.verts + rng.normal(scale=0.05, size=mesh.verts.shape)
            pose = AspectPose(rng.uniform(0, 360), rng.uniform(15, 60))
            cfg = RasterConfig(24, 24, sigma=1e-3)
            extent = SceneExtent.for_image(24, 24, 0.15)
            target = rng.uniform(0, 0.3, size=(24, 24))

            def f(v, mesh=mesh, pose=pose, cfg=cfg, extent=extent, target=target):
                feats = render_features(mesh.with_vertices(v), pose, cfg, extent)
                from .shade import analytic_shader
                return loss_mse(pedf_remap(analytic_shader(feats), threshold=0.5), target)
            problems.append((v0, f))
        return problems
    return {"pipeline": make}


def cmd_gradcheck(args) -> int:
    extra = pipeline_problems(args.seed) if args.all else None
    report = ad.gradcheck_all(seed=args.seed, epsilon=args.epsilon, extra=extra)
    failed = 0
    for name, err in sorted(report.items()):
        ok = err <= args.tolerance
        failed += not ok
        print(f"{name:14s} {err:.3e} {'PASS' if ok else 'FAIL'}")
    print(f"{len(report) - failed}/{len(report)} within {args.tolerance:g}")
    return EXIT_OK if failed == 0 else EXIT_NUMERIC


def cmd_train_shader(args) -> int:
    from .plotting import plot_shader_training
    cfg = _config(args)
    mesh = load_obj(args.mesh)
    poses = cfg.pose_grid()
    held = [p for i, p in enumerate(poses) if i % args.holdout_every == args.holdout_every - 1]
    train = [p for i, p in enumerate(poses) if i % args.holdout_every != args.holdout_every - 1]
    res = train_shader(shader_pairs(mesh, train, cfg), shader_pairs(mesh, held, cfg) or None,
                       epochs=args.epochs, batch_size=args.batch_size, seed=cfg.seed, init=args.init)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_shader_weights(res.weights, out / "shader.npz")
    history = [{"epoch": i, "train_l1": t, "val_l1": res.val_l1[i] if i < len(res.val_l1) else ""}
               for i, t in enumerate(res.train_l1)]
    with open(out / "training.csv", "w") as fh:
        fh.write("epoch,train_l1,val_l1\n")
        for row in history:
            fh.write(f"{row['epoch']},{row['train_l1']!r},{row['val_l1']!r}\n")
    plot_shader_training(res.train_l1, res.val_l1, out / "training.png")
    print(json.dumps({"best_epoch": res.best_epoch, "best_val_l1": res.best_val_l1,
                      "epochs_run": len(res.train_l1)}))
    return EXIT_OK


COMMANDS = {
    "dataset-gen": cmd_dataset_gen,
    "reconstruct": cmd_reconstruct,
    "eval": cmd_eval,
    "render": cmd_render,
    "gradcheck": cmd_gradcheck,
    "train-shader": cmd_train_shader,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DiffSarError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO if isinstance(exc, OSError) else EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
