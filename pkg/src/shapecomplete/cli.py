"""Command-line entry points: dataset generation, two-phase training,
completion, evaluation and preview rendering.

Every command is reproducible: (inputs, config, seed) fully determine the
outputs.  Flags override config-file values.  Exit codes: 0 ok, 2 config
error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from . import fileio
from .autodiff import NumericError
from .completion import complete_shape
from .dataset import (
    generate_training_set,
    load_dataset,
    load_manifest,
    save_dataset,
    split_by_mesh,
)
from .metrics import EvalReport, downsample_baseline
from .nets import (
    GlobalNetConfig,
    LocalNetConfig,
    NetworkBundle,
    load_models,
    save_models,
)
from .scansim import ScanConfig
from .seeding import derive_seed
from .shapes import FAMILIES, generate_mesh_corpus
from .training import LossWeights, train_global, train_joint, write_history_csv
from .volumetric import (
    Bounds,
    FieldProfile,
    bounds_for_meshes,
    marching_cubes_array,
    sample_surface,
)

log = logging.getLogger(__name__)

DEFAULT_SEED = 20240701


class ConfigError(ValueError):
    pass


class CommandFailure(RuntimeError):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _load_config(path):
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as err:
        raise ConfigError(f"config file not found: {path}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file is not valid JSON: {err}") from err


def _merge(config, args, keys):
    """Config-file values with CLI flags winning when given."""
    merged = dict(config)
    for key in keys:
        val = getattr(args, key.replace("-", "_"), None)
        if val is not None:
            merged[key] = val
    return merged


class OutputTracker:
    """Removes partially written outputs when a command fails."""

    def __init__(self):
        self.paths = []

    def add(self, path):
        self.paths.append(Path(path))
        return path

    def cleanup(self):
        for p in self.paths:
            if p.is_dir():
                shutil.rmtree(p, ignore_errors=True)
            elif p.exists():
                p.unlink()


def _scan_config(cfg, profile, edge):
    vs = edge / profile.fine
    res = cfg.get("camera_resolution") or profile.depth_res
    return ScanConfig(
        view_range=tuple(cfg.get("view_range", (3, 5))),
        granularities=tuple(cfg.get("granularities", (profile.depth_res // 10,
                                                      profile.depth_res // 4))),
        fractions=tuple(cfg.get("fractions", (0.12, 0.15))),
        sigma=cfg.get("sigma_voxels", 0.3) * vs,
        camera_resolution=res)


def cmd_gen_data(args, out):
    cfg = _merge(_load_config(args.config), args,
                 ["seed", "profile_g", "count", "scans", "n_patches", "threads"])
    seed = int(cfg.get("seed", DEFAULT_SEED))
    g = int(cfg.get("profile_g", 16))
    count = int(cfg.get("count", 10))
    scans = int(cfg.get("scans", 3))
    n_patches = int(cfg.get("n_patches", 50))
    families = tuple(cfg.get("families", FAMILIES))
    heldout_fraction = float(cfg.get("heldout_fraction", 0.2))
    profile = FieldProfile(g=g)
    out_dir = Path(args.out)
    if out_dir.exists() and any(out_dir.iterdir()):
        raise CommandFailure(3, f"output directory {out_dir} is not empty")
    out.add(out_dir)
    corpus = generate_mesh_corpus(count, seed=derive_seed(seed, "meshes"),
                                  families=families)
    meshes = [m for _, m in corpus]
    edge, bounds_list = bounds_for_meshes(meshes, profile.fine)
    scan_cfg = _scan_config(cfg.get("scan", {}), profile, edge)
    samples = generate_training_set(
        meshes, scan_cfg, profile, scans_per_mesh=scans,
        seed=derive_seed(seed, "scans"), n_patches=n_patches,
        bounds_list=bounds_list, threads=int(cfg.get("threads", 1)))
    if not samples:
        raise CommandFailure(3, "no usable scans were generated")
    _, _, held_ids = split_by_mesh(samples, heldout_fraction,
                                   seed=derive_seed(seed, "split"))
    save_dataset(out_dir, meshes, samples, profile, scan_cfg, seed, edge,
                 held_mesh_ids=held_ids)
    print(f"dataset: {len(meshes)} meshes, {len(samples)} samples -> {out_dir}")
    return 0


def cmd_train(args, out):
    cfg = _merge(_load_config(args.config), args,
                 ["seed", "epochs", "lr", "threads"])
    seed = int(cfg.get("seed", DEFAULT_SEED))
    data_dir = Path(args.data)
    if not data_dir.exists():
        raise CommandFailure(3, f"dataset directory not found: {data_dir}")
    meshes, samples, profile, manifest = load_dataset(data_dir)
    held_ids = set(manifest["held_mesh_ids"])
    train_samples = [s for s in samples if s.mesh_id not in held_ids]
    held_samples = [s for s in samples if s.mesh_id in held_ids]
    weights = LossWeights(
        lambda1=float(cfg.get("lambda1", 0.2)),
        lambda2=float(cfg.get("lambda2", 2.0 / 3.0)),
        lambda3=float(cfg.get("lambda3", 0.001)),
        lr=float(cfg.get("lr", 0.0001)),
        epochs=int(cfg.get("epochs", 20)),
        auc_degree=int(cfg.get("auc_degree", 5)),
        max_pairs=int(cfg.get("max_pairs", 4096)))
    gcfg = GlobalNetConfig(profile=profile,
                           **{k: tuple(v) if isinstance(v, list) else v
                              for k, v in cfg.get("global_net", {}).items()})
    lcfg = LocalNetConfig(profile=profile,
                          **{k: tuple(v) if isinstance(v, list) else v
                             for k, v in cfg.get("local_net", {}).items()})
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    from .autodiff import fit_step_polynomial

    coeffs, fit_err = fit_step_polynomial(weights.auc_degree)
    gstore, gnet, hist1 = train_global(train_samples, gcfg, weights,
                                       seed=derive_seed(seed, "phase1"),
                                       heldout=held_samples or None)
    p1 = out.add(out_dir / "global_phase1.ckpt")
    save_models(p1, gstore, gcfg, None, auc_coeffs=coeffs, auc_fit_error=fit_err)
    store, gnet2, lnet, hist2 = train_joint(
        train_samples, gstore, gcfg, lcfg, weights,
        seed=derive_seed(seed, "phase2"), heldout=held_samples or None)
    p2 = out.add(out_dir / "joint.ckpt")
    save_models(p2, store, gcfg, lcfg, auc_coeffs=coeffs, auc_fit_error=fit_err)
    out.add(write_history_csv(out_dir / "training_log.csv", hist1 + hist2))
    last = (hist2 or hist1)[-1]
    print(f"trained: phase1 {len(hist1)} epochs, phase2 {len(hist2)} epochs, "
          f"final loss {last['loss']:.4f} -> {out_dir}")
    return 0


def _bounds_for_cloud(cloud, edge, fine):
    lo = cloud.points.min(axis=0)
    hi = cloud.points.max(axis=0)
    center = 0.5 * (lo + hi)
    return Bounds(origin=center - 0.5 * edge, edge=edge)


def cmd_complete(args, out):
    cfg = _merge(_load_config(args.config), args, ["seed", "max_iters"])
    seed = int(cfg.get("seed", DEFAULT_SEED))
    ckpt = Path(args.ckpt)
    if not ckpt.exists():
        raise CommandFailure(3, f"checkpoint not found: {ckpt}")
    store, gnet, lnet, manifest = load_models(ckpt)
    if lnet is None:
        raise CommandFailure(3, "checkpoint lacks the local network (run phase 2)")
    profile = gnet.cfg.profile
    cloud_path = Path(args.input)
    if not cloud_path.exists():
        raise CommandFailure(3, f"input cloud not found: {cloud_path}")
    cloud = fileio.load_cloud_ply(cloud_path)
    if args.data:
        edge = load_manifest(args.data)["edge"]
    elif cfg.get("edge"):
        edge = float(cfg["edge"])
    else:
        raise CommandFailure(2, "provide --data or an `edge` config value for scaling")
    bounds = _bounds_for_cloud(cloud, edge, profile.fine)
    models = NetworkBundle(gnet, lnet)
    result = complete_shape(cloud, models, profile, bounds,
                            max_iters=int(cfg.get("max_iters", 5)),
                            seed=derive_seed(seed, "complete"))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    out.add(fileio.save_cloud_ply(out_dir / "completed.ply", result.cloud))
    out.add(fileio.save_mesh_obj(out_dir / "completed.obj", result.mesh))
    diag_path = out.add(out_dir / "iterations.csv")
    with open(diag_path, "w") as fh:
        fh.write("iteration,boundary_points,patches,new_points\n")
        for row in result.diagnostics:
            fh.write(f"{row['iteration']},{row['boundary_points']},"
                     f"{row['patches']},{row['new_points']}\n")
    print(f"{result.status}: {len(cloud)} -> {len(result.cloud)} points -> {out_dir}")
    return 0


def cmd_eval(args, out):
    _load_config(args.config)
    true_cloud = fileio.load_cloud_ply(Path(args.true))
    completed = fileio.load_cloud_ply(Path(args.completed))
    if args.dm is not None:
        dm = float(args.dm)
    else:
        lo = true_cloud.points.min(axis=0)
        hi = true_cloud.points.max(axis=0)
        dm = float(np.linalg.norm(hi - lo))
    alpha = (args.alpha_factor if args.alpha_factor is not None else 0.001) * dm
    report = EvalReport(dm=dm, alpha=alpha)
    row = report.add(Path(args.completed).stem, true_cloud, completed)
    if args.out:
        out.add(report.write_csv(args.out))
    print(f"{row['completeness']:.2f}%/{row['normalized_distance']:.6f}")
    return 0


def cmd_render(args, out):
    data_dir = Path(args.data)
    if not data_dir.exists():
        raise CommandFailure(3, f"dataset directory not found: {data_dir}")
    meshes, samples, profile, manifest = load_dataset(data_dir)
    index = int(args.index)
    if not (0 <= index < len(samples)):
        raise CommandFailure(3, f"sample index {index} out of range")
    sample = samples[index]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for f, img in enumerate(sample.face_images):
        out.add(fileio.save_image_ppm(out_dir / f"face_{f}.ppm", img.color))
    out.add(fileio.save_cloud_ply(out_dir / "input.ply", sample.cloud))
    # coarse-structure isosurface previews: labels and, if given, a checkpoint
    vs = sample.coarse.voxel_size
    label_field = 0.5 - sample.labels_coarse
    mesh = marching_cubes_array(label_field, 0.0, sample.coarse.origin, vs)
    out.add(fileio.save_mesh_obj(out_dir / "labels_iso.obj", mesh))
    if args.ckpt:
        store, gnet, lnet, _ = load_models(Path(args.ckpt))
        probs = gnet.infer(sample.face_images, sample.coarse)
        field = 0.5 - probs.values[0]
        mesh = marching_cubes_array(field, 0.0, probs.origin, probs.voxel_size)
        out.add(fileio.save_mesh_obj(out_dir / "structure_iso.obj", mesh))
    print(f"rendered sample {index} -> {out_dir}")
    return 0


def cmd_baseline(args, out):
    """Coarse-grid baseline cloud for a ground-truth cloud (diagnostics)."""
    cloud = fileio.load_cloud_ply(Path(args.true))
    lo = cloud.points.min(axis=0)
    hi = cloud.points.max(axis=0)
    edge = float(args.edge) if args.edge else 1.15 * float(np.linalg.norm(hi - lo))
    center = 0.5 * (lo + hi)
    bounds = Bounds(origin=center - 0.5 * edge, edge=edge)
    base = downsample_baseline(cloud, int(args.g), bounds)
    out.add(fileio.save_cloud_ply(args.out, base))
    print(f"baseline: {len(base)} voxel centers -> {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="shapecomplete",
        description="High-resolution shape completion pipeline")
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a procedural training set")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--profile-g", type=int, dest="profile_g")
    p.add_argument("--count", type=int)
    p.add_argument("--scans", type=int)
    p.add_argument("--n-patches", type=int, dest="n_patches")
    p.add_argument("--threads", type=int)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="run both training phases on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--threads", type=int)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("complete", help="complete an incomplete point cloud")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="dataset dir providing the scale factor")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-iters", type=int, dest="max_iters")
    p.set_defaults(fn=cmd_complete)

    p = sub.add_parser("eval", help="score a completed cloud against truth")
    p.add_argument("--true", required=True)
    p.add_argument("--completed", required=True)
    p.add_argument("--out")
    p.add_argument("--config")
    p.add_argument("--dm", type=float)
    p.add_argument("--alpha-factor", type=float, dest="alpha_factor")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("render", help="export previews of a dataset sample")
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--ckpt")
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("baseline", help="emit the coarse voxel-center baseline")
    p.add_argument("--true", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--g", type=int, default=32)
    p.add_argument("--edge", type=float)
    p.set_defaults(fn=cmd_baseline)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    tracker = OutputTracker()
    try:
        return args.fn(args, tracker)
    except ConfigError as err:
        tracker.cleanup()
        print(f"error: 2: {err}", file=sys.stderr)
        return 2
    except CommandFailure as err:
        tracker.cleanup()
        print(f"error: {err.code}: {err}", file=sys.stderr)
        return err.code
    except (fileio.FormatError, FileNotFoundError, ValueError) as err:
        tracker.cleanup()
        print(f"error: 3: {err}", file=sys.stderr)
        return 3
    except (NumericError, FloatingPointError) as err:
        tracker.cleanup()
        print(f"error: 4: {err}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
