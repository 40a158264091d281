"""Training-set construction: scan simulation, field building, boundary
patch sampling, and the on-disk dataset layout.

A dataset directory holds a manifest, the ground-truth meshes, and one
subdirectory per sample with the incomplete cloud, the coarse input
field, coarse labels, six colored face images and the stacked patch
grids.  Everything is reproducible from (inputs, seed).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fileio
from .scansim import (
    DepthImage,
    ScanConfig,
    backproject,
    dodecahedron_viewpoints,
    face_depth_images,
    inject_holes,
    render_depth,
)
from .seeding import derive_seed
from .volumetric import (
    Bounds,
    FieldProfile,
    PointCloud,
    VolumeGrid,
    bounds_for_meshes,
    build_input_fields,
    crop_volume,
    detect_boundary,
    inside_labels,
)

log = logging.getLogger(__name__)

MIN_CLOUD_POINTS = 100
CANDIDATE_FACTOR = 4  # candidates oversampled before clustering


@dataclass
class PatchSample:
    values: np.ndarray   # (4, p, p, p) input crop
    labels: np.ndarray   # (p, p, p) binary inside labels
    center: np.ndarray   # (3,) fine-grid voxel coordinates


@dataclass
class TrainSample:
    mesh_id: int
    scan_id: int
    cloud: PointCloud
    face_images: list
    coarse: VolumeGrid
    labels_coarse: np.ndarray  # (g, g, g)
    patches: list
    bounds: Bounds
    views: list = field(default_factory=list)


def scan_cloud(mesh, bounds, scan_cfg, profile, seed):
    """One randomized virtual scan of a mesh -> (incomplete cloud, views)."""
    rng = np.random.default_rng(seed)
    lo, hi = mesh.bbox()
    diag = float(np.linalg.norm(hi - lo))
    centroid = 0.5 * (lo + hi)
    res = scan_cfg.camera_resolution or profile.depth_res
    cams = dodecahedron_viewpoints(centroid, radius=1.3 * diag, resolution=res)
    n_views = int(rng.integers(scan_cfg.view_range[0], scan_cfg.view_range[1] + 1))
    chosen = sorted(rng.choice(20, size=n_views, replace=False).tolist())
    views = [cams[i] for i in chosen]
    images = []
    for rank, cam in zip(chosen, views):
        img = render_depth(mesh, cam)
        images.append(inject_holes(img, scan_cfg, seed=derive_seed(seed, "holes", rank)))
    return backproject(images, views), chosen


def sample_boundary_patches(cloud, fine, fine_labels, profile, n_patches, seed):
    """Oversample candidate patch centers near missing-region boundaries,
    cluster them on the binary-occupancy channel, and crop the winners."""
    from .training import cluster_patches

    p = profile.patch
    if len(cloud) < 17:
        return []
    boundary_idx, _ = detect_boundary(cloud)
    if boundary_idx.size == 0:
        return []
    rng = np.random.default_rng(seed)
    n_cand = CANDIDATE_FACTOR * n_patches
    picks = rng.choice(boundary_idx, size=n_cand,
                       replace=boundary_idx.size < n_cand)
    voxels = fine.world_to_voxel(cloud.points[picks])
    jitter = rng.integers(-(p // 4), p // 4 + 1, size=voxels.shape)
    centers = np.clip(voxels + jitter, 0, profile.fine - 1)
    feats = np.stack([
        crop_volume(fine.values[3], c, p)[0].reshape(-1) > 0.5 for c in centers])
    k = min(n_patches, len(centers))
    medoids = cluster_patches(feats, k, seed=derive_seed(seed, "medoids"))
    out = []
    for idx in medoids:
        c = centers[idx]
        out.append(PatchSample(
            values=crop_volume(fine.values, c, p),
            labels=crop_volume(fine_labels, c, p)[0],
            center=c.copy()))
    return out


def _mesh_samples(mesh, bounds, m_id, scan_cfg, profile, scans_per_mesh, seed,
                  n_patches, keep_fine):
    coarse_lab = inside_labels(mesh, profile.g, bounds).values[0]
    fine_lab = inside_labels(mesh, profile.fine, bounds).values[0]
    out = []
    for s_id in range(scans_per_mesh):
        scan_seed = derive_seed(seed, "scan", m_id, s_id)
        cloud, views = scan_cloud(mesh, bounds, scan_cfg, profile, scan_seed)
        if len(cloud) < MIN_CLOUD_POINTS:
            log.warning("skipping degenerate scan mesh=%d scan=%d (%d points)",
                        m_id, s_id, len(cloud))
            continue
        fine, coarse = build_input_fields(cloud, profile, bounds)
        faces = face_depth_images(cloud, profile, bounds)
        patches = sample_boundary_patches(
            cloud, fine, fine_lab, profile, n_patches,
            seed=derive_seed(scan_seed, "patches"))
        sample = TrainSample(
            mesh_id=m_id, scan_id=s_id, cloud=cloud, face_images=faces,
            coarse=coarse, labels_coarse=coarse_lab, patches=patches,
            bounds=bounds, views=views)
        if keep_fine:
            sample.fine = fine
        out.append(sample)
    return out


def generate_training_set(meshes, scan_cfg, profile, scans_per_mesh, seed,
                          n_patches=50, bounds_list=None, keep_fine=False,
                          threads=1):
    """Build TrainSamples for every (mesh, scan) pair.

    Coarse labels come from the mesh on the g-grid, patch labels from the
    fine grid; degenerate scans (fewer than 100 points) are skipped and
    logged.  Ground-truth label grids are computed once per mesh.  Meshes
    are processed in parallel when `threads` > 1; per-task seeds and
    ordered collection keep the output identical at any thread count.
    """
    if bounds_list is None:
        _, bounds_list = bounds_for_meshes(meshes, profile.fine)
    jobs = [(mesh, bounds, m_id)
            for m_id, (mesh, bounds) in enumerate(zip(meshes, bounds_list))]
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(
                lambda j: _mesh_samples(j[0], j[1], j[2], scan_cfg, profile,
                                        scans_per_mesh, seed, n_patches, keep_fine),
                jobs))
    else:
        chunks = [_mesh_samples(m, b, i, scan_cfg, profile, scans_per_mesh,
                                seed, n_patches, keep_fine)
                  for m, b, i in jobs]
    return [s for chunk in chunks for s in chunk]


def split_by_mesh(samples, heldout_fraction=0.2, seed=0):
    """Deterministic train/held-out split on mesh identity (scans of one
    mesh never straddle the split)."""
    mesh_ids = sorted({s.mesh_id for s in samples})
    rng = np.random.default_rng(derive_seed(seed, "split"))
    order = rng.permutation(mesh_ids)
    n_held = max(1, int(round(heldout_fraction * len(mesh_ids))))
    held = set(order[:n_held].tolist())
    train = [s for s in samples if s.mesh_id not in held]
    out = [s for s in samples if s.mesh_id in held]
    return train, out, sorted(held)


def class_balance(samples):
    """Outside:inside voxel ratios of the coarse labels, both orientations."""
    inside = sum(float(s.labels_coarse.sum()) for s in samples)
    total = sum(s.labels_coarse.size for s in samples)
    outside = total - inside
    return {"outside_to_inside": outside / max(inside, 1.0),
            "inside_fraction": inside / total}


# ---------------------------------------------------------------------------
# on-disk layout
# ---------------------------------------------------------------------------

def save_dataset(root, meshes, samples, profile, scan_cfg, seed, edge,
                 held_mesh_ids=()):
    root = Path(root)
    (root / "meshes").mkdir(parents=True, exist_ok=True)
    (root / "samples").mkdir(parents=True, exist_ok=True)
    for i, mesh in enumerate(meshes):
        fileio.save_mesh_obj(root / "meshes" / f"mesh_{i:04d}.obj", mesh)
    for i, s in enumerate(samples):
        d = root / "samples" / f"sample_{i:04d}"
        d.mkdir(parents=True, exist_ok=True)
        fileio.save_cloud_ply(d / "cloud.ply", s.cloud)
        fileio.save_grid(d / "coarse.grid", s.coarse)
        fileio.save_grid(d / "labels_coarse.grid", VolumeGrid(
            s.labels_coarse[None], s.coarse.origin, s.coarse.voxel_size))
        for f, img in enumerate(s.face_images):
            fileio.save_image_ppm(d / f"face_{f}.ppm", img.color)
            fileio.save_depth_pgm(d / f"face_{f}.pgm", img.depth, 0.0, 1.0)
        if s.patches:
            pv = np.concatenate([p.values for p in s.patches], axis=0)
            pl = np.stack([p.labels for p in s.patches])
            fv = s.coarse.voxel_size / 8.0
            fileio.save_grid(d / "patches.grid",
                             VolumeGrid(pv, s.coarse.origin, fv))
            fileio.save_grid(d / "patch_labels.grid",
                             VolumeGrid(pl, s.coarse.origin, fv))
        meta = {"mesh_id": s.mesh_id, "scan_id": s.scan_id, "views": s.views,
                "n_patches": len(s.patches),
                "centers": [p.center.tolist() for p in s.patches],
                "bounds_origin": [float(v) for v in s.bounds.origin],
                "bounds_edge": float(s.bounds.edge)}
        (d / "sample.json").write_text(json.dumps(meta, sort_keys=True, indent=1))
    manifest = {
        "format": "shapecomplete-dataset-v1",
        "profile_g": profile.g,
        "truncation": profile.truncation,
        "edge": float(edge),
        "seed": int(seed),
        "scan": {"view_range": list(scan_cfg.view_range),
                 "granularities": list(scan_cfg.granularities),
                 "fractions": list(scan_cfg.fractions),
                 "sigma": scan_cfg.sigma,
                 "camera_resolution": scan_cfg.camera_resolution},
        "n_meshes": len(meshes),
        "n_samples": len(samples),
        "held_mesh_ids": sorted(int(i) for i in held_mesh_ids),
        "class_balance": class_balance(samples) if samples else {},
    }
    (root / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return root


def load_manifest(root):
    manifest = json.loads((Path(root) / "manifest.json").read_text())
    if manifest.get("format") != "shapecomplete-dataset-v1":
        raise fileio.FormatError(f"not a dataset directory: {root}")
    return manifest


def load_dataset(root):
    """Dataset directory -> (meshes, samples, profile, manifest)."""
    root = Path(root)
    manifest = load_manifest(root)
    profile = FieldProfile(g=manifest["profile_g"], truncation=manifest["truncation"])
    meshes = [fileio.load_mesh_obj(p)
              for p in sorted((root / "meshes").glob("mesh_*.obj"))]
    samples = []
    for d in sorted((root / "samples").glob("sample_*")):
        meta = json.loads((d / "sample.json").read_text())
        cloud = fileio.load_cloud_ply(d / "cloud.ply")
        coarse = fileio.load_grid(d / "coarse.grid")
        labels = fileio.load_grid(d / "labels_coarse.grid").values[0]
        faces = []
        for f in range(6):
            color = fileio.load_image_ppm(d / f"face_{f}.ppm")
            depth = fileio.load_depth_pgm(d / f"face_{f}.pgm", 0.0, 1.0)
            faces.append(DepthImage(depth=depth, near=0.0, far=1.0, color=color))
        patches = []
        if meta["n_patches"]:
            pv = fileio.load_grid(d / "patches.grid").values
            pl = fileio.load_grid(d / "patch_labels.grid").values
            for i, center in enumerate(meta["centers"]):
                patches.append(PatchSample(
                    values=pv[4 * i:4 * (i + 1)], labels=pl[i],
                    center=np.asarray(center, dtype=np.int64)))
        bounds = Bounds(origin=np.asarray(meta["bounds_origin"]),
                        edge=meta["bounds_edge"])
        samples.append(TrainSample(
            mesh_id=meta["mesh_id"], scan_id=meta["scan_id"], cloud=cloud,
            face_images=faces, coarse=coarse, labels_coarse=labels,
            patches=patches, bounds=bounds, views=meta["views"]))
    return meshes, samples, profile, manifest
