"""Procedural watertight test shapes: tables (slab top + four cylindrical
legs) and hollow boxes with wall cutouts.

Shapes are defined as implicit solids and meshed by marching cubes on a
generation grid, so every mesh is closed by construction.  Both families
mix thin and flat parts, which is what the completion pipeline cares
about.
"""

from __future__ import annotations

import numpy as np

from .volumetric import TriMesh, marching_cubes_array

FAMILIES = ("table", "hollow_box")


def _grid(res, half):
    xs = (np.arange(res) + 0.5) / res * (2 * half) - half
    return np.meshgrid(xs, xs, xs, indexing="ij")


def _box(px, py, pz, center, half_ext):
    dx = np.abs(px - center[0]) - half_ext[0]
    dy = np.abs(py - center[1]) - half_ext[1]
    dz = np.abs(pz - center[2]) - half_ext[2]
    return np.maximum(np.maximum(dx, dy), dz)


def _cyl_z(px, py, pz, center, radius, half_h):
    radial = np.hypot(px - center[0], py - center[1]) - radius
    return np.maximum(radial, np.abs(pz - center[2]) - half_h)


def table_mesh(rng, resolution=48, feature_scale=1.0):
    """Randomized table: box top on four cylinder legs (z up).

    `feature_scale` thickens the thin parts (top slab, legs); values
    around 2.5 keep every feature above one coarse voxel at the g=16
    profile, mirroring the usual curation rule that drops models too thin
    to voxelize on the coarse grid."""
    s = rng.uniform(0.7, 1.0)
    wx = rng.uniform(0.30, 0.45) * s
    wy = rng.uniform(0.30, 0.45) * s
    top_t = min(rng.uniform(0.035, 0.07) * feature_scale, 0.22) * s
    leg_h = rng.uniform(0.30, 0.45) * s
    leg_r = min(rng.uniform(0.035, 0.06) * feature_scale, 0.13) * s
    inset = rng.uniform(1.1, 1.8) * leg_r
    half = 1.05 * max(wx, wy, (leg_h + 2 * top_t))
    px, py, pz = _grid(resolution, half)
    z_top = leg_h + top_t
    f = _box(px, py, pz, (0, 0, z_top - top_t / 2), (wx, wy, top_t / 2))
    for sx in (1, -1):
        for sy in (1, -1):
            c = (sx * (wx - inset), sy * (wy - inset), leg_h / 2)
            f = np.minimum(f, _cyl_z(px, py, pz, c, leg_r, leg_h / 2 + top_t / 4))
    vs = 2 * half / resolution
    return marching_cubes_array(f, 0.0, np.array([-half, -half, -half]), vs)


def hollow_box_mesh(rng, resolution=48, feature_scale=1.0):
    """Randomized open container: box shell with 1-3 wall cutouts."""
    s = rng.uniform(0.7, 1.0)
    hx = rng.uniform(0.28, 0.42) * s
    hy = rng.uniform(0.28, 0.42) * s
    hz = rng.uniform(0.28, 0.42) * s
    wall = min(rng.uniform(0.12, 0.2) * feature_scale, 0.45) * min(hx, hy, hz)
    half = 1.15 * max(hx, hy, hz)
    px, py, pz = _grid(resolution, half)
    outer = _box(px, py, pz, (0, 0, 0), (hx, hy, hz))
    inner = _box(px, py, pz, (0, 0, 0), (hx - wall, hy - wall, hz - wall))
    removed = inner
    n_cuts = int(rng.integers(1, 4))
    ext = np.array([hx, hy, hz])
    for _ in range(n_cuts):
        axis = int(rng.integers(0, 3))
        side = 1 if rng.uniform() < 0.5 else -1
        center = np.zeros(3)
        center[axis] = side * ext[axis]
        size = np.empty(3)
        size[axis] = 2.5 * wall
        for other in range(3):
            if other == axis:
                continue
            size[other] = rng.uniform(0.25, 0.55) * ext[other]
            center[other] = rng.uniform(-0.3, 0.3) * ext[other]
        cut = _box(px, py, pz, center, size)
        removed = np.minimum(removed, cut)
    f = np.maximum(outer, -removed)
    vs = 2 * half / resolution
    return marching_cubes_array(f, 0.0, np.array([-half, -half, -half]), vs)


def make_mesh(family, rng, resolution=48, feature_scale=1.0):
    if family == "table":
        return table_mesh(rng, resolution, feature_scale)
    if family == "hollow_box":
        return hollow_box_mesh(rng, resolution, feature_scale)
    raise ValueError(f"unknown shape family: {family}")


def generate_mesh_corpus(count, seed, families=FAMILIES, resolution=48,
                         feature_scale=1.0):
    """Deterministic list of (family, TriMesh) alternating over families."""
    out = []
    for i in range(count):
        family = families[i % len(families)]
        rng = np.random.default_rng((seed, i))
        out.append((family, make_mesh(family, rng, resolution, feature_scale)))
    return out
