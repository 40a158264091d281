"""Virtual scanning: perspective depth rendering, multi-scale hole
injection, backprojection, and orthographic face depth images.

Image arrays are indexed [row, col]; a perspective camera's rows grow
with its up vector and columns with its right vector.  Face images use
in-plane axes in ascending world-axis order (documented per op).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .volumetric import PointCloud, rasterize_triangles

log = logging.getLogger(__name__)

GOLDEN = (1.0 + np.sqrt(5.0)) / 2.0

FACE_ORDER = ("+x", "-x", "+y", "-y", "+z", "-z")
# in-plane (u, v) world axes per face, ascending axis order
FACE_UV_AXES = ((1, 2), (1, 2), (0, 2), (0, 2), (0, 1), (0, 1))


@dataclass
class Camera:
    """Pinhole camera looking at a target point; square image."""

    position: np.ndarray
    look_at: np.ndarray
    up_hint: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    vfov_deg: float = 45.0
    resolution: int = 128
    near: float = 0.1
    far: float = 10.0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.look_at = np.asarray(self.look_at, dtype=np.float64)
        self.up_hint = np.asarray(self.up_hint, dtype=np.float64)
        if np.allclose(self.position, self.look_at):
            raise ValueError("camera position equals its target")
        if not (0 < self.near < self.far):
            raise ValueError("camera needs 0 < near < far")
        if self.resolution < 16:
            raise ValueError("camera resolution must be >= 16")
        fwd = self.look_at - self.position
        fwd /= np.linalg.norm(fwd)
        up = self.up_hint
        if np.linalg.norm(np.cross(fwd, up)) < 1e-8:
            up = np.array([1.0, 0.0, 0.0])
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        self.forward = fwd
        self.right = right
        self.true_up = np.cross(right, fwd)
        self.half_extent = np.tan(np.radians(self.vfov_deg) / 2.0)

    def to_camera(self, points):
        d = np.asarray(points, dtype=np.float64) - self.position
        return d @ self.right, d @ self.true_up, d @ self.forward

    def project(self, points):
        """World points -> (px, py, z); px/py are continuous pixel coords
        with pixel (ix, iy) centered at (ix + 0.5, iy + 0.5)."""
        x, y, z = self.to_camera(points)
        u = x / (z * self.half_extent)
        v = y / (z * self.half_extent)
        px = (u + 1.0) * 0.5 * self.resolution
        py = (v + 1.0) * 0.5 * self.resolution
        return px, py, z

    def unproject(self, ix, iy, z):
        """Pixel indices + depth -> world points at the pixel centers."""
        u = (np.asarray(ix) + 0.5) / self.resolution * 2.0 - 1.0
        v = (np.asarray(iy) + 0.5) / self.resolution * 2.0 - 1.0
        x = u * self.half_extent * z
        y = v * self.half_extent * z
        return (self.position
                + x[:, None] * self.right
                + y[:, None] * self.true_up
                + np.asarray(z)[:, None] * self.forward)


@dataclass
class DepthImage:
    """Square depth raster; background pixels hold +inf."""

    depth: np.ndarray
    near: float
    far: float
    color: np.ndarray | None = None  # (res, res, 3) in [0, 1]

    @property
    def resolution(self):
        return self.depth.shape[0]

    def foreground(self):
        return np.isfinite(self.depth)


@dataclass
class ScanConfig:
    """Randomized acquisition scenario."""

    view_range: tuple = (3, 5)
    granularities: tuple = (8, 16)   # k-means cell sizes in pixels
    fractions: tuple = (0.1, 0.1)    # removed foreground fraction per level
    sigma: float = 0.0               # depth noise in model units
    camera_resolution: int | None = None  # defaults to profile.depth_res

    def __post_init__(self):
        lo, hi = self.view_range
        if not (1 <= lo <= hi <= 20):
            raise ValueError("view_range must lie within [1, 20]")
        if len(self.granularities) != len(self.fractions):
            raise ValueError("granularities and fractions must align")
        if any(not (0 <= f < 1) for f in self.fractions):
            raise ValueError("removal fractions must lie in [0, 1)")


def dodecahedron_viewpoints(centroid, radius, resolution=128, vfov_deg=45.0,
                            near=None, far=None):
    """Twenty cameras at regular-dodecahedron vertex directions, all
    looking at the centroid from the given radius."""
    centroid = np.asarray(centroid, dtype=np.float64)
    p = GOLDEN
    q = 1.0 / GOLDEN
    verts = []
    for sx in (1, -1):
        for sy in (1, -1):
            for sz in (1, -1):
                verts.append((sx, sy, sz))
    for s1 in (1, -1):
        for s2 in (1, -1):
            verts.append((0.0, s1 * q, s2 * p))
            verts.append((s1 * q, s2 * p, 0.0))
            verts.append((s1 * p, 0.0, s2 * q))
    dirs = np.asarray(verts, dtype=np.float64)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    near = 0.1 * radius if near is None else near
    far = 3.0 * radius if far is None else far
    return [Camera(position=centroid + radius * d, look_at=centroid,
                   resolution=resolution, vfov_deg=vfov_deg, near=near, far=far)
            for d in dirs]


def render_depth(mesh, cam):
    """Perspective z-buffer rasterization; nearest hit per pixel, both
    face orientations rendered.  Triangles crossing the near plane are
    skipped (and counted in the log)."""
    res = cam.resolution
    zbuf = np.full((res, res), np.inf)
    if mesh.triangles.shape[0] == 0:
        return DepthImage(depth=zbuf, near=cam.near, far=cam.far)
    px, py, z = cam.project(mesh.vertices)
    tz = z[mesh.triangles]
    ok = (tz > cam.near).all(axis=1) & (tz < cam.far).any(axis=1)
    skipped = int((~ok).sum())
    if skipped:
        log.debug("render_depth: skipped %d triangles at the near/far planes", skipped)
    tri_xy = np.stack([px[mesh.triangles], py[mesh.triangles]], axis=-1)[ok]
    tri_zinv = 1.0 / tz[ok]
    for tids, ix, iy, bary in rasterize_triangles(tri_xy, res, res):
        depth = 1.0 / (bary * tri_zinv[tids]).sum(axis=1)
        np.minimum.at(zbuf, (iy, ix), depth)
    zbuf[zbuf > cam.far] = np.inf
    return DepthImage(depth=zbuf, near=cam.near, far=cam.far)


def _grid_kmeans_segments(coords, features, cell, resolution, iterations=5):
    """Seeded k-means with centers initialized on a `cell`-sized grid;
    returns a segment label per coordinate row."""
    n_cells = max(resolution // cell, 1)
    cell_of = np.minimum(coords // cell, n_cells - 1)
    cell_id = cell_of[:, 0] * n_cells + cell_of[:, 1]
    uniq, inv = np.unique(cell_id, return_inverse=True)
    k = uniq.size
    centers = np.zeros((k, features.shape[1]))
    np.add.at(centers, inv, features)
    counts = np.bincount(inv, minlength=k).astype(np.float64)
    centers /= counts[:, None]
    assign = inv
    for _ in range(iterations):
        d2 = ((features[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
        assign = d2.argmin(axis=1)
        newc = np.zeros_like(centers)
        np.add.at(newc, assign, features)
        cnt = np.bincount(assign, minlength=k).astype(np.float64)
        keep = cnt > 0
        centers[keep] = newc[keep] / cnt[keep, None]
    return assign


def inject_holes(image, cfg, seed):
    """Remove random contiguous segments at each granularity level, then
    add Gaussian depth noise to the surviving foreground.

    Segments come from seeded k-means on (x, y, scaled depth) initialized
    on a grid of the level's cell size; per level a random subset of
    segments totaling about the level's fraction of foreground pixels is
    set to the background sentinel.
    """
    rng = np.random.default_rng(seed)
    depth = image.depth.copy()
    res = image.resolution
    w_depth = res / (image.far - image.near)
    for cell, frac in zip(cfg.granularities, cfg.fractions):
        fg = np.argwhere(np.isfinite(depth))
        if fg.size == 0:
            break
        if frac <= 0:
            continue
        feats = np.column_stack([
            fg[:, 1].astype(np.float64), fg[:, 0].astype(np.float64),
            (depth[fg[:, 0], fg[:, 1]] - image.near) * w_depth])
        coords = fg[:, ::-1]  # (x, y)
        segs = _grid_kmeans_segments(coords, feats, cell, res)
        seg_ids = np.unique(segs)
        order = rng.permutation(seg_ids)
        target = frac * fg.shape[0]
        removed = 0
        for sid in order:
            if removed >= target:
                break
            members = fg[segs == sid]
            depth[members[:, 0], members[:, 1]] = np.inf
            removed += members.shape[0]
    if cfg.sigma > 0:
        fg_mask = np.isfinite(depth)
        depth[fg_mask] += rng.normal(0.0, cfg.sigma, size=int(fg_mask.sum()))
    return DepthImage(depth=depth, near=image.near, far=image.far, color=image.color)


def backproject(depths, cams):
    """Fuse depth images into one point cloud via inverse projection."""
    if len(depths) != len(cams):
        raise ValueError(f"{len(depths)} depth images vs {len(cams)} cameras")
    pieces = []
    for img, cam in zip(depths, cams):
        iy, ix = np.nonzero(img.foreground())
        if iy.size == 0:
            continue
        z = img.depth[iy, ix]
        pieces.append(cam.unproject(ix, iy, z))
    if not pieces:
        return PointCloud(points=np.zeros((0, 3)))
    return PointCloud(points=np.concatenate(pieces, axis=0))


def jet_color(x):
    """Piecewise-linear jet map on [0, 1] -> RGB in [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    r = np.clip(1.5 - np.abs(4 * x - 3), 0, 1)
    g = np.clip(1.5 - np.abs(4 * x - 2), 0, 1)
    b = np.clip(1.5 - np.abs(4 * x - 1), 0, 1)
    return np.stack([r, g, b], axis=-1)


def face_depth_images(cloud, profile, bounds):
    """Six orthographic, jet-colored depth images over the bounding-cube
    faces, in order (+x, -x, +y, -y, +z, -z).

    Pixel (iu, iv) of a face covers ascending in-plane axes (see
    FACE_UV_AXES); depth is the normalized [0, 1] distance from the face
    plane into the cube; nearest point wins; background pixels are black.
    """
    res = profile.depth_res
    out = []
    pts = cloud.points
    if len(cloud) == 0:
        log.warning("face_depth_images: empty cloud, emitting background-only images")
    rel = (pts - bounds.origin) / bounds.edge if len(cloud) else np.zeros((0, 3))
    for f, name in enumerate(FACE_ORDER):
        axis = f // 2
        positive = f % 2 == 0
        ua, va = FACE_UV_AXES[f]
        depth = np.full((res, res), np.inf)
        if len(cloud):
            d = (1.0 - rel[:, axis]) if positive else rel[:, axis]
            iu = np.clip((rel[:, ua] * res).astype(np.int64), 0, res - 1)
            iv = np.clip((rel[:, va] * res).astype(np.int64), 0, res - 1)
            np.minimum.at(depth, (iv, iu), d)
        color = np.zeros((res, res, 3))
        fg = np.isfinite(depth)
        color[fg] = jet_color(depth[fg])
        out.append(DepthImage(depth=depth, near=0.0, far=1.0, color=color))
    return out
