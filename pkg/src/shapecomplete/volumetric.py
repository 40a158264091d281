"""Voxel-lattice geometry: voxelization, signed distance fields, color
encoding, boundary detection, marching cubes, surface sampling and
inside/outside labeling.

Grids are cubic, values indexed `[channel, x, y, z]`, with samples at
voxel centers `origin + (index + 0.5) * voxel_size`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from ._mc_tables import CORNER_OFFSETS, EDGE_CORNERS, EDGE_TABLE, TRI_TABLE

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FieldProfile:
    """Grid parameterization tying all resolutions to the coarse side g:
    fine side 8g, depth-image side 4g, patch side g."""

    g: int = 32
    truncation: float = 10.0  # voxel units

    def __post_init__(self):
        if self.g < 8 or self.g % 8 != 0:
            raise ValueError(f"profile g must be a positive multiple of 8, got {self.g}")

    @property
    def fine(self):
        return 8 * self.g

    @property
    def depth_res(self):
        return 4 * self.g

    @property
    def patch(self):
        return self.g


@dataclass(frozen=True)
class Bounds:
    """Axis-aligned cube in model units."""

    origin: np.ndarray
    edge: float

    def voxel_size(self, dims):
        return self.edge / dims

    def contains(self, points, tol=0.0):
        rel = (np.asarray(points) - self.origin) / self.edge
        return np.all((rel >= -tol) & (rel <= 1.0 + tol), axis=-1)

    @property
    def center(self):
        return self.origin + 0.5 * self.edge


@dataclass
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)

    def __len__(self):
        return self.points.shape[0]


@dataclass
class VolumeGrid:
    """C-channel scalar field on a cubic voxel lattice."""

    values: np.ndarray  # (C, n, n, n) float32
    origin: np.ndarray
    voxel_size: float

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim == 3:
            self.values = self.values[None]
        self.origin = np.asarray(self.origin, dtype=np.float64)

    @property
    def channels(self):
        return self.values.shape[0]

    @property
    def dims(self):
        return self.values.shape[1:]

    def world_to_voxel(self, points):
        return np.floor((np.asarray(points) - self.origin) / self.voxel_size).astype(np.int64)

    def voxel_centers(self, indices):
        return self.origin + (np.asarray(indices, dtype=np.float64) + 0.5) * self.voxel_size


@dataclass
class TriMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)

    def areas(self):
        v = self.vertices
        t = self.triangles
        cross = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
        return 0.5 * np.linalg.norm(cross, axis=1)

    def bbox(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


def bounds_for_meshes(meshes, dims, margin=0.9):
    """Shared scale for a model family: the largest bounding-box diagonal
    maps to `margin * dims` voxels; each mesh keeps its own centered cube."""
    diag = max(float(np.linalg.norm(m.bbox()[1] - m.bbox()[0])) for m in meshes)
    edge = diag / margin
    out = []
    for m in meshes:
        lo, hi = m.bbox()
        center = 0.5 * (lo + hi)
        out.append(Bounds(origin=center - 0.5 * edge, edge=edge))
    return edge, out


# ---------------------------------------------------------------------------
# voxelization + signed distance
# ---------------------------------------------------------------------------

def voxelize(cloud, dims, bounds):
    """Binary occupancy: a voxel is 1 iff at least one point falls in it."""
    vs = bounds.voxel_size(dims)
    rel = (cloud.points - bounds.origin) / vs
    bad = np.flatnonzero(~np.all((rel >= 0) & (rel <= dims), axis=1))
    if bad.size:
        raise ValueError(
            f"point {bad[0]} at {cloud.points[bad[0]]} lies outside the bounding cube")
    idx = np.minimum(np.floor(rel).astype(np.int64), dims - 1)
    occ = np.zeros((dims, dims, dims), dtype=np.float32)
    occ[idx[:, 0], idx[:, 1], idx[:, 2]] = 1.0
    return VolumeGrid(values=occ[None], origin=bounds.origin.copy(), voxel_size=vs)


def signed_distance(occupancy, truncation=10.0):
    """Truncated signed Euclidean distance (voxel units) to occupied voxels.

    Magnitudes are exact center-to-center distances.  Sign comes from an
    exterior flood fill over empty 6-connected voxels: regions reachable
    from the grid border are outside (+), enclosed empty regions are
    inside (-), occupied voxels are 0.
    """
    occ = occupancy.values[0] > 0.5
    if not occ.any():
        log.warning("signed_distance: empty occupancy grid, returning +truncation")
        dist = np.full(occ.shape, truncation, dtype=np.float32)
        return VolumeGrid(values=dist[None], origin=occupancy.origin.copy(),
                          voxel_size=occupancy.voxel_size)
    dist = ndimage.distance_transform_edt(~occ)
    empty = ~occ
    labels, _ = ndimage.label(empty)
    border = np.unique(np.concatenate([
        labels[0].ravel(), labels[-1].ravel(),
        labels[:, 0].ravel(), labels[:, -1].ravel(),
        labels[:, :, 0].ravel(), labels[:, :, -1].ravel()]))
    border = border[border > 0]
    outside = np.isin(labels, border)
    signed = np.where(empty & ~outside, -dist, dist)
    signed = np.clip(signed, -truncation, truncation).astype(np.float32)
    return VolumeGrid(values=signed[None], origin=occupancy.origin.copy(),
                      voxel_size=occupancy.voxel_size)


def csdf_encode(sdf, truncation=10.0):
    """Color channels for a truncated signed distance field.

    Inside (d < 0) blends cyan (0,1,1) at the surface to blue (0,0,1) at
    -truncation; outside (d > 0) blends yellow (1,1,0) to red (1,0,0) at
    +truncation; exactly-zero voxels are the black surface marker.
    """
    d = sdf.values[0]
    t = float(truncation)
    r = np.zeros_like(d)
    g = np.zeros_like(d)
    b = np.zeros_like(d)
    neg = d < 0
    pos = d > 0
    frac_n = np.clip(-d[neg] / t, 0.0, 1.0)
    g[neg] = 1.0 - frac_n
    b[neg] = 1.0
    frac_p = np.clip(d[pos] / t, 0.0, 1.0)
    r[pos] = 1.0
    g[pos] = 1.0 - frac_p
    return VolumeGrid(values=np.stack([r, g, b]).astype(np.float32),
                      origin=sdf.origin.copy(), voxel_size=sdf.voxel_size)


def downsample_field(fine, g, max_channels=None):
    """Block-reduce an 8g-sided grid to g: mean per 8-cube block, except
    `max_channels` (default: channel 3 of a 4-channel field, the binary
    occupancy) which reduce by max."""
    n = fine.dims[0]
    if n != 8 * g:
        raise ValueError(f"downsample_field: fine side {n} != 8 * {g}")
    if max_channels is None:
        max_channels = (3,) if fine.channels == 4 else ()
    f = 8
    blocks = fine.values.reshape(fine.channels, g, f, g, f, g, f)
    mean = blocks.mean(axis=(2, 4, 6))
    if max_channels:
        mx = blocks.max(axis=(2, 4, 6))
        for c in max_channels:
            mean[c] = mx[c]
    return VolumeGrid(values=mean.astype(np.float32), origin=fine.origin.copy(),
                      voxel_size=fine.voxel_size * f)


def build_input_fields(cloud, profile, bounds):
    """Fine and coarse 4-channel input grids for an incomplete cloud:
    three signed-distance color channels plus the binary occupancy."""
    occ = voxelize(cloud, profile.fine, bounds)
    sdf = signed_distance(occ, truncation=profile.truncation)
    colors = csdf_encode(sdf, truncation=profile.truncation)
    fine = VolumeGrid(
        values=np.concatenate([colors.values, occ.values]),
        origin=occ.origin.copy(), voxel_size=occ.voxel_size)
    coarse = downsample_field(fine, profile.g)
    return fine, coarse


# ---------------------------------------------------------------------------
# boundary detection
# ---------------------------------------------------------------------------

def detect_boundary(cloud, k=16, gap_threshold=120.0, radius=None):
    """Indices of points on the rim of missing regions.

    Each point gets a PCA tangent plane from its k nearest neighbors;
    neighbor directions are projected and sorted by angle, and the point
    is boundary when the largest angular gap exceeds the threshold.
    Returns (indices, diagnostics).
    """
    pts = cloud.points
    n = pts.shape[0]
    diagnostics = {"skipped": 0, "evaluated": 0}
    if n < k + 1:
        raise ValueError(f"detect_boundary needs at least k+1={k + 1} points, got {n}")
    tree = cKDTree(pts)
    dists, nbr = tree.query(pts, k=k + 1)
    dists, nbr = dists[:, 1:], nbr[:, 1:]
    offs = pts[nbr] - pts[:, None, :]
    valid = np.ones((n, k), dtype=bool)
    if radius is not None:
        valid = dists <= radius
    enough = valid.sum(axis=1) >= k
    diagnostics["skipped"] = int((~enough).sum())
    diagnostics["evaluated"] = int(enough.sum())

    cov = np.einsum("nki,nkj->nij", offs, offs)
    _, vecs = np.linalg.eigh(cov)
    e1 = vecs[:, :, 1]
    e2 = vecs[:, :, 2]
    a = np.einsum("nki,ni->nk", offs, e1)
    b = np.einsum("nki,ni->nk", offs, e2)
    ang = np.sort(np.arctan2(b, a), axis=1)
    gaps = np.diff(ang, axis=1)
    wrap = 2 * np.pi - (ang[:, -1] - ang[:, 0])
    max_gap = np.maximum(gaps.max(axis=1, initial=0.0), wrap)
    flag = enough & (np.degrees(max_gap) > gap_threshold)
    return np.flatnonzero(flag), diagnostics


# ---------------------------------------------------------------------------
# marching cubes
# ---------------------------------------------------------------------------

_EDGE_BASE = np.zeros((12, 3), dtype=np.int64)
_EDGE_AXIS = np.zeros(12, dtype=np.int64)
for _e, (_a, _b) in enumerate(EDGE_CORNERS):
    _pa = np.array(CORNER_OFFSETS[_a])
    _pb = np.array(CORNER_OFFSETS[_b])
    _EDGE_BASE[_e] = np.minimum(_pa, _pb)
    _EDGE_AXIS[_e] = int(np.flatnonzero(_pa != _pb)[0])

_TRI_ARRAYS = [np.asarray(t, dtype=np.int64).reshape(-1, 3) for t in TRI_TABLE]


def marching_cubes_array(values, iso, origin, voxel_size):
    """Classic marching cubes over raw (n, n, n) samples at voxel centers.

    Vertices on shared cube edges are deduplicated through canonical edge
    keys, so every interior surface edge is shared by exactly two
    triangles.  Triangles are wound so normals point toward values above
    iso (outside for a signed field at iso 0)."""
    f = np.asarray(values, dtype=np.float64)
    if f.ndim != 3 or min(f.shape) < 2:
        raise ValueError("marching_cubes needs a 3-d field with >= 2 voxels per axis")
    inside = f < iso
    case = np.zeros(tuple(s - 1 for s in f.shape), dtype=np.int32)
    for c, (dx, dy, dz) in enumerate(CORNER_OFFSETS):
        view = inside[dx:dx + case.shape[0], dy:dy + case.shape[1], dz:dz + case.shape[2]]
        case |= view.astype(np.int32) << c
    active = (case != 0) & (case != 255)
    if not active.any():
        return TriMesh(vertices=np.zeros((0, 3)), triangles=np.zeros((0, 3), dtype=np.int64))
    cube_pos = np.argwhere(active)
    cube_case = case[active]

    key_blocks = []
    ny, nz = f.shape[1], f.shape[2]
    for cs in np.unique(cube_case):
        tris = _TRI_ARRAYS[cs]
        if tris.size == 0:
            continue
        sel = cube_pos[cube_case == cs]
        base = sel[:, None, None, :] + _EDGE_BASE[tris][None]
        axis = np.broadcast_to(_EDGE_AXIS[tris][None], base.shape[:3])
        keys = ((base[..., 0] * ny + base[..., 1]) * nz + base[..., 2]) * 3 + axis
        key_blocks.append(keys.reshape(-1, 3))
    keys = np.concatenate(key_blocks, axis=0)
    uniq, inverse = np.unique(keys.ravel(), return_inverse=True)
    tris = inverse.reshape(-1, 3)

    axis = uniq % 3
    lin = uniq // 3
    bz = lin % nz
    by = (lin // nz) % ny
    bx = lin // (nz * ny)
    v0 = f[bx, by, bz]
    step = np.eye(3, dtype=np.int64)[axis]
    v1 = f[bx + step[:, 0], by + step[:, 1], bz + step[:, 2]]
    denom = v1 - v0
    t = np.where(np.abs(denom) < 1e-300, 0.5, (iso - v0) / np.where(denom == 0, 1, denom))
    verts = np.stack([bx, by, bz], axis=1).astype(np.float64) + 0.5
    verts[np.arange(verts.shape[0]), axis] += t
    verts = np.asarray(origin) + verts * voxel_size

    # drop zero-area triangles (collapsed interpolations)
    cross = np.cross(verts[tris[:, 1]] - verts[tris[:, 0]],
                     verts[tris[:, 2]] - verts[tris[:, 0]])
    area2 = np.linalg.norm(cross, axis=1)
    tris = tris[area2 > 2e-12]
    # table winding with this corner layout faces the negative side; flip
    # so normals point toward values above iso
    tris = tris[:, ::-1]
    return TriMesh(vertices=verts, triangles=tris)


def marching_cubes(grid, iso=0.0):
    return marching_cubes_array(grid.values[0], iso, grid.origin, grid.voxel_size)


# ---------------------------------------------------------------------------
# surface sampling / proximity filtering
# ---------------------------------------------------------------------------

def sample_surface(mesh, density, seed=0):
    """Uniform surface samples: per-triangle counts follow area * density
    with stochastic rounding, placement is barycentric-uniform."""
    if density <= 0:
        raise ValueError("density must be positive")
    if mesh.triangles.shape[0] == 0:
        return PointCloud(points=np.zeros((0, 3)))
    rng = np.random.default_rng(seed)
    areas = mesh.areas()
    expect = areas * density
    counts = np.floor(expect).astype(np.int64)
    counts += rng.uniform(size=counts.shape) < (expect - counts)
    total = int(counts.sum())
    if total == 0:
        return PointCloud(points=np.zeros((0, 3)))
    tri_id = np.repeat(np.arange(len(areas)), counts)
    u = rng.uniform(size=total)
    v = rng.uniform(size=total)
    flip = u + v > 1
    u[flip] = 1 - u[flip]
    v[flip] = 1 - v[flip]
    tv = mesh.vertices[mesh.triangles[tri_id]]
    pts = tv[:, 0] + u[:, None] * (tv[:, 1] - tv[:, 0]) + v[:, None] * (tv[:, 2] - tv[:, 0])
    return PointCloud(points=pts)


def crop_volume(values, center, side):
    """Zero-padded cubic window of (C, n, n, n) values around a voxel center.

    The window spans `center - side // 2` to `center + side - side // 2`
    per axis, matching the guidance-crop convention."""
    values = np.asarray(values)
    if values.ndim == 3:
        values = values[None]
    out = np.zeros((values.shape[0], side, side, side), dtype=values.dtype)
    src = []
    dst = []
    for ax in range(3):
        s0 = int(center[ax]) - side // 2
        lo = max(s0, 0)
        hi = min(s0 + side, values.shape[1 + ax])
        if hi <= lo:
            return out
        src.append(slice(lo, hi))
        dst.append(slice(lo - s0, hi - s0))
    out[(slice(None),) + tuple(dst)] = values[(slice(None),) + tuple(src)]
    return out


def remove_near(q_cloud, p_cloud, radius):
    """Points of Q farther than `radius` from every point of P (exact)."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    if len(q_cloud) == 0:
        return PointCloud(points=np.zeros((0, 3)))
    if len(p_cloud) == 0:
        return PointCloud(points=q_cloud.points.copy())
    tree = cKDTree(p_cloud.points)
    dist, _ = tree.query(q_cloud.points)
    keep = dist > radius
    return PointCloud(points=q_cloud.points[keep])


# ---------------------------------------------------------------------------
# rasterization + inside labeling
# ---------------------------------------------------------------------------

def rasterize_triangles(tri_xy, nx, ny, chunk=4_000_000):
    """Pixel-center coverage of 2-d triangles.

    `tri_xy` is (T, 3, 2) in continuous pixel coordinates where pixel
    (ix, iy) has its center at (ix + 0.5, iy + 0.5).  Yields tuples of
    (triangle index, ix, iy, barycentric (K, 3)) arrays in triangle order.
    """
    tri_xy = np.asarray(tri_xy, dtype=np.float64)
    n_tri = tri_xy.shape[0]
    if n_tri == 0:
        return
    mins = tri_xy.min(axis=1)
    maxs = tri_xy.max(axis=1)
    ix0 = np.clip(np.ceil(mins[:, 0] - 0.5).astype(np.int64), 0, nx - 1)
    ix1 = np.clip(np.floor(maxs[:, 0] - 0.5).astype(np.int64), -1, nx - 1)
    iy0 = np.clip(np.ceil(mins[:, 1] - 0.5).astype(np.int64), 0, ny - 1)
    iy1 = np.clip(np.floor(maxs[:, 1] - 0.5).astype(np.int64), -1, ny - 1)
    w = np.maximum(ix1 - ix0 + 1, 0)
    h = np.maximum(iy1 - iy0 + 1, 0)
    counts = w * h
    splits = []
    acc = 0
    start = 0
    for i in range(n_tri):
        acc += counts[i]
        if acc >= chunk:
            splits.append((start, i + 1))
            start = i + 1
            acc = 0
    if start < n_tri:
        splits.append((start, n_tri))

    for lo, hi in splits:
        c = counts[lo:hi]
        total = int(c.sum())
        if total == 0:
            continue
        tri = np.repeat(np.arange(lo, hi), c)
        base = np.repeat(np.cumsum(c) - c, c)
        local = np.arange(total) - base
        lw = w[tri]
        px = ix0[tri] + local % lw
        py = iy0[tri] + local // lw
        p = np.stack([px + 0.5, py + 0.5], axis=1)
        v0 = tri_xy[tri, 0]
        e1 = tri_xy[tri, 1] - v0
        e2 = tri_xy[tri, 2] - v0
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        ok = np.abs(det) > 1e-14
        d = p - v0
        safe = np.where(ok, det, 1.0)
        a = (d[:, 0] * e2[:, 1] - d[:, 1] * e2[:, 0]) / safe
        b = (e1[:, 0] * d[:, 1] - e1[:, 1] * d[:, 0]) / safe
        cover = ok & (a >= 0) & (b >= 0) & (a + b <= 1)
        if not cover.any():
            continue
        bary = np.stack([1 - a[cover] - b[cover], a[cover], b[cover]], axis=1)
        yield tri[cover], px[cover], py[cover], bary


_AXIS_JITTER = (9.17e-5, 3.71e-5)  # sub-voxel ray offsets against edge hits


def _axis_parity(mesh, dims, bounds, axis):
    """Inside parity of voxel centers from ray crossings along one axis."""
    vs = bounds.voxel_size(dims)
    others = [a for a in range(3) if a != axis]
    tri = mesh.vertices[mesh.triangles]
    tri_xy = np.empty((tri.shape[0], 3, 2))
    for j, a in enumerate(others):
        tri_xy[:, :, j] = (tri[:, :, a] - bounds.origin[a]) / vs - _AXIS_JITTER[j]
    tri_z = (tri[:, :, axis] - bounds.origin[axis]) / vs

    hist = np.zeros((dims, dims, dims + 1), dtype=np.int64)
    for tids, px, py, bary in rasterize_triangles(tri_xy, dims, dims):
        z = (bary * tri_z[tids]).sum(axis=1)
        # first center index strictly above the crossing
        m = np.clip(np.floor(z - 0.5).astype(np.int64) + 1, 0, dims)
        keep = m < dims
        np.add.at(hist, (px[keep], py[keep], m[keep]), 1)
    parity = (np.cumsum(hist[:, :, :-1], axis=2) % 2).astype(np.uint8)
    out = np.zeros((dims, dims, dims), dtype=np.uint8)
    if axis == 0:
        out = parity.transpose(2, 0, 1)
    elif axis == 1:
        out = parity.transpose(0, 2, 1)
    else:
        out = parity
    return out


def inside_labels(mesh, dims, bounds):
    """Binary inside labels at voxel centers; parity ray casting along
    +x, +y, +z with a per-voxel majority vote."""
    votes = sum(_axis_parity(mesh, dims, bounds, axis).astype(np.int16)
                for axis in range(3))
    labels = (votes >= 2).astype(np.float32)
    disagree = int(((votes > 0) & (votes < 3)).sum())
    if disagree:
        log.debug("inside_labels: %d voxels with split axis votes (of %d)",
                  disagree, labels.size)
    return VolumeGrid(values=labels[None], origin=bounds.origin.copy(),
                      voxel_size=bounds.voxel_size(dims))
