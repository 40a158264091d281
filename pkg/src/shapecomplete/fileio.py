"""On-disk formats: grid files, ASCII PLY clouds, OBJ meshes, PGM/PPM images.

Grid files are a single compact-JSON header line followed by a raw
little-endian float32 blob in x-fastest order; round trips are bit-exact.
"""

from __future__ import annotations

import json

import numpy as np


class FormatError(ValueError):
    """File does not match the expected layout."""


# ---------------------------------------------------------------------------
# volume grids
# ---------------------------------------------------------------------------

def save_grid(path, grid):
    header = {
        "format": "shapecomplete-grid-v1",
        "dims": list(grid.dims),
        "channels": grid.channels,
        "origin": [float(v) for v in grid.origin],
        "voxel_size": float(grid.voxel_size),
        "dtype": "f4",
        "layout": "x-fastest",
    }
    values = np.ascontiguousarray(
        grid.values.astype("<f4", copy=False).transpose(0, 3, 2, 1))
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("ascii"))
        fh.write(b"\n")
        fh.write(values.tobytes())
    return path


def load_grid(path):
    from .volumetric import VolumeGrid

    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("ascii"))
        blob = fh.read()
    if header.get("format") != "shapecomplete-grid-v1":
        raise FormatError(f"not a grid file: {path}")
    dims = tuple(header["dims"])
    chans = header["channels"]
    count = chans * dims[0] * dims[1] * dims[2]
    flat = np.frombuffer(blob, dtype="<f4", count=count)
    values = flat.reshape((chans, dims[2], dims[1], dims[0])).transpose(0, 3, 2, 1)
    return VolumeGrid(
        values=np.ascontiguousarray(values.astype(np.float32)),
        origin=np.asarray(header["origin"], dtype=np.float64),
        voxel_size=float(header["voxel_size"]),
    )


# ---------------------------------------------------------------------------
# point clouds (ASCII PLY)
# ---------------------------------------------------------------------------

def save_cloud_ply(path, cloud):
    pts = np.asarray(cloud.points, dtype=np.float64)
    has_normals = cloud.normals is not None
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {pts.shape[0]}",
        "property float x",
        "property float y",
        "property float z",
    ]
    if has_normals:
        lines += ["property float nx", "property float ny", "property float nz"]
    lines += ["end_header"]
    rows = []
    if has_normals:
        data = np.hstack([pts, np.asarray(cloud.normals, dtype=np.float64)])
    else:
        data = pts
    for row in data:
        rows.append(" ".join(f"{v:.9g}" for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines + rows))
        fh.write("\n")
    return path


def load_cloud_ply(path):
    from .volumetric import PointCloud

    with open(path) as fh:
        if fh.readline().strip() != "ply":
            raise FormatError(f"not a PLY file: {path}")
        n_vertex = None
        props = []
        for line in fh:
            token = line.strip()
            if token.startswith("element vertex"):
                n_vertex = int(token.split()[-1])
            elif token.startswith("property"):
                props.append(token.split()[-1])
            elif token == "end_header":
                break
        if n_vertex is None:
            raise FormatError(f"missing vertex element in {path}")
        expected = ["x", "y", "z"] if len(props) == 3 else ["x", "y", "z", "nx", "ny", "nz"]
        if props != expected:
            raise FormatError(f"unsupported vertex properties {props} in {path}")
        data = np.loadtxt(fh, dtype=np.float64, max_rows=n_vertex, ndmin=2)
    if data.shape[0] != n_vertex:
        raise FormatError(f"vertex count mismatch in {path}")
    if len(props) == 6:
        return PointCloud(points=data[:, :3], normals=data[:, 3:])
    return PointCloud(points=data.reshape(n_vertex, 3))


# ---------------------------------------------------------------------------
# meshes (OBJ)
# ---------------------------------------------------------------------------

def save_mesh_obj(path, mesh):
    with open(path, "w") as fh:
        for v in np.asarray(mesh.vertices, dtype=np.float64):
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for t in np.asarray(mesh.triangles, dtype=np.int64):
            fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")
    return path


def load_mesh_obj(path):
    from .volumetric import TriMesh

    verts = []
    tris = []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) - 1 for p in parts[1:4]]
                tris.append(idx)
    return TriMesh(vertices=np.asarray(verts, dtype=np.float64),
                   triangles=np.asarray(tris, dtype=np.int64).reshape(-1, 3))


# ---------------------------------------------------------------------------
# depth / color rasters
# ---------------------------------------------------------------------------

PGM_SENTINEL = 65535


def save_depth_pgm(path, depth, near, far):
    """16-bit PGM; finite depths quantize linearly over [near, far] into
    0..65534 and the background sentinel maps to 65535."""
    depth = np.asarray(depth, dtype=np.float64)
    quant = np.full(depth.shape, PGM_SENTINEL, dtype=">u2")
    finite = np.isfinite(depth)
    scaled = np.clip((depth[finite] - near) / (far - near), 0.0, 1.0)
    quant[finite] = np.round(scaled * (PGM_SENTINEL - 1)).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{depth.shape[1]} {depth.shape[0]}\n{PGM_SENTINEL}\n".encode("ascii"))
        fh.write(quant.tobytes())
    return path


def load_depth_pgm(path, near, far):
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P5":
            raise FormatError(f"not a binary PGM: {path}")
        width, height = (int(v) for v in fh.readline().split())
        maxval = int(fh.readline())
        if maxval != PGM_SENTINEL:
            raise FormatError(f"expected 16-bit PGM with maxval {PGM_SENTINEL}")
        raw = np.frombuffer(fh.read(), dtype=">u2", count=width * height)
    quant = raw.reshape(height, width)
    depth = near + (quant.astype(np.float64) / (PGM_SENTINEL - 1)) * (far - near)
    depth[quant == PGM_SENTINEL] = np.inf
    return depth


def save_image_ppm(path, rgb):
    """8-bit PPM from an (H, W, 3) array of values in [0, 1]."""
    rgb = np.asarray(rgb, dtype=np.float64)
    data = np.round(np.clip(rgb, 0.0, 1.0) * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{rgb.shape[1]} {rgb.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())
    return path


def load_image_ppm(path):
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P6":
            raise FormatError(f"not a binary PPM: {path}")
        width, height = (int(v) for v in fh.readline().split())
        maxval = int(fh.readline())
        raw = np.frombuffer(fh.read(), dtype=np.uint8, count=width * height * 3)
    return raw.reshape(height, width, 3).astype(np.float64) / maxval
