"""Virtual scanning: cameras, rendering, holes, backprojection, face images."""

import numpy as np
import pytest
from scipy import ndimage

from shapecomplete.scansim import (
    Camera,
    DepthImage,
    ScanConfig,
    backproject,
    dodecahedron_viewpoints,
    face_depth_images,
    inject_holes,
    jet_color,
    render_depth,
)
from shapecomplete.volumetric import Bounds, FieldProfile, PointCloud, TriMesh


def uv_sphere(center, radius, n_lat=24, n_lon=48):
    lats = np.linspace(0, np.pi, n_lat + 1)
    lons = np.linspace(0, 2 * np.pi, n_lon, endpoint=False)
    verts = [np.array([0, 0, radius]), np.array([0, 0, -radius])]
    ring_start = {}
    for i in range(1, n_lat):
        ring_start[i] = len(verts)
        for lo in lons:
            verts.append(radius * np.array([
                np.sin(lats[i]) * np.cos(lo), np.sin(lats[i]) * np.sin(lo),
                np.cos(lats[i])]))
    tris = []
    for j in range(n_lon):
        jn = (j + 1) % n_lon
        tris.append([0, ring_start[1] + j, ring_start[1] + jn])
        tris.append([1, ring_start[n_lat - 1] + jn, ring_start[n_lat - 1] + j])
    for i in range(1, n_lat - 1):
        for j in range(n_lon):
            jn = (j + 1) % n_lon
            a, b = ring_start[i] + j, ring_start[i] + jn
            c, d = ring_start[i + 1] + j, ring_start[i + 1] + jn
            tris.append([a, b, d])
            tris.append([a, d, c])
    return TriMesh(vertices=np.array(verts) + np.asarray(center),
                   triangles=np.array(tris))


class TestDodecahedron:
    def test_twenty_cameras_at_radius(self):
        cams = dodecahedron_viewpoints(np.array([1.0, 2.0, 3.0]), 5.0)
        assert len(cams) == 20
        for c in cams:
            assert abs(np.linalg.norm(c.position - [1, 2, 3]) - 5.0) < 1e-9

    def test_min_pairwise_angle_matches_polyhedron(self):
        cams = dodecahedron_viewpoints(np.zeros(3), 1.0)
        dirs = np.array([c.position for c in cams])
        dots = dirs @ dirs.T
        np.fill_diagonal(dots, -1)
        min_angle = np.degrees(np.arccos(dots.max()))
        assert abs(min_angle - 41.81) < 0.01
        # all directions pairwise distinct
        assert dots.max() < 1 - 1e-9


class TestRenderDepth:
    def make_cam(self, d=4.0, res=64):
        return Camera(position=np.array([0.0, 0.0, -d]), look_at=np.zeros(3),
                      resolution=res, near=0.1 * d, far=3 * d)

    def test_fronto_parallel_plane_depth(self):
        d = 4.0
        cam = self.make_cam(d)
        big = 40.0
        mesh = TriMesh(
            vertices=np.array([[-big, -big, 0], [big, -big, 0], [0, big, 0]]),
            triangles=np.array([[0, 1, 2]]))
        img = render_depth(mesh, cam)
        covered = img.foreground()
        assert covered.all()
        np.testing.assert_allclose(img.depth[covered], d, atol=1e-6)

    def test_sphere_nose_depth(self):
        d = 6.0
        cam = self.make_cam(d, res=128)
        mesh = uv_sphere([0.0, 0.0, 0.0], 1.0)
        img = render_depth(mesh, cam)
        footprint = 2 * cam.half_extent * (d - 1) / cam.resolution
        assert img.foreground().any()
        assert abs(img.depth[img.foreground()].min() - (d - 1)) < footprint / 2 + 1e-3

    def test_empty_mesh_all_sentinel(self):
        cam = self.make_cam()
        mesh = TriMesh(vertices=np.zeros((0, 3)), triangles=np.zeros((0, 3), int))
        img = render_depth(mesh, cam)
        assert not img.foreground().any()

    def test_backface_rendered(self):
        d = 4.0
        cam = self.make_cam(d)
        big = 40.0
        # winding reversed relative to the fronto-parallel test
        mesh = TriMesh(
            vertices=np.array([[-big, -big, 0], [big, -big, 0], [0, big, 0]]),
            triangles=np.array([[2, 1, 0]]))
        img = render_depth(mesh, cam)
        assert img.foreground().all()

    def test_render_backproject_render_round_trip(self):
        d = 5.0
        cam = self.make_cam(d, res=96)
        mesh = uv_sphere([0.0, 0.0, 0.0], 1.2)
        img = render_depth(mesh, cam)
        cloud = backproject([img], [cam])
        img2 = render_depth_points(cloud, cam)
        both = img.foreground() & img2.foreground()
        footprint = 2 * cam.half_extent * d / cam.resolution
        close = np.abs(img.depth[both] - img2.depth[both]) <= 2 * footprint
        assert close.mean() >= 0.95


def render_depth_points(cloud, cam):
    """Point-splat depth image used by the round-trip test."""
    res = cam.resolution
    zbuf = np.full((res, res), np.inf)
    px, py, z = cam.project(cloud.points)
    ix = np.floor(px).astype(int)
    iy = np.floor(py).astype(int)
    ok = (ix >= 0) & (ix < res) & (iy >= 0) & (iy < res) & (z > cam.near)
    np.minimum.at(zbuf, (iy[ok], ix[ok]), z[ok])
    return DepthImage(depth=zbuf, near=cam.near, far=cam.far)


class TestBackproject:
    def test_point_round_trip(self):
        target = np.array([0.3, -0.2, 0.1])
        cam = Camera(position=np.array([0, 0, -4.0]), look_at=np.zeros(3),
                     resolution=128, near=0.4, far=12.0)
        # small fronto-parallel triangle covering the target
        e = 0.05
        mesh = TriMesh(
            vertices=np.array([target + [-e, -e, 0], target + [e, -e, 0],
                               target + [0, e, 0]]),
            triangles=np.array([[0, 1, 2]]))
        cloud = backproject([render_depth(mesh, cam)], [cam])
        assert len(cloud) > 0
        d = np.linalg.norm(cloud.points - target, axis=1).min()
        assert d < 0.05

    def test_mismatched_lists_rejected(self):
        cam = Camera(position=np.array([0, 0, -4.0]), look_at=np.zeros(3))
        with pytest.raises(ValueError, match="cameras"):
            backproject([], [cam])

    def test_view_count_drawn_from_range(self):
        cfg = ScanConfig(view_range=(3, 5))
        counts = set()
        for seed in range(40):
            rng = np.random.default_rng(seed)
            counts.add(int(rng.integers(cfg.view_range[0], cfg.view_range[1] + 1)))
        assert counts == {3, 4, 5}

    def test_convex_all_views_near_complete(self):
        """All 20 hole-free views of a convex shape see almost all surface."""
        from scipy.spatial import cKDTree

        mesh = uv_sphere([0.0, 0.0, 0.0], 1.0, n_lat=32, n_lon=64)
        cams = dodecahedron_viewpoints(np.zeros(3), 4.0, resolution=256)
        imgs = [render_depth(mesh, c) for c in cams]
        cloud = backproject(imgs, cams)
        from shapecomplete.volumetric import sample_surface
        truth = sample_surface(mesh, 2000, seed=0)
        d, _ = cKDTree(cloud.points).query(truth.points)
        alpha = 2 * 4.0 * np.tan(np.radians(22.5)) / 256  # pixel footprint
        assert (d <= alpha).mean() >= 0.99


class TestInjectHoles:
    def base_image(self, res=96):
        depth = np.full((res, res), np.inf)
        depth[16:80, 16:80] = 2.0 + 0.001 * np.arange(64)[None, :]
        return DepthImage(depth=depth, near=1.0, far=4.0)

    def test_noop_config(self):
        img = self.base_image()
        cfg = ScanConfig(granularities=(8,), fractions=(0.0,), sigma=0.0)
        out = inject_holes(img, cfg, seed=0)
        np.testing.assert_array_equal(out.depth, img.depth)

    def test_removed_fraction_statistics(self):
        img = self.base_image()
        cfg = ScanConfig(granularities=(8,), fractions=(0.2,), sigma=0.0)
        fracs = []
        n_fg = img.foreground().sum()
        for seed in range(50):
            out = inject_holes(img, cfg, seed=seed)
            fracs.append(1.0 - out.foreground().sum() / n_fg)
        assert abs(np.mean(fracs) - 0.20) <= 0.02

    def test_multiscale_component_sizes(self):
        img = self.base_image(128)
        img.depth[8:120, 8:120] = 2.5
        cfg = ScanConfig(granularities=(4, 24), fractions=(0.08, 0.25), sigma=0.0)
        sizes = []
        for seed in range(8):
            out = inject_holes(img, cfg, seed=seed)
            removed = img.foreground() & ~out.foreground()
            labels, n = ndimage.label(removed)
            sizes.extend(ndimage.sum(removed, labels, range(1, n + 1)))
        sizes = np.asarray(sizes)
        assert (sizes <= 3 * 4 ** 2).any(), "no fine-scale holes"
        assert (sizes >= 0.5 * 24 ** 2).any(), "no coarse-scale holes"

    def test_only_sentinel_or_noise_changes(self):
        img = self.base_image()
        cfg = ScanConfig(granularities=(8, 16), fractions=(0.1, 0.1), sigma=0.0)
        out = inject_holes(img, cfg, seed=5)
        changed = img.depth != out.depth
        assert np.isinf(out.depth[changed]).all()

    def test_seeded_idempotence(self):
        img = self.base_image()
        cfg = ScanConfig(granularities=(8,), fractions=(0.3,), sigma=0.01)
        a = inject_holes(img, cfg, seed=9)
        b = inject_holes(img, cfg, seed=9)
        np.testing.assert_array_equal(a.depth, b.depth)

    def test_noise_applied_to_survivors(self):
        img = self.base_image()
        cfg = ScanConfig(granularities=(8,), fractions=(0.0,), sigma=0.05)
        out = inject_holes(img, cfg, seed=3)
        fg = img.foreground()
        assert (out.foreground() == fg).all()
        diffs = out.depth[fg] - img.depth[fg]
        assert 0.03 < diffs.std() < 0.07


class TestScanConfig:
    def test_bad_fraction_rejected(self):
        with pytest.raises(ValueError):
            ScanConfig(granularities=(8,), fractions=(1.0,))

    def test_bad_view_range_rejected(self):
        with pytest.raises(ValueError):
            ScanConfig(view_range=(0, 5))


class TestFaceDepthImages:
    def asym_cloud(self, rng, n=400):
        pts = rng.uniform(0.1, 0.9, size=(n, 3))
        pts[:, 0] = 0.1 + 0.5 * (pts[:, 0] - 0.1)  # concentrate low x
        return PointCloud(points=pts)

    def test_resolution_at_paper_scale(self, rng):
        profile = FieldProfile(g=32)
        bounds = Bounds(origin=np.zeros(3), edge=1.0)
        imgs = face_depth_images(self.asym_cloud(rng), profile, bounds)
        assert len(imgs) == 6
        assert all(im.depth.shape == (128, 128) for im in imgs)
        assert all(im.color.shape == (128, 128, 3) for im in imgs)

    def test_plane_constant_depth_and_opposite(self):
        profile = FieldProfile(g=8)
        bounds = Bounds(origin=np.zeros(3), edge=1.0)
        n = 64
        xs = (np.arange(n) + 0.5) / n
        gx, gy = np.meshgrid(xs, xs, indexing="ij")
        z0 = 0.25
        pts = np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, z0)], 1)
        imgs = face_depth_images(PointCloud(points=pts), profile, bounds)
        plus_z, minus_z = imgs[4], imgs[5]
        fg = plus_z.foreground()
        assert fg.all()
        np.testing.assert_allclose(plus_z.depth[fg], 1 - z0, atol=1e-9)
        np.testing.assert_allclose(minus_z.depth[minus_z.foreground()], z0, atol=1e-9)

    def test_jet_endpoints(self):
        c0 = jet_color(np.array(0.0))
        c1 = jet_color(np.array(1.0))
        assert c0[2] > 0.4 and c0[0] == 0.0  # blue family
        assert c1[0] > 0.4 and c1[2] == 0.0  # red family
        # background stays black and is distinct from any jet color
        xs = np.linspace(0, 1, 101)
        assert (np.abs(jet_color(xs)).sum(axis=1) > 0.4).all()

    def test_rotation_equivariance(self, rng):
        """Rotating the cloud 90 degrees about z permutes/flips the faces."""
        profile = FieldProfile(g=8)
        h = 0.5
        bounds = Bounds(origin=np.array([-h, -h, -h]), edge=1.0)
        pts = rng.uniform(-0.4, 0.4, size=(500, 3))
        pts[:, 1] *= 0.5  # asymmetric
        cloud = PointCloud(points=pts)
        rot = PointCloud(points=np.stack(
            [-pts[:, 1], pts[:, 0], pts[:, 2]], axis=1))
        base = face_depth_images(cloud, profile, bounds)
        moved = face_depth_images(rot, profile, bounds)
        # +x face of rotated cloud equals -y face of the original
        np.testing.assert_allclose(moved[0].depth, base[3].depth)
        np.testing.assert_allclose(moved[1].depth, base[2].depth)
        # +y face of rotated equals +x face of original with u flipped
        np.testing.assert_allclose(moved[2].depth, base[0].depth[:, ::-1])
        np.testing.assert_allclose(moved[3].depth, base[1].depth[:, ::-1])
        # +z face rotates in plane: new[a, b] = old[res-1-b, a]
        res = profile.depth_res
        expect = np.empty_like(base[4].depth)
        for a in range(res):
            for b in range(res):
                expect[a, b] = base[4].depth[res - 1 - b, a]
        np.testing.assert_allclose(moved[4].depth, expect)

    def test_empty_cloud_warns(self, caplog):
        profile = FieldProfile(g=8)
        bounds = Bounds(origin=np.zeros(3), edge=1.0)
        with caplog.at_level("WARNING"):
            imgs = face_depth_images(PointCloud(points=np.zeros((0, 3))),
                                     profile, bounds)
        assert all(not im.foreground().any() for im in imgs)
        assert any("empty" in r.message for r in caplog.records)
