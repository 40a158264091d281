"""Metric oracles: completeness, normalized distance, baseline, F1."""

import numpy as np
import pytest

from shapecomplete.metrics import (
    EvalReport,
    completeness,
    downsample_baseline,
    f1_inside,
    format_cell,
    normalized_distance,
    voxel_accuracy,
)
from shapecomplete.volumetric import Bounds, PointCloud


def brute_nearest(a, b):
    return np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)).min(1)


class TestNormalizedDistance:
    def test_identity_is_zero(self, rng):
        pts = rng.uniform(size=(100, 3))
        cloud = PointCloud(points=pts)
        assert normalized_distance(cloud, PointCloud(points=pts.copy()), 2.0) == 0.0

    def test_uniform_offset(self, rng):
        pts = rng.uniform(size=(500, 3)) * 10
        delta = 1e-4
        moved = PointCloud(points=pts + np.array([delta, 0, 0]))
        dm = 5.0
        nd = normalized_distance(moved, PointCloud(points=pts), dm)
        assert abs(nd - delta / dm) < 1e-9

    def test_matches_brute_force_on_1000_points(self):
        r = np.random.default_rng(7)
        a = r.uniform(size=(1000, 3))
        b = r.uniform(size=(1000, 3))
        nd = normalized_distance(PointCloud(points=a), PointCloud(points=b), 1.0)
        assert nd == pytest.approx(brute_nearest(a, b).mean(), abs=0)

    def test_empty_cloud_rejected(self):
        with pytest.raises(ValueError):
            normalized_distance(PointCloud(points=np.zeros((0, 3))),
                                PointCloud(points=np.zeros((5, 3))), 1.0)

    def test_monotone_when_truth_grows(self, rng):
        a = rng.uniform(size=(200, 3))
        t1 = rng.uniform(size=(100, 3))
        t2 = np.vstack([t1, rng.uniform(size=(100, 3))])
        nd1 = normalized_distance(PointCloud(points=a), PointCloud(points=t1), 1.0)
        nd2 = normalized_distance(PointCloud(points=a), PointCloud(points=t2), 1.0)
        assert nd2 <= nd1


class TestCompleteness:
    def test_superset_is_100(self, rng):
        pts = rng.uniform(size=(200, 3))
        sup = np.vstack([pts, rng.uniform(size=(50, 3))])
        assert completeness(PointCloud(points=pts), PointCloud(points=sup), 1e-12) == 100.0

    def test_half_deleted(self, rng):
        # well-separated cloud: points on a unit grid
        n = 10
        pts = np.stack(np.meshgrid(*[np.arange(n)] * 3, indexing="ij"), -1).reshape(-1, 3).astype(float)
        half = pts[::2]
        c = completeness(PointCloud(points=pts), PointCloud(points=half), 1e-9)
        assert abs(c - 50.0) <= 100.0 / len(pts)

    def test_alpha_monotonicity(self, rng):
        t = PointCloud(points=rng.uniform(size=(300, 3)))
        c = PointCloud(points=rng.uniform(size=(100, 3)))
        vals = [completeness(t, c, a) for a in (0.01, 0.05, 0.2, 1.0)]
        assert all(x <= y for x, y in zip(vals, vals[1:]))

    def test_point_addition_monotonicity(self, rng):
        t = PointCloud(points=rng.uniform(size=(300, 3)))
        base = rng.uniform(size=(50, 3))
        more = np.vstack([base, rng.uniform(size=(100, 3))])
        a = completeness(t, PointCloud(points=base), 0.05)
        b = completeness(t, PointCloud(points=more), 0.05)
        assert b >= a

    def test_rigid_invariance_of_both_metrics(self, rng):
        t = rng.uniform(size=(200, 3))
        c = rng.uniform(size=(150, 3))
        q = np.linalg.qr(rng.normal(size=(3, 3)))[0]
        shift = np.array([3.0, -1.0, 2.0])
        comp0 = completeness(PointCloud(points=t), PointCloud(points=c), 0.05)
        comp1 = completeness(PointCloud(points=t @ q.T + shift),
                             PointCloud(points=c @ q.T + shift), 0.05)
        nd0 = normalized_distance(PointCloud(points=c), PointCloud(points=t), 2.0)
        nd1 = normalized_distance(PointCloud(points=c @ q.T + shift),
                                  PointCloud(points=t @ q.T + shift), 2.0)
        assert comp0 == comp1
        assert abs(nd0 - nd1) < 1e-9 * max(nd0, 1.0)


class TestDownsampleBaseline:
    def test_single_point(self):
        bounds = Bounds(origin=np.zeros(3), edge=1.0)
        cloud = PointCloud(points=np.array([[0.5, 0.5, 0.5]]))
        base = downsample_baseline(cloud, 8, bounds)
        assert len(base) == 1
        np.testing.assert_allclose(base.points[0], [0.5625, 0.5625, 0.5625])

    def test_sphere_quantization_error(self, rng):
        bounds = Bounds(origin=np.zeros(3), edge=1.0)
        g = 32
        theta = rng.uniform(0, np.pi, 4000)
        phi = rng.uniform(0, 2 * np.pi, 4000)
        pts = 0.35 * np.stack([np.sin(theta) * np.cos(phi),
                               np.sin(theta) * np.sin(phi),
                               np.cos(theta)], 1) + 0.5
        cloud = PointCloud(points=pts)
        base = downsample_baseline(cloud, g, bounds)
        nd = normalized_distance(base, cloud, 1.0)
        # direct oracle: mean distance from occupied voxel centers to sphere cloud
        d = brute_nearest(base.points, pts)
        assert nd == pytest.approx(d.mean(), rel=1e-12)
        assert nd < np.sqrt(3) / g  # within one voxel diagonal

    def test_resolution_floor(self):
        with pytest.raises(ValueError):
            downsample_baseline(PointCloud(points=np.zeros((1, 3))), 4,
                                Bounds(origin=np.zeros(3) - 1, edge=2.0))


class TestF1:
    def test_perfect_prediction(self, rng):
        labels = (rng.uniform(size=(8, 8, 8)) < 0.3).astype(float)
        assert f1_inside(labels, labels) == 1.0

    def test_all_outside_prediction(self, rng):
        labels = np.zeros((8, 8, 8))
        labels[2:4, 2:4, 2:4] = 1
        assert f1_inside(np.zeros((8, 8, 8)), labels) == 0.0

    def test_known_value(self):
        labels = np.array([1, 1, 0, 0])
        pred = np.array([0.9, 0.1, 0.8, 0.2])
        # tp=1, fp=1, fn=1 -> precision=recall=0.5 -> f1=0.5
        assert f1_inside(pred, labels) == pytest.approx(0.5)

    def test_voxel_accuracy(self):
        labels = np.array([1, 0, 1, 0])
        pred = np.array([0.9, 0.4, 0.2, 0.1])
        assert voxel_accuracy(pred, labels) == pytest.approx(0.75)


class TestReport:
    def test_cell_format(self):
        assert format_cell(97.249, 0.0039801) == "97.25%/0.003980"

    def test_report_accumulates_and_writes(self, tmp_path, rng):
        report = EvalReport(dm=2.0, alpha=0.002)
        pts = rng.uniform(size=(100, 3))
        report.add("shape0", PointCloud(points=pts), PointCloud(points=pts.copy()))
        assert report.rows[0]["completeness"] == 100.0
        assert report.rows[0]["normalized_distance"] == 0.0
        assert report.summary() == "100.00%/0.000000"
        path = report.write_csv(tmp_path / "report.csv")
        text = path.read_text()
        assert "shape0" in text and "mean" in text
