"""Evaluation: completeness, normalized distance, the coarse-grid
downsample baseline, and F1 of inside voxels.

Nearest-neighbor queries use an exact kd-tree; there is no approximate
mode anywhere in scoring.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .volumetric import Bounds, PointCloud, voxelize

DEFAULT_ALPHA_FACTOR = 0.001  # alpha_eval = 0.001 * max category diameter


def normalized_distance(p_complete, p_true, dm):
    """Mean exact nearest distance from the completed cloud to the truth,
    divided by the category's maximum shape diameter."""
    if len(p_complete) == 0 or len(p_true) == 0:
        raise ValueError("normalized_distance needs two nonempty clouds")
    if dm <= 0:
        raise ValueError("dm must be positive")
    d, _ = cKDTree(p_true.points).query(p_complete.points)
    return float(d.mean() / dm)


def completeness(p_true, p_complete, alpha):
    """Percentage of ground-truth points within `alpha` of the completed
    cloud."""
    if len(p_true) == 0:
        raise ValueError("completeness needs a nonempty ground-truth cloud")
    if len(p_complete) == 0:
        return 0.0
    d, _ = cKDTree(p_complete.points).query(p_true.points)
    return float(100.0 * (d <= alpha).mean())


def downsample_baseline(p_true, g, bounds):
    """Occupied-voxel centers of the g-resolution voxelization of the
    truth: the quality proxy for methods limited to coarse-grid output."""
    if g < 8:
        raise ValueError("baseline resolution must be at least 8")
    grid = voxelize(p_true, g, bounds)
    idx = np.argwhere(grid.values[0] > 0)
    return PointCloud(points=grid.voxel_centers(idx))


def f1_inside(pred, labels, threshold=0.5):
    """F1 of the inside class; `pred` holds inside probabilities, `labels`
    binary ground truth.  Degenerate precision/recall denominators give 0."""
    p = np.asarray(pred).reshape(-1) >= threshold
    t = np.asarray(labels).reshape(-1) >= 0.5
    if p.shape != t.shape:
        raise ValueError("prediction and label shapes differ")
    tp = float(np.logical_and(p, t).sum())
    if tp == 0:
        return 0.0
    precision = tp / p.sum()
    recall = tp / t.sum()
    return 2 * precision * recall / (precision + recall)


def voxel_accuracy(pred, labels, threshold=0.5):
    """Fraction of voxels whose thresholded prediction matches the label."""
    p = np.asarray(pred).reshape(-1) >= threshold
    t = np.asarray(labels).reshape(-1) >= 0.5
    return float((p == t).mean())


def format_cell(completeness_pct, ndist):
    """The `completeness/normalized dist` report cell format."""
    return f"{completeness_pct:.2f}%/{ndist:.6f}"


@dataclass
class EvalReport:
    """Per-shape completion scores plus aggregates."""

    dm: float
    alpha: float
    rows: list = field(default_factory=list)

    def add(self, shape_id, p_true, p_complete):
        comp = completeness(p_true, p_complete, self.alpha)
        nd = normalized_distance(p_complete, p_true, self.dm)
        self.rows.append({
            "id": shape_id,
            "completeness": comp,
            "normalized_distance": nd,
            "true_points": len(p_true),
            "completed_points": len(p_complete),
        })
        return self.rows[-1]

    def mean_completeness(self):
        return float(np.mean([r["completeness"] for r in self.rows]))

    def mean_normalized_distance(self):
        return float(np.mean([r["normalized_distance"] for r in self.rows]))

    def summary(self):
        return format_cell(self.mean_completeness(), self.mean_normalized_distance())

    def write_csv(self, path):
        cols = ["id", "completeness", "normalized_distance",
                "true_points", "completed_points"]
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=cols)
            writer.writeheader()
            for row in self.rows:
                writer.writerow(row)
            writer.writerow({"id": "mean",
                             "completeness": self.mean_completeness(),
                             "normalized_distance": self.mean_normalized_distance(),
                             "true_points": "", "completed_points": ""})
        return path
