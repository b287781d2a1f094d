"""Point-cloud reconstruction metrics: distance scores and percentage F-scores."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

logger = logging.getLogger(__name__)


@dataclass
class MetricReport:
    accuracy_mm: float
    completeness_mm: float
    overall_mm: float
    precision_pct: float
    recall_pct: float
    f_score_pct: float
    threshold: float

    def as_dict(self):
        return {
            "accuracy_mm": self.accuracy_mm,
            "completeness_mm": self.completeness_mm,
            "overall_mm": self.overall_mm,
            "precision_pct": self.precision_pct,
            "recall_pct": self.recall_pct,
            "f_score_pct": self.f_score_pct,
            "threshold": self.threshold,
        }

    def table_row(self, label="recon"):
        return (f"{label:<16s} Acc. {self.accuracy_mm:8.4f}  "
                f"Comp. {self.completeness_mm:8.4f}  "
                f"Overall {self.overall_mm:8.4f}  "
                f"F({self.threshold:g}) {self.f_score_pct:6.2f}")


def _as_points(cloud):
    points = getattr(cloud, "points", cloud)
    return np.asarray(points, dtype=np.float64).reshape(-1, 3)


def nearest_neighbor_distances(query, reference) -> np.ndarray:
    """Exact Euclidean nearest-neighbor distance from each query point to the
    reference cloud. The tree only picks the neighbor; the distance itself is
    recomputed with the same expression a brute-force scan would use."""
    query = _as_points(query)
    reference = _as_points(reference)
    if len(reference) == 0:
        raise ValueError("reference cloud is empty")
    if len(query) == 0:
        return np.zeros(0)
    _, idx = cKDTree(reference).query(query, k=1)
    return np.linalg.norm(query - reference[idx], axis=1)


def accuracy(recon, gt, max_dist=20.0) -> float:
    """Mean recon-to-ground-truth distance, ignoring outliers beyond max_dist."""
    recon, gt = _as_points(recon), _as_points(gt)
    if len(recon) == 0 or len(gt) == 0:
        raise ValueError("clouds must be non-empty")
    dists = nearest_neighbor_distances(recon, gt)
    kept = dists[dists <= max_dist]
    if len(kept) == 0:
        logger.warning("accuracy: every point rejected as an outlier")
        return float("nan")
    return float(kept.mean())


def completeness(recon, gt, max_dist=20.0) -> float:
    """Mean ground-truth-to-recon distance, ignoring outliers beyond max_dist."""
    return accuracy(gt, recon, max_dist)


def f_score(recon, gt, threshold):
    """Percentage precision/recall within `threshold` and their harmonic mean."""
    if threshold <= 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    recon, gt = _as_points(recon), _as_points(gt)
    if len(recon) == 0 or len(gt) == 0:
        raise ValueError("clouds must be non-empty")
    precision = 100.0 * float((nearest_neighbor_distances(recon, gt) <= threshold).mean())
    recall = 100.0 * float((nearest_neighbor_distances(gt, recon) <= threshold).mean())
    if precision + recall == 0:
        return 0.0, 0.0, 0.0
    return precision, recall, 2.0 * precision * recall / (precision + recall)


def evaluate_clouds(recon, gt, threshold, max_dist=20.0) -> MetricReport:
    acc = accuracy(recon, gt, max_dist)
    comp = completeness(recon, gt, max_dist)
    precision, recall, f1 = f_score(recon, gt, threshold)
    return MetricReport(acc, comp, (acc + comp) / 2.0, precision, recall, f1,
                        threshold)
