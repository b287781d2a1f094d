"""Matching volumes: warped-feature correlation per hypothesis, variance-aggregated."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .geometry import (Camera, DepthHypothesisField, plane_homography,
                       warp_by_depth_field, warp_by_homography)


@dataclass
class FeatureVolume:
    """Per-source-view correlation volume (G, D, H, W) with warp validity (D, H, W)."""

    data: torch.Tensor
    valid: torch.Tensor


@dataclass
class CostVolume:
    """Aggregated matching cost (G, D, H, W); entries are variances, hence >= 0."""

    data: torch.Tensor
    view_count: int


def groupwise_correlation(f_ref: torch.Tensor, f_src: torch.Tensor,
                          groups: int) -> torch.Tensor:
    """Per-group normalized inner products between two feature stacks.

    Channels come first and are split into `groups` contiguous blocks; each
    group g yields (G/C) * <ref_g, src_g>. Trailing dimensions broadcast, so
    (C,) x (C,) -> (G,) and (C, H, W) x (C, D, H, W) -> (G, D, H, W).
    """
    c = f_ref.shape[0]
    if c != f_src.shape[0]:
        raise ValueError(f"channel counts differ: {c} vs {f_src.shape[0]}")
    if c % groups:
        raise ValueError(f"channels {c} not divisible by group count {groups}")
    per = c // groups
    shape = torch.broadcast_shapes(f_ref.shape[1:], f_src.shape[1:])
    a = f_ref.reshape(groups, per, *f_ref.shape[1:])
    b = f_src.reshape(groups, per, *f_src.shape[1:])
    return (a * b).mean(dim=1).expand(groups, *shape)


def build_feature_volume(f_ref: torch.Tensor, f_src: torch.Tensor,
                         ref_cam: Camera, src_cam: Camera,
                         depths: DepthHypothesisField, groups: int,
                         planar: bool = False) -> FeatureVolume:
    """Correlate reference features against the source warped to each hypothesis.

    With planar=True the hypotheses must be spatially constant and each slice
    is warped through a single plane-induced homography; otherwise every pixel
    is reprojected at its own hypothesis. Both paths agree for constant fields.
    """
    values = depths.values
    if f_ref.shape != f_src.shape:
        raise ValueError("reference and source maps must share a shape")
    if planar:
        warped, valid = [], []
        for d in range(values.shape[0]):
            hom = plane_homography(ref_cam, src_cam, float(values[d, 0, 0]))
            res = warp_by_homography(f_src, hom)
            warped.append(res.warped)
            valid.append(res.valid)
        warped = torch.stack(warped, dim=1)      # (C, D, H, W)
        valid = torch.stack(valid, dim=0)        # (D, H, W)
    else:
        res = warp_by_depth_field(f_src, ref_cam, src_cam, depths)
        warped, valid = res.warped, res.valid
    # warped is exactly zero at invalid cells, so the correlation already is.
    corr = groupwise_correlation(f_ref.unsqueeze(1), warped, groups)
    return FeatureVolume(corr, valid)


def variance_aggregate(volumes) -> CostVolume:
    """Per-cell variance of the per-view volumes.

    Cells a view saw through an invalid warp are left out of that cell's mean
    and variance (the effective view count varies per cell); cells valid in no
    view are zero.
    """
    if not volumes:
        raise ValueError("need at least one feature volume")
    shape = volumes[0].data.shape
    for vol in volumes:
        if vol.data.shape != shape:
            raise ValueError("feature volumes must share a shape")
    counts = torch.zeros_like(volumes[0].valid, dtype=volumes[0].data.dtype)
    total = torch.zeros_like(volumes[0].data)
    for vol in volumes:
        counts = counts + vol.valid.to(total.dtype)
        total = total + vol.data
    safe = counts.clamp(min=1.0)
    mean = total / safe
    var = torch.zeros_like(total)
    for vol in volumes:
        diff = (vol.data - mean) * vol.valid.to(total.dtype)
        var = var + diff * diff
    return CostVolume(var / safe, view_count=len(volumes))
