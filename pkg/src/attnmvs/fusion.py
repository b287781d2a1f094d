"""Depth-map post-processing: confidence filtering, cross-view consistency, fusion."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .geometry import Camera, backproject, bilinear_sample, pixel_grid, project

logger = logging.getLogger(__name__)

DTYPE = torch.float64


@dataclass
class FusionThresholds:
    prob_min: float = 0.3        # confidence cut
    reproj_max: float = 1.0      # forward-backward pixel error, px
    rel_depth_max: float = 0.01  # forward-backward relative depth error
    min_views: int = 3           # consistent views required to keep a pixel

    def __post_init__(self):
        if not 0.0 <= self.prob_min <= 1.0:
            raise ValueError(f"prob_min must be in [0, 1], got {self.prob_min}")
        if self.reproj_max <= 0 or self.rel_depth_max <= 0:
            raise ValueError("reprojection thresholds must be positive")
        if self.min_views < 1:
            raise ValueError(f"min_views must be >= 1, got {self.min_views}")


@dataclass
class PointCloud:
    points: np.ndarray                # (M, 3)
    colors: np.ndarray = None         # (M, 3) uint8
    source_view: np.ndarray = None    # (M,)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(self.points).all():
            raise ValueError("point coordinates must be finite")
        if self.colors is None:
            self.colors = np.full((len(self.points), 3), 255, dtype=np.uint8)
        else:
            self.colors = np.asarray(self.colors)
            if self.colors.dtype != np.uint8:
                if self.colors.min() < 0 or self.colors.max() > 255:
                    raise ValueError("colors must lie in [0, 255]")
                self.colors = self.colors.astype(np.uint8)
        if self.source_view is None:
            self.source_view = np.zeros(len(self.points), dtype=np.int64)
        else:
            self.source_view = np.asarray(self.source_view, dtype=np.int64)

    def __len__(self):
        return len(self.points)


def photometric_filter(confidence, prob_min) -> np.ndarray:
    """Keep pixels whose confidence reaches prob_min."""
    return np.asarray(confidence) >= prob_min


@dataclass
class _PairCheck:
    passes: torch.Tensor      # (H, W) consistency with the other view
    reproj_depth: torch.Tensor  # depth of this view's pixels as seen via the other view
    target_x: torch.Tensor    # nearest pixel hit in the other view
    target_y: torch.Tensor


def _check_pair(depth_v, cam_v: Camera, depth_w, cam_w: Camera,
                thresholds: FusionThresholds) -> _PairCheck:
    """Forward-backward consistency of view v's depth against view w."""
    h, w = depth_v.shape
    points = backproject(cam_v, depth_v)
    u, v, z = project(cam_w, points)
    sampled, inb = bilinear_sample(depth_w.unsqueeze(0), u, v)
    d_w = sampled.squeeze(0)
    ok = inb & (z > 0) & (d_w > 0) & (depth_v > 0)

    # Lift the matched pixel of w at its own depth and look back into v.
    rays = torch.stack([u, v, torch.ones_like(u)], dim=0).reshape(3, -1)
    m = torch.as_tensor(cam_w.rotation.T @ np.linalg.inv(cam_w.intrinsics),
                        dtype=depth_v.dtype)
    center = torch.as_tensor(cam_w.center, dtype=depth_v.dtype)
    back = (m @ rays).reshape(3, h, w) * d_w.unsqueeze(0) + center.reshape(3, 1, 1)
    u2, v2, z2 = project(cam_v, back)

    xs, ys = pixel_grid(h, w, depth_v.dtype)
    err_px = torch.sqrt((u2 - xs) ** 2 + (v2 - ys) ** 2)
    err_rel = (z2 - depth_v).abs() / depth_v.clamp(min=1e-9)
    ok = ok & (z2 > 0) & (err_px <= thresholds.reproj_max) \
        & (err_rel <= thresholds.rel_depth_max)
    return _PairCheck(ok, z2, u.round().long(), v.round().long())


def _as_depth_tensors(depth_maps):
    return [torch.as_tensor(np.asarray(d), dtype=DTYPE) for d in depth_maps]


def geometric_filter(depth_maps, cameras, thresholds: FusionThresholds):
    """Per-view masks of pixels consistent with at least min_views other views."""
    if len(depth_maps) < 2:
        raise ValueError("geometric filtering needs at least two views")
    depths = _as_depth_tensors(depth_maps)
    masks = []
    with torch.no_grad():
        for v in range(len(depths)):
            counts = torch.zeros_like(depths[v], dtype=torch.int64)
            for w in range(len(depths)):
                if w == v:
                    continue
                counts += _check_pair(depths[v], cameras[v], depths[w], cameras[w],
                                      thresholds).passes.long()
            masks.append(((counts >= thresholds.min_views)
                          & (depths[v] > 0)).numpy())
    return masks


def fuse(depth_maps, images, cameras, masks,
         thresholds: FusionThresholds = None, view_ids=None) -> PointCloud:
    """Back-project filtered pixels into one cloud, averaging consistent estimates.

    Depths of consistent views are averaged in each reference view's own
    parameterization before back-projection. A pixel is emitted unless a
    filtered pixel of a lower-labelled view projects onto it within the
    consistency thresholds; labels (view_ids, default list position) make the
    suppression independent of the order the views are handed in.
    """
    thresholds = thresholds or FusionThresholds()
    depths = _as_depth_tensors(depth_maps)
    n_views = len(depths)
    view_ids = list(range(n_views)) if view_ids is None else list(view_ids)
    mask_tensors = [torch.as_tensor(np.asarray(m, dtype=bool)) for m in masks]

    checks = {}
    with torch.no_grad():
        for v in range(n_views):
            for w in range(n_views):
                if v != w:
                    checks[v, w] = _check_pair(depths[v], cameras[v], depths[w],
                                               cameras[w], thresholds)

        claimed = [torch.zeros_like(mask_tensors[v]) for v in range(n_views)]
        for w in range(n_views):
            for v in range(n_views):
                if v == w or view_ids[w] > view_ids[v]:
                    continue
                chk = checks[w, v]
                src = mask_tensors[w] & chk.passes
                tx = chk.target_x[src].clamp(0, depths[v].shape[1] - 1)
                ty = chk.target_y[src].clamp(0, depths[v].shape[0] - 1)
                claimed[v][ty, tx] = True

        all_points, all_colors, all_views = [], [], []
        for v in range(n_views):
            emit = mask_tensors[v] & ~claimed[v]
            if not bool(emit.any()):
                continue
            total = depths[v].clone()
            count = torch.ones_like(depths[v])
            for w in range(n_views):
                if w == v:
                    continue
                chk = checks[v, w]
                total = total + torch.where(chk.passes, chk.reproj_depth,
                                            torch.zeros_like(total))
                count = count + chk.passes.to(count.dtype)
            fused_depth = total / count
            points = backproject(cameras[v], fused_depth)
            all_points.append(points[:, emit].T.numpy())
            img = torch.as_tensor(np.asarray(images[v]), dtype=DTYPE)
            colors = (img[:, emit].T.numpy() * 255.0).round().clip(0, 255)
            all_colors.append(colors.astype(np.uint8))
            all_views.append(np.full(int(emit.sum()), view_ids[v], dtype=np.int64))

    if not all_points:
        logger.warning("fusion produced an empty point cloud")
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.uint8),
                          np.zeros(0, dtype=np.int64))
    return PointCloud(np.concatenate(all_points), np.concatenate(all_colors),
                      np.concatenate(all_views))
