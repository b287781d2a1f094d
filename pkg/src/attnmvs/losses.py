"""Multi-metric training objective: feature-correspondence, neighbor-balance and depth terms.

All terms are means over their valid elements rather than raw sums, keeping
the configured trade-off weights meaningful across image resolutions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .geometry import Camera, backproject, bilinear_sample, project

logger = logging.getLogger(__name__)


def _safe_norm(sq_sum: torch.Tensor) -> torch.Tensor:
    """sqrt that is exactly zero (with a finite gradient) at zero input."""
    positive = sq_sum > 0
    return torch.where(positive, torch.sqrt(sq_sum.clamp(min=1e-300)),
                       torch.zeros_like(sq_sum))


@dataclass
class LossWeights:
    """Trade-off constants of the training objective."""

    beta_feature: float = 1.0            # weight of the feature-wise term
    beta_depth: float = 1.0              # weight of the depth term
    epsilon: float = 0.01                # neighbor-balance share inside the feature term
    scale_weights: tuple = (0.5, 1.0, 2.0)  # depth-term weights, coarsest -> finest
    block: int = 3                       # neighbor-balance window size

    def __post_init__(self):
        if min(self.beta_feature, self.beta_depth, self.epsilon) < 0:
            raise ValueError("loss weights must be non-negative")
        if any(w < 0 for w in self.scale_weights):
            raise ValueError("scale weights must be non-negative")
        if self.block % 2 == 0 or self.block < 1:
            raise ValueError(f"block size must be odd and positive, got {self.block}")


def position_loss(f_ref: torch.Tensor, f_srcs, ref_cam: Camera, src_cams,
                  gt_depth: torch.Tensor, valid: torch.Tensor):
    """Mean feature distance between reference pixels and their true matches.

    Every valid reference pixel is projected at its ground-truth depth into
    each source view; the bilinearly sampled source feature is pulled toward
    the reference feature by its L2 distance. Returns (loss, pair_count);
    the loss is 0 (with a warning) when no (pixel, view) pair is valid.
    """
    if not f_srcs:
        raise ValueError("need at least one source view")
    points = backproject(ref_cam, gt_depth)
    total = gt_depth.new_zeros(())
    pairs = 0
    for f_src, cam in zip(f_srcs, src_cams):
        u, v, z = project(cam, points)
        sampled, in_bounds = bilinear_sample(f_src, u, v)
        mask = valid & in_bounds & (z > 0)
        diff = f_ref - sampled
        dist = _safe_norm((diff * diff).sum(dim=0))
        total = total + (dist * mask.to(dist.dtype)).sum()
        pairs += int(mask.sum())
    if pairs == 0:
        logger.warning("position loss: no valid (pixel, view) pair")
        return total * 0.0, 0
    return total / pairs, pairs


def neighbor_balance_loss(f: torch.Tensor, block: int = 3) -> torch.Tensor:
    """Mean feature distance between each pixel and the others in its block.

    Ordered (i, j) pairs inside the image count once each, so a pair of
    mutually visible pixels contributes its distance twice before the mean.
    """
    if block % 2 == 0:
        raise ValueError(f"block size must be odd, got {block}")
    c, h, w = f.shape
    pad = block // 2
    kk = block * block
    center = kk // 2
    f_unf = F.unfold(f.unsqueeze(0), block, padding=pad).reshape(c, kk, h, w)
    inside = F.unfold(torch.ones(1, 1, h, w, dtype=f.dtype, device=f.device),
                      block, padding=pad).reshape(kk, h, w) > 0.5
    diff = f.unsqueeze(1) - f_unf                       # (C, kk, H, W)
    dist = _safe_norm((diff * diff).sum(dim=0))
    keep = inside.clone()
    keep[center] = False
    count = int(keep.sum())
    if count == 0:
        return f.new_zeros(())
    return (dist * keep.to(dist.dtype)).sum() / count


def feature_loss(pos, nei, epsilon: float = 0.01):
    """Combined feature-wise term: position + epsilon * neighbor balance."""
    if epsilon < 0:
        raise ValueError(f"epsilon must be non-negative, got {epsilon}")
    return pos + epsilon * nei


def depth_loss(preds, gts, masks, scale_weights):
    """Weighted multi-scale mean absolute depth error.

    Per scale: weight * mean over valid pixels of |pred - gt|; scales with an
    empty valid set contribute 0 and raise a warning. Returns (loss, count).
    """
    if not (len(preds) == len(gts) == len(masks) == len(scale_weights)):
        raise ValueError("per-scale lists must have equal lengths")
    total = preds[0].new_zeros(())
    n_valid = 0
    for pred, gt, mask, weight in zip(preds, gts, masks, scale_weights):
        count = int(mask.sum())
        if count == 0:
            logger.warning("depth loss: scale with no valid ground-truth pixel")
            continue
        err = ((pred - gt).abs() * mask.to(pred.dtype)).sum() / count
        total = total + weight * err
        n_valid += count
    return total, n_valid


def multi_metric_loss(feature_terms, depth_terms, beta_feature=1.0, beta_depth=1.0):
    """Total objective: sum over scales of b1 * feature + b2 * depth terms."""
    if min(beta_feature, beta_depth) < 0:
        raise ValueError("beta weights must be non-negative")
    if len(feature_terms) != len(depth_terms):
        raise ValueError("per-scale term lists must have equal lengths")
    total = None
    for fea, dep in zip(feature_terms, depth_terms):
        term = beta_feature * fea + beta_depth * dep
        total = term if total is None else total + term
    if total is None:
        raise ValueError("need at least one scale")
    return total


def downsample_ground_truth(gt_depth: torch.Tensor, valid: torch.Tensor, factor: int):
    """Nearest-neighbor decimation that keeps a pixel only if its source was valid."""
    if factor == 1:
        return gt_depth, valid
    return gt_depth[::factor, ::factor], valid[::factor, ::factor]
