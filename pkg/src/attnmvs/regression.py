"""Cost-volume regularization, depth regression, uncertainty and adaptive ranges."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .cost_volume import CostVolume
from .geometry import DepthHypothesisField

DTYPE = torch.float64


@dataclass
class ProbabilityVolume:
    """Softmax weights over depth hypotheses, shape (D, H, W), sums to 1 along D."""

    probs: torch.Tensor
    scale: int = 0


@dataclass
class DepthPrediction:
    """Regressed depth and the standard deviation of its hypothesis distribution."""

    depth: torch.Tensor
    sigma: torch.Tensor


def conv3d_slices(x, weight, bias=None, stride=1):
    """3x3x3 conv3d (padding 1) decomposed into batched 2D convolutions.

    Volumes are laid out depth-major as (D, C, H, W) so each depth tap of the
    kernel is one conv2d over a contiguous slab; torch's native float64 conv3d
    takes a far slower path on CPU. Matches F.conv3d to rounding error.
    """
    d = x.shape[0]
    xp = F.pad(x, (0, 0, 0, 0, 0, 0, 1, 1))          # pad the depth axis
    d_out = (d + 2 - 3) // stride + 1
    out = None
    for kz in range(3):
        xs = xp[kz:kz + (d_out - 1) * stride + 1:stride]
        y = F.conv2d(xs, weight[:, :, kz], None, stride=stride, padding=1)
        out = y if out is None else out + y
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    return out


class Conv3dBlock(nn.Module):
    """conv3d (decomposed, depth-major layout) + BN + ReLU.

    BatchNorm2d over (D, C, H, W) normalizes each channel over D*H*W, which is
    exactly BatchNorm3d on the equivalent (1, C, D, H, W) volume.
    """

    def __init__(self, c_in, c_out, stride=1, relu=True):
        super().__init__()
        self.stride = stride
        self.relu = relu
        self.weight = nn.Parameter(torch.empty(c_out, c_in, 3, 3, 3, dtype=DTYPE))
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
        self.bn = nn.BatchNorm2d(c_out).to(DTYPE)

    def forward(self, x):
        y = self.bn(conv3d_slices(x, self.weight, stride=self.stride))
        return F.relu(y, inplace=True) if self.relu else y


class Deconv3dBlock(nn.Module):
    """Stride-2 transposed conv3d + BN + ReLU (native path is already fast)."""

    def __init__(self, c_in, c_out):
        super().__init__()
        self.deconv = nn.ConvTranspose3d(c_in, c_out, 3, stride=2, padding=1,
                                         output_padding=1, bias=False).to(DTYPE)
        self.bn = nn.BatchNorm2d(c_out).to(DTYPE)

    def forward(self, x, like):
        vol = x.transpose(0, 1).unsqueeze(0)          # (1, C, D, H, W)
        target = (like.shape[0], like.shape[2], like.shape[3])
        y = self.deconv(vol, output_size=target)
        y = y.squeeze(0).transpose(0, 1)
        return F.relu(self.bn(y), inplace=True)


class CostRegularizer(nn.Module):
    """Three-level 3D hourglass mapping a (G, D, H, W) cost volume to depth scores.

    Downsampling strides 2 along depth and both image axes; decoder levels add
    the matching encoder features back before a final single-channel projection.
    """

    def __init__(self, in_channels=8, base_channels=8):
        super().__init__()
        c0, c1, c2 = base_channels, base_channels * 2, base_channels * 4
        self.conv0 = Conv3dBlock(in_channels, c0)
        self.down1 = Conv3dBlock(c0, c1, stride=2)
        self.conv1 = Conv3dBlock(c1, c1)
        self.down2 = Conv3dBlock(c1, c2, stride=2)
        self.conv2 = Conv3dBlock(c2, c2)
        self.up1 = Deconv3dBlock(c2, c1)
        self.up0 = Deconv3dBlock(c1, c0)
        self.proj_weight = nn.Parameter(torch.empty(1, c0, 3, 3, 3, dtype=DTYPE))
        self.proj_bias = nn.Parameter(torch.zeros(1, dtype=DTYPE))
        nn.init.kaiming_uniform_(self.proj_weight, a=math.sqrt(5))

    def forward(self, cost) -> ProbabilityVolume:
        data = cost.data if isinstance(cost, CostVolume) else cost
        if not torch.isfinite(data).all():
            raise ValueError("cost volume contains non-finite entries")
        x = data.transpose(0, 1).contiguous()       # (D, G, H, W) depth-major
        f0 = self.conv0(x)
        f1 = self.conv1(self.down1(f0))
        f2 = self.conv2(self.down2(f1))
        y = self.up1(f2, like=f1) + f1
        y = self.up0(y, like=f0) + f0
        scores = conv3d_slices(y, self.proj_weight, self.proj_bias)
        scores = scores.squeeze(1)                   # (D, H, W)
        return ProbabilityVolume(torch.softmax(scores, dim=0))


def regress_depth(probs, hypotheses) -> torch.Tensor:
    """Expected depth under the probability volume: sum_d P_d * L_d per pixel."""
    p = probs.probs if isinstance(probs, ProbabilityVolume) else probs
    values = hypotheses.values if isinstance(hypotheses, DepthHypothesisField) else hypotheses
    if p.shape != values.shape:
        raise ValueError(f"probability {tuple(p.shape)} and hypothesis "
                         f"{tuple(values.shape)} shapes differ")
    return (p * values).sum(dim=0)


def estimate_uncertainty(probs, hypotheses, depth) -> torch.Tensor:
    """Standard deviation of the per-pixel depth distribution around `depth`."""
    p = probs.probs if isinstance(probs, ProbabilityVolume) else probs
    values = hypotheses.values if isinstance(hypotheses, DepthHypothesisField) else hypotheses
    var = (p * (values - depth.unsqueeze(0)) ** 2).sum(dim=0)
    return torch.sqrt(var.clamp(min=0.0))


def adaptive_range(depth, sigma, range_factor, depth_min, depth_max,
                   min_halfwidth):
    """Per-pixel search interval for the next scale: depth +- factor * sigma.

    Intervals are clamped to the camera depth range. Where sigma collapses to
    zero the half-width falls back to `min_halfwidth` (one hypothesis spacing
    of the current scale) so the next scale still gets distinct samples.
    """
    if range_factor <= 0:
        raise ValueError(f"range factor must be positive, got {range_factor}")
    if bool((sigma < 0).any()):
        raise ValueError("sigma must be non-negative")
    if not torch.is_tensor(min_halfwidth):
        min_halfwidth = torch.full_like(depth, float(min_halfwidth))
    half = range_factor * sigma
    half = torch.where(half > 1e-9, half, min_halfwidth)
    lo = (depth - half).clamp(min=depth_min, max=depth_max)
    hi = (depth + half).clamp(min=depth_min, max=depth_max)
    return lo, hi


def sample_adaptive_depths(lo, hi, count, target_shape,
                           scale: int = 0) -> DepthHypothesisField:
    """Uniform per-pixel hypotheses over bilinearly upsampled intervals.

    lo/hi are (H_s, W_s) interval bounds; they are resampled to target_shape
    and `count` evenly spaced values (both endpoints included) are emitted at
    every pixel.
    """
    if count < 2:
        raise ValueError(f"need at least 2 hypotheses, got {count}")
    h, w = target_shape
    bounds = torch.stack([lo, hi], dim=0).unsqueeze(0)       # (1, 2, H_s, W_s)
    if bounds.shape[-2:] != (h, w):
        bounds = F.interpolate(bounds, size=(h, w), mode="bilinear",
                               align_corners=False)
    lo_up, hi_up = bounds[0, 0], bounds[0, 1]
    steps = torch.linspace(0.0, 1.0, count, dtype=lo.dtype,
                           device=lo.device).reshape(count, 1, 1)
    values = lo_up.unsqueeze(0) + (hi_up - lo_up).unsqueeze(0) * steps
    return DepthHypothesisField(values, scale=scale)
