"""Multi-scale encoder-decoder feature extractor with local self-attention skips."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

DTYPE = torch.float64


@dataclass
class FeaturePyramid:
    """Per-view feature maps ordered coarsest -> finest, each (C, H_s, W_s)."""

    maps: list

    def __post_init__(self):
        if len(self.maps) != 3:
            raise ValueError(f"expected 3 scales, got {len(self.maps)}")


def local_self_attention(x, w_q, w_k, w_v, rel_pos, return_weights=False):
    """Masked local self-attention over a square pixel window.

    x: (C_in, H, W) or (B, C_in, H, W). w_q/w_k/w_v: (d_out, C_in) projections.
    rel_pos: (2k-1, 2k-1, d_out) relative-position table for window size k,
    indexed by (row offset + k - 1, col offset + k - 1). Per pixel, logits are
    q.k + q.r over the window; positions outside the image are excluded from
    the softmax, so the remaining weights sum to 1. With return_weights=True
    also returns the (B, k*k, H, W) softmax weights.
    """
    squeeze = x.ndim == 3
    if squeeze:
        x = x.unsqueeze(0)
    if rel_pos.shape[0] != rel_pos.shape[1] or rel_pos.shape[0] % 2 == 0:
        raise ValueError(f"relative-position table must be odd square, got {tuple(rel_pos.shape)}")
    window = (rel_pos.shape[0] + 1) // 2
    if window % 2 == 0:
        raise ValueError(f"window size must be odd, got {window}")
    d_out = w_v.shape[0]
    if w_q.shape != w_k.shape or w_q.shape[0] != d_out or rel_pos.shape[2] != d_out:
        raise ValueError("projection/table shapes are inconsistent")
    b, _, h, w = x.shape
    pad = window // 2
    kk = window * window

    q = torch.einsum("oc,bchw->bohw", w_q, x)
    keys = torch.einsum("oc,bchw->bohw", w_k, x)
    vals = torch.einsum("oc,bchw->bohw", w_v, x)

    k_unf = F.unfold(keys, window, padding=pad).reshape(b, d_out, kk, h, w)
    v_unf = F.unfold(vals, window, padding=pad).reshape(b, d_out, kk, h, w)
    inside = F.unfold(torch.ones(1, 1, h, w, dtype=x.dtype, device=x.device),
                      window, padding=pad).reshape(1, kk, h, w) > 0.5

    # Window offsets in unfold order are (di, dj) with di, dj in [-pad, pad];
    # the table stores offsets up to +-(k-1), so the window uses its center block.
    offs = torch.arange(-pad, pad + 1, device=x.device)
    r_sel = rel_pos[offs.repeat_interleave(window) + window - 1,
                    offs.repeat(window) + window - 1]          # (kk, d_out)

    logits = torch.einsum("bohw,bokhw->bkhw", q, k_unf)
    logits = logits + torch.einsum("bohw,ko->bkhw", q, r_sel)
    logits = logits.masked_fill(~inside, float("-inf"))
    weights = torch.softmax(logits, dim=1)
    out = torch.einsum("bkhw,bokhw->bohw", weights, v_unf)
    if squeeze:
        out = out.squeeze(0)
    if return_weights:
        return out, weights
    return out


class LocalSelfAttention(nn.Module):
    """Learnable local self-attention block with a relative-position table."""

    def __init__(self, d_in, d_out, window=3):
        super().__init__()
        if window % 2 == 0:
            raise ValueError(f"window size must be odd, got {window}")
        self.window = window
        self.w_q = nn.Parameter(torch.empty(d_out, d_in, dtype=DTYPE))
        self.w_k = nn.Parameter(torch.empty(d_out, d_in, dtype=DTYPE))
        self.w_v = nn.Parameter(torch.empty(d_out, d_in, dtype=DTYPE))
        self.rel_pos = nn.Parameter(
            torch.zeros(2 * window - 1, 2 * window - 1, d_out, dtype=DTYPE))
        for weight in (self.w_q, self.w_k, self.w_v):
            nn.init.kaiming_uniform_(weight, a=math.sqrt(5))

    def forward(self, x):
        return local_self_attention(x, self.w_q, self.w_k, self.w_v, self.rel_pos)


def _conv_block(c_in, c_out, stride=1):
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
    )


class FeatureExtractor(nn.Module):
    """U-Net over three resolutions; each skip passes through an attention block.

    forward() takes (B, 3, H, W) images with H, W divisible by 4 and returns
    feature maps [(B, C, H/4, W/4), (B, C, H/2, W/2), (B, C, H, W)] ordered
    coarsest to finest, each with `out_channels` channels.
    """

    def __init__(self, out_channels=32, base_channels=16, window=3):
        super().__init__()
        c0, c1, c2 = base_channels, base_channels * 2, base_channels * 4
        self.enc0 = _conv_block(3, c0)
        self.enc1 = _conv_block(c0, c1, stride=2)
        self.enc2 = _conv_block(c1, c2, stride=2)
        self.attn0 = LocalSelfAttention(c0, c0, window)
        self.attn1 = LocalSelfAttention(c1, c1, window)
        self.up1 = nn.Sequential(
            nn.ConvTranspose2d(c2, c1, 3, stride=2, padding=1, output_padding=1,
                               bias=False),
            nn.BatchNorm2d(c1),
            nn.ReLU(inplace=True),
        )
        self.dec1 = _conv_block(c1 * 2, c1)
        self.up0 = nn.Sequential(
            nn.ConvTranspose2d(c1, c0, 3, stride=2, padding=1, output_padding=1,
                               bias=False),
            nn.BatchNorm2d(c0),
            nn.ReLU(inplace=True),
        )
        self.dec0 = _conv_block(c0 * 2, c0)
        self.head2 = nn.Conv2d(c2, out_channels, 1)
        self.head1 = nn.Conv2d(c1, out_channels, 1)
        self.head0 = nn.Conv2d(c0, out_channels, 1)
        self.to(DTYPE)

    def forward(self, images):
        h, w = images.shape[-2:]
        if h % 4 or w % 4:
            raise ValueError(f"image size must be divisible by 4, got {h}x{w}")
        e0 = self.enc0(images)
        e1 = self.enc1(e0)
        e2 = self.enc2(e1)
        d1 = self.dec1(torch.cat([self.up1(e2), self.attn1(e1)], dim=1))
        d0 = self.dec0(torch.cat([self.up0(d1), self.attn0(e0)], dim=1))
        return [self.head2(e2), self.head1(d1), self.head0(d0)]


def extract_features(extractor: FeatureExtractor, image: torch.Tensor) -> FeaturePyramid:
    """Pyramid for one (3, H, W) image, coarsest to finest."""
    maps = extractor(image.unsqueeze(0))
    return FeaturePyramid([m.squeeze(0) for m in maps])
