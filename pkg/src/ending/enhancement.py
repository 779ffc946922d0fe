"""Prototype-level semantic enhancement.

Per-proposal prototypes are masked averages over the mined features and the
fused feature; the three low-level prototypes are summed, pushed through a
small MLP, and concatenated onto the fused-feature prototype.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeError


def resize_masks_to_grid(masks: torch.Tensor, hw: tuple[int, int]) -> torch.Tensor:
    """Binary masks on a feature grid: area interpolation, then 0.5 threshold.

    Area averaging keeps thin structures alive better than nearest-neighbour
    at coarse strides; the threshold restores a binary mask.
    """
    if masks.shape[-2:] == tuple(hw):
        return (masks > 0.5).to(masks.dtype)
    work = masks if masks.is_floating_point() else masks.float()
    frac = F.interpolate(work, size=hw, mode="area")
    return (frac >= 0.5).to(work.dtype)


def masked_average_pool(
    feature: torch.Tensor, masks: torch.Tensor, valid: torch.Tensor | None = None
) -> torch.Tensor:
    """Mean feature vector under each mask: B x N x c (empty or invalid -> 0).

    `feature` is B x c x h x w, `masks` B x N x H x W (any resolution; they
    are resized to the feature grid first), `valid` B x N flags for padded
    proposals.
    """
    squeeze = feature.ndim == 3
    if squeeze:
        feature = feature.unsqueeze(0)
        masks = masks.unsqueeze(0)
        if valid is not None:
            valid = valid.unsqueeze(0)
    if feature.ndim != 4 or masks.ndim != 4 or feature.shape[0] != masks.shape[0]:
        raise ShapeError(
            f"feature {tuple(feature.shape)} and masks {tuple(masks.shape)} do not align"
        )
    m = resize_masks_to_grid(masks.to(feature.dtype), feature.shape[-2:])
    if valid is not None:
        m = m * valid.to(feature.dtype)[:, :, None, None]
    counts = m.sum(dim=(2, 3))
    sums = torch.einsum("bnhw,bchw->bnc", m, feature)
    pooled = sums / counts.clamp(min=1.0).unsqueeze(-1)
    pooled = pooled * (counts > 0).to(feature.dtype).unsqueeze(-1)
    return pooled.squeeze(0) if squeeze else pooled


class BlendMLP(nn.Module):
    """Two affine layers with a ReLU between, applied per prototype row."""

    def __init__(self, in_dim: int, hidden_dim: int | None = None, out_dim: int | None = None):
        super().__init__()
        hidden_dim = in_dim if hidden_dim is None else hidden_dim
        out_dim = in_dim if out_dim is None else out_dim
        self.out_dim = out_dim
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden_dim), nn.ReLU(), nn.Linear(hidden_dim, out_dim)
        )

    def forward(self, x):
        return self.net(x)


def blend_prototypes(
    p1: torch.Tensor, p2: torch.Tensor, p3: torch.Tensor, mlp: BlendMLP
) -> torch.Tensor:
    """Elementwise sum of the three low-level prototypes, then the shared MLP."""
    if not (p1.shape == p2.shape == p3.shape):
        raise ShapeError(
            f"prototype shapes differ: {tuple(p1.shape)}, {tuple(p2.shape)}, {tuple(p3.shape)}"
        )
    return mlp(p1 + p2 + p3)


def enhance(p4: torch.Tensor, p_b: torch.Tensor) -> torch.Tensor:
    """Row-wise concatenation, fused-feature prototype first."""
    if p4.shape[:-1] != p_b.shape[:-1]:
        raise ShapeError(f"row counts differ: {tuple(p4.shape)} vs {tuple(p_b.shape)}")
    return torch.cat([p4, p_b], dim=-1)
