"""Multi-level knowledge fusion.

The evolving variant generates per-sample 1x1 filter banks for each
low-level feature from a meta-net fed with the globally pooled high-level
feature, applies them per pixel, resizes the mined maps to the high-level
grid, and concatenates everything. A static-projection baseline (the naive
feature pyramid) and a pass-through mode cover the ablations.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import BackboneConfig, FeaturePyramid
from .errors import ConfigError, ShapeError


@dataclass
class FusionOutput:
    ks: list[torch.Tensor]  # mined features, each B x m x Hf x Wf on f4's grid
    f_out: torch.Tensor  # B x (C4 + len(ks) * m) x Hf x Wf


class MetaNet(nn.Module):
    """Three sub-nets, each a bottlenecked 2-layer MLP emitting one filter bank.

    Sub-net i maps the pooled C4-dim descriptor through a width-r hidden
    layer to a C_i*m vector, reshaped to an m x C_i 1x1 filter matrix. The
    second layer is bias-free by default, matching the published parameter
    count; the generated filters never carry bias terms.
    """

    def __init__(
        self,
        c4: int,
        low_dims: tuple[int, int, int],
        mined_channels: int = 48,
        bottleneck: int = 4,
        layer2_bias: bool = False,
    ):
        super().__init__()
        self.c4 = c4
        self.low_dims = tuple(low_dims)
        self.m = mined_channels
        self.r = bottleneck
        self.subnets = nn.ModuleList(
            nn.Sequential(
                nn.Linear(c4, bottleneck),
                nn.ReLU(),
                nn.Linear(bottleneck, ci * mined_channels, bias=layer2_bias),
            )
            for ci in self.low_dims
        )

    def forward(self, pooled_f4: torch.Tensor) -> list[torch.Tensor]:
        return [
            net(pooled_f4).reshape(-1, self.m, ci)
            for net, ci in zip(self.subnets, self.low_dims)
        ]


def generate_personalized_filters(f4: torch.Tensor, meta: MetaNet) -> list[torch.Tensor]:
    """Global-average-pool f4, then emit one B x m x C_i filter bank per level."""
    if f4.shape[1] != meta.c4:
        raise ShapeError(f"f4 has {f4.shape[1]} channels, meta-net expects {meta.c4}")
    pooled = f4.mean(dim=(2, 3))
    return meta(pooled)


def mine_knowledge(
    fi: torch.Tensor, wi: torch.Tensor, target_hw: tuple[int, int]
) -> torch.Tensor:
    """Apply a per-sample 1x1 filter bank, then resize to the target grid.

    Projection happens at the feature's native resolution (cheaper, since the
    mined width is much smaller than C_i), the bilinear resize after.
    """
    if fi.shape[1] != wi.shape[2]:
        raise ShapeError(f"feature has {fi.shape[1]} channels, filters expect {wi.shape[2]}")
    if fi.shape[0] != wi.shape[0]:
        raise ShapeError("one filter set per batch element required")
    k = torch.einsum("bmc,bchw->bmhw", wi, fi)
    if k.shape[-2:] != tuple(target_hw):
        k = F.interpolate(k, size=target_hw, mode="bilinear", align_corners=False)
    return k


def fuse(f4: torch.Tensor, ks: list[torch.Tensor]) -> torch.Tensor:
    """Channel-wise concatenation, high-level feature first."""
    for k in ks:
        if k.shape[-2:] != f4.shape[-2:]:
            raise ShapeError(f"mined feature grid {k.shape[-2:]} != f4 grid {f4.shape[-2:]}")
    return torch.cat([f4, *ks], dim=1)


def count_parameters(meta: MetaNet) -> int:
    return sum(p.numel() for p in meta.parameters())


class EvolvingFusion(nn.Module):
    """Per-input filter generation over all three low levels (the full method)."""

    def __init__(self, config: BackboneConfig, mined_channels: int, bottleneck: int,
                 layer2_bias: bool = False):
        super().__init__()
        c1, c2, c3, c4 = config.channel_dims
        self.meta = MetaNet(c4, (c1, c2, c3), mined_channels, bottleneck, layer2_bias)
        self.out_channels = c4 + 3 * mined_channels
        self.mined_channels = mined_channels

    def forward(self, pyramid: FeaturePyramid) -> FusionOutput:
        filters = generate_personalized_filters(pyramid.f4, self.meta)
        grid = pyramid.f4.shape[-2:]
        ks = [
            mine_knowledge(fi, wi, grid)
            for fi, wi in zip(pyramid.low_levels(), filters)
        ]
        return FusionOutput(ks=ks, f_out=fuse(pyramid.f4, ks))


class NFPFusion(nn.Module):
    """Static 1x1 projections shared across inputs; the motivation baseline.

    `levels` picks which low levels join f4 (subset of {1, 2, 3}). The
    projections are ordinary parameters trained in step 1 and frozen after,
    via the same registry group as the meta-net.
    """

    def __init__(self, config: BackboneConfig, mined_channels: int, levels: tuple[int, ...]):
        super().__init__()
        if any(lv not in (1, 2, 3) for lv in levels):
            raise ConfigError(f"nfp levels must be within {{1,2,3}}, got {levels}")
        self.levels = tuple(sorted(levels))
        dims = config.channel_dims
        self.projections = nn.ModuleDict(
            {str(lv): nn.Conv2d(dims[lv - 1], mined_channels, 1, bias=False) for lv in self.levels}
        )
        self.out_channels = dims[3] + len(self.levels) * mined_channels
        self.mined_channels = mined_channels

    def forward(self, pyramid: FeaturePyramid) -> FusionOutput:
        grid = pyramid.f4.shape[-2:]
        lows = {1: pyramid.f1, 2: pyramid.f2, 3: pyramid.f3}
        ks = []
        for lv in self.levels:
            k = self.projections[str(lv)](lows[lv])
            if k.shape[-2:] != grid:
                k = F.interpolate(k, size=grid, mode="bilinear", align_corners=False)
            ks.append(k)
        return FusionOutput(ks=ks, f_out=fuse(pyramid.f4, ks))


def nfp_project(fi: torch.Tensor, projection: nn.Conv2d, target_hw: tuple[int, int]) -> torch.Tensor:
    """Single-level static projection resized to the target grid."""
    k = projection(fi)
    if k.shape[-2:] != tuple(target_hw):
        k = F.interpolate(k, size=target_hw, mode="bilinear", align_corners=False)
    return k


class PassThroughFusion(nn.Module):
    """High-level feature only; the no-fusion baseline."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.out_channels = config.channel_dims[3]
        self.mined_channels = 0
        self._sentinel = nn.Parameter(torch.zeros(0), requires_grad=False)

    def forward(self, pyramid: FeaturePyramid) -> FusionOutput:
        return FusionOutput(ks=[], f_out=pyramid.f4)


def build_fusion(
    mode: str,
    config: BackboneConfig,
    mined_channels: int,
    bottleneck: int,
    layer2_bias: bool,
    nfp_levels: tuple[int, ...] = (1, 2, 3),
) -> nn.Module:
    if mode == "ending":
        return EvolvingFusion(config, mined_channels, bottleneck, layer2_bias)
    if mode == "nfp":
        return NFPFusion(config, mined_channels, nfp_levels)
    if mode == "f4_only":
        return PassThroughFusion(config)
    raise ConfigError(f"unknown fusion mode {mode!r}")
