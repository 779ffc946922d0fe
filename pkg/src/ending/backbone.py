"""Four-level feature extractor, parameter registry, and the freeze schedule.

The backbone emits features f1..f4; f4 comes from a context block (parallel
1x1 / dilated 3x3 / global-pooling branches, concatenated and projected).
Normalization is GroupNorm throughout so frozen groups carry no running
statistics and stay bit-exact across later steps.

Any module producing a ``FeaturePyramid`` consistent with a
``BackboneConfig`` can stand in for the built-in backbone (e.g. an adapter
around a pretrained network); nothing here assumes the built-in one.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import torch
from torch import nn

from .errors import ConfigError, ShapeError

PRESETS = {
    "toy": dict(channel_dims=(32, 64, 128, 64), strides=(2, 4, 8, 8)),
    "full": dict(channel_dims=(256, 512, 1024, 256), strides=(4, 8, 16, 16)),
}


@dataclass(frozen=True)
class BackboneConfig:
    channel_dims: tuple[int, int, int, int]
    strides: tuple[int, int, int, int]
    scale_preset: str = "custom"

    def __post_init__(self):
        if any(c <= 0 for c in self.channel_dims):
            raise ConfigError("channel dims must be positive")
        s1, s2, s3, s4 = self.strides
        if not (s1 <= s2 <= s3 and s4 == s3):
            raise ConfigError(f"strides must be ascending with s4 == s3, got {self.strides}")

    @staticmethod
    def preset(name: str) -> "BackboneConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown scale preset {name!r}")
        return BackboneConfig(scale_preset=name, **PRESETS[name])


@dataclass
class FeaturePyramid:
    f1: torch.Tensor
    f2: torch.Tensor
    f3: torch.Tensor
    f4: torch.Tensor

    def low_levels(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        return self.f1, self.f2, self.f3


def _gn(channels: int) -> nn.GroupNorm:
    groups = next(g for g in (8, 4, 2, 1) if channels % g == 0)
    return nn.GroupNorm(groups, channels)


class _Stage(nn.Module):
    """Stride-2 downsampling convs (one per factor-of-2) plus a refine conv."""

    def __init__(self, in_ch: int, out_ch: int, factor: int):
        super().__init__()
        layers: list[nn.Module] = []
        ch = in_ch
        while factor > 1:
            layers += [nn.Conv2d(ch, out_ch, 3, stride=2, padding=1), _gn(out_ch), nn.ReLU()]
            ch = out_ch
            factor //= 2
        layers += [nn.Conv2d(ch, out_ch, 3, padding=1), _gn(out_ch), nn.ReLU()]
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return self.body(x)


class ContextBlock(nn.Module):
    """Three-branch context head over f3: 1x1, dilated 3x3, global pooling."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.local = nn.Sequential(nn.Conv2d(in_ch, out_ch, 1), _gn(out_ch), nn.ReLU())
        self.dilated = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=2, dilation=2), _gn(out_ch), nn.ReLU()
        )
        self.pooled = nn.Sequential(nn.Conv2d(in_ch, out_ch, 1), nn.ReLU())
        self.project = nn.Sequential(nn.Conv2d(3 * out_ch, out_ch, 1), _gn(out_ch), nn.ReLU())

    def forward(self, x):
        g = self.pooled(x.mean(dim=(2, 3), keepdim=True)).expand(-1, -1, *x.shape[-2:])
        return self.project(torch.cat([self.local(x), self.dilated(x), g], dim=1))


class Backbone(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        c1, c2, c3, c4 = config.channel_dims
        s1, s2, s3, _ = config.strides
        self.stage1 = _Stage(3, c1, s1)
        self.stage2 = _Stage(c1, c2, s2 // s1)
        self.stage3 = _Stage(c2, c3, s3 // s2)
        self.context = ContextBlock(c3, c4)

    def forward(self, images: torch.Tensor) -> FeaturePyramid:
        return extract_features(images, self.config, self)


def extract_features(
    images: torch.Tensor, config: BackboneConfig, net: Backbone
) -> FeaturePyramid:
    if images.ndim != 4 or images.shape[1] != 3:
        raise ShapeError(f"expected B x 3 x H x W images, got {tuple(images.shape)}")
    h, w = images.shape[-2:]
    s3 = config.strides[2]
    if h % s3 or w % s3:
        raise ShapeError(f"input {h}x{w} not divisible by the deepest stride {s3}")
    f1 = net.stage1(images)
    f2 = net.stage2(f1)
    f3 = net.stage3(f2)
    f4 = net.context(f3)
    return FeaturePyramid(f1, f2, f3, f4)


# ---------------------------------------------------------------------------
# Parameter registry and freeze schedule
# ---------------------------------------------------------------------------

BACKBONE_GROUP = "backbone"
META_NET_GROUP = "meta_net"
BLEND_MLP_GROUP = "blend_mlp"


def head_group(step: int) -> str:
    return f"heads.{step}"


class ParameterRegistry:
    """Named parameter groups with per-group trainability and content hashes.

    Groups: ``backbone``, ``meta_net``, ``blend_mlp`` and one ``heads.<t>``
    per step. Every parameter belongs to exactly one group; freezing a group
    turns off requires_grad and switches its modules to eval mode.
    """

    def __init__(self):
        self.modules: dict[str, nn.Module] = {}
        self.trainable: dict[str, bool] = {}

    def register(self, name: str, module: nn.Module) -> None:
        if name in self.modules:
            raise ConfigError(f"group {name!r} already registered")
        self.modules[name] = module
        self.trainable[name] = True

    def group_names(self) -> list[str]:
        return sorted(self.modules)

    def head_steps(self) -> list[int]:
        return sorted(
            int(name.split(".", 1)[1]) for name in self.modules if name.startswith("heads.")
        )

    def set_trainable(self, name: str, flag: bool) -> None:
        module = self.modules[name]
        self.trainable[name] = flag
        for p in module.parameters():
            p.requires_grad_(flag)
        module.train(flag)

    def trainable_groups(self) -> list[str]:
        return sorted(n for n, t in self.trainable.items() if t)

    def parameters_of(self, name: str) -> Iterator[torch.Tensor]:
        return self.modules[name].parameters()

    def trainable_parameters(self) -> list[torch.Tensor]:
        out = []
        for name in self.group_names():
            if self.trainable[name]:
                out.extend(self.modules[name].parameters())
        return out

    def named_tensors(self, name: str) -> list[tuple[str, torch.Tensor]]:
        module = self.modules[name]
        tensors = list(module.named_parameters()) + list(module.named_buffers())
        return sorted(tensors, key=lambda kv: kv[0])

    def n_params(self, name: str) -> int:
        return sum(p.numel() for p in self.modules[name].parameters())

    def group_hash(self, name: str) -> str:
        digest = hashlib.sha256()
        for tensor_name, tensor in self.named_tensors(name):
            arr = tensor.detach().cpu().contiguous().numpy()
            digest.update(tensor_name.encode())
            digest.update(str(arr.dtype).encode())
            digest.update(str(arr.shape).encode())
            digest.update(arr.tobytes())
        return digest.hexdigest()

    def manifest(self, step: int) -> dict:
        return {
            "step": step,
            "groups": [
                {"name": n, "n_params": self.n_params(n), "sha256": self.group_hash(n)}
                for n in self.group_names()
            ],
        }

    def state_dict(self) -> dict:
        return {name: module.state_dict() for name, module in self.modules.items()}

    def load_state_dict(self, state: dict) -> None:
        for name, module_state in state.items():
            self.modules[name].load_state_dict(module_state)


def apply_freeze_schedule(registry: ParameterRegistry, step: int) -> ParameterRegistry:
    """Step 1 trains everything; later steps train only the newest head."""
    if step < 1:
        raise ConfigError(f"step must be >= 1, got {step}")
    if step == 1:
        for name in registry.group_names():
            registry.set_trainable(name, True)
        return registry
    for name in registry.group_names():
        if name.startswith("heads."):
            registry.set_trainable(name, int(name.split(".", 1)[1]) == step)
        else:
            registry.set_trainable(name, False)
    return registry


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(directory: str | Path, registry: ParameterRegistry, step: int) -> dict:
    """Write checkpoint.pt plus the manifest used by the freeze invariant."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save(
        {"step": step, "groups": registry.state_dict(), "trainable": dict(registry.trainable)},
        directory / "checkpoint.pt",
    )
    manifest = registry.manifest(step)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def load_checkpoint(directory: str | Path, registry: ParameterRegistry) -> int:
    payload = torch.load(Path(directory) / "checkpoint.pt", weights_only=True)
    registry.load_state_dict(payload["groups"])
    for name, flag in payload["trainable"].items():
        if name in registry.modules:
            registry.set_trainable(name, flag)
    return int(payload["step"])
