import pytest
import torch
from torch import nn

from ending.backbone import (
    Backbone,
    BackboneConfig,
    ParameterRegistry,
    apply_freeze_schedule,
    head_group,
    load_checkpoint,
    save_checkpoint,
)
from ending.errors import ConfigError, ShapeError


def _registry_with_heads(n_heads=2):
    registry = ParameterRegistry()
    registry.register("backbone", nn.Linear(4, 4))
    registry.register("meta_net", nn.Linear(4, 4))
    registry.register("blend_mlp", nn.Linear(4, 4))
    for t in range(1, n_heads + 1):
        registry.register(head_group(t), nn.Linear(4, 2))
    return registry


class TestFeatureShapes:
    def test_toy_preset_shapes(self):
        config = BackboneConfig.preset("toy")
        net = Backbone(config)
        pyr = net(torch.randn(2, 3, 64, 64))
        assert tuple(pyr.f1.shape) == (2, 32, 32, 32)
        assert tuple(pyr.f2.shape) == (2, 64, 16, 16)
        assert tuple(pyr.f3.shape) == (2, 128, 8, 8)
        assert tuple(pyr.f4.shape) == (2, 64, 8, 8)

    def test_full_preset_f4(self):
        config = BackboneConfig.preset("full")
        net = Backbone(config)
        with torch.no_grad():
            pyr = net(torch.randn(1, 3, 512, 512))
        assert tuple(pyr.f4.shape) == (1, 256, 32, 32)
        assert tuple(pyr.f1.shape) == (1, 256, 128, 128)

    def test_deterministic_forward(self):
        net = Backbone(BackboneConfig.preset("toy"))
        net.eval()
        x = torch.randn(1, 3, 32, 32)
        with torch.no_grad():
            a, b = net(x), net(x)
        assert torch.equal(a.f4, b.f4)

    def test_indivisible_input_rejected_before_compute(self):
        net = Backbone(BackboneConfig.preset("toy"))
        with pytest.raises(ShapeError):
            net(torch.randn(1, 3, 60, 64))

    def test_bad_strides_rejected(self):
        with pytest.raises(ConfigError):
            BackboneConfig(channel_dims=(4, 4, 4, 4), strides=(2, 4, 8, 16))


class TestFreezeSchedule:
    def test_step1_everything_trainable(self):
        registry = apply_freeze_schedule(_registry_with_heads(), 1)
        assert registry.trainable_groups() == sorted(registry.modules)

    def test_step2_only_new_head(self):
        registry = apply_freeze_schedule(_registry_with_heads(), 2)
        assert registry.trainable_groups() == ["heads.2"]
        for p in registry.modules["backbone"].parameters():
            assert not p.requires_grad
        for p in registry.modules["heads.2"].parameters():
            assert p.requires_grad

    def test_idempotent(self):
        registry = _registry_with_heads()
        apply_freeze_schedule(registry, 2)
        snapshot = dict(registry.trainable)
        apply_freeze_schedule(registry, 2)
        assert registry.trainable == snapshot

    def test_frozen_modules_in_eval_mode(self):
        registry = _registry_with_heads()
        apply_freeze_schedule(registry, 2)
        assert not registry.modules["backbone"].training
        assert registry.modules["heads.2"].training


class TestHashesAndCheckpoints:
    def test_hash_stable_and_sensitive(self):
        registry = _registry_with_heads()
        h1 = registry.group_hash("backbone")
        assert registry.group_hash("backbone") == h1
        with torch.no_grad():
            next(registry.modules["backbone"].parameters()).add_(1.0)
        assert registry.group_hash("backbone") != h1

    def test_checkpoint_round_trip(self, tmp_path):
        registry = _registry_with_heads()
        manifest = save_checkpoint(tmp_path, registry, step=2)
        assert {g["name"] for g in manifest["groups"]} == set(registry.modules)
        before = {n: registry.group_hash(n) for n in registry.group_names()}

        other = _registry_with_heads()  # different random init
        assert other.group_hash("backbone") != before["backbone"]
        step = load_checkpoint(tmp_path, other)
        assert step == 2
        assert {n: other.group_hash(n) for n in other.group_names()} == before

    def test_manifest_counts(self, tmp_path):
        registry = _registry_with_heads()
        manifest = save_checkpoint(tmp_path, registry, step=1)
        by_name = {g["name"]: g["n_params"] for g in manifest["groups"]}
        assert by_name["backbone"] == 4 * 4 + 4
        assert by_name["heads.1"] == 4 * 2 + 2
