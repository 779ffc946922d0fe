import json
import math
from pathlib import Path

import pytest
import torch

from ending.config import parse_config
from ending.engine import (
    SegModel,
    build_registry,
    poly_lr,
    run_experiment,
    reevaluate,
    verify_frozen_manifest,
)
from ending.errors import ConfigError, FrozenDriftError


def _toy_config(tmp_name, **train_overrides):
    train = {"seed": 3, "epochs_per_step": 2, "batch_size": 8}
    train.update(train_overrides)
    return parse_config(
        {
            "dataset": {
                "kind": "synthetic", "seed": 7, "n_images": 24, "n_val_images": 8,
                "size": 64, "n_fg_classes": 4, "pad_to": 16,
            },
            "task": {"split": "2-2", "mode": "overlapped", "total_fg_classes": 4},
            "model": {"scale_preset": "toy", "fusion_mode": "ending"},
            "train": train,
            "output": {"run_name": tmp_name, "formats": ["json", "table"]},
        }
    )


class TestPolyLr:
    def test_endpoints(self):
        assert poly_lr(0, 100, 0.01, 0.9) == pytest.approx(0.01)
        assert poly_lr(100, 100, 0.01, 0.9) == 0.0

    def test_midpoint(self):
        assert poly_lr(50, 100, 0.01, 0.9) == pytest.approx(0.01 * 0.5**0.9, abs=1e-12)
        assert poly_lr(50, 100, 0.01, 0.9) == pytest.approx(0.005359, abs=1e-6)

    def test_zero_max_iter_rejected(self):
        with pytest.raises(ConfigError):
            poly_lr(0, 0, 0.01, 0.9)

    def test_out_of_range_rejected(self):
        with pytest.raises(ConfigError):
            poly_lr(5, 4, 0.01, 0.9)


class TestGradientRouting:
    def _loss_for_step(self, step):
        cfg = _toy_config("unused")
        torch.manual_seed(0)
        model = SegModel(cfg)
        registry = build_registry(model)
        from ending.backbone import apply_freeze_schedule, head_group

        for t in range(1, step + 1):
            model.add_head(t, 2)
            registry.register(head_group(t), model.heads[-1])
        apply_freeze_schedule(registry, step)

        images = torch.rand(1, 3, 32, 32)
        masks = torch.zeros(1, 4, 32, 32)
        masks[0, 0, :16] = 1
        masks[0, 1, 16:] = 1
        valid = torch.tensor([[True, True, False, False]])
        pair, _ = model.predict(images, masks, valid, need_dense=(step == 1))
        return pair.y2.sum(), model

    def test_proposal_path_reaches_meta_and_blend_in_step1(self):
        loss, model = self._loss_for_step(1)
        loss.backward()
        meta_grads = [p.grad for p in model.fusion.meta.parameters()]
        blend_grads = [p.grad for p in model.blend.parameters()]
        assert any(g is not None and g.abs().sum() > 0 for g in meta_grads)
        assert any(g is not None and g.abs().sum() > 0 for g in blend_grads)

    def test_proposal_path_blocked_from_frozen_groups_later(self):
        loss, model = self._loss_for_step(2)
        loss.backward()
        for p in list(model.fusion.parameters()) + list(model.blend.parameters()):
            assert p.grad is None
        for p in model.heads[0].parameters():
            assert p.grad is None
        assert any(
            p.grad is not None and p.grad.abs().sum() > 0
            for p in model.heads[1].parameters()
        )


@pytest.mark.slow
class TestToyRuns:
    def test_two_step_run_artifacts(self, tmp_path):
        cfg = _toy_config("artifacts")
        reports = run_experiment(cfg, tmp_path / "run")
        assert len(reports) == 2
        for t in (1, 2):
            step_dir = tmp_path / "run" / f"step_{t}"
            for name in ("checkpoint.pt", "manifest.json", "metrics.json", "train_log.ndjson"):
                assert (step_dir / name).exists(), name
        assert (tmp_path / "run" / "resolved_config.json").exists()
        assert (tmp_path / "run" / "report.json").exists()
        assert (tmp_path / "run" / "report.txt").exists()

        # Iteration counts: epochs * ceil(n_images / batch) with the poly trace.
        log = [
            json.loads(line)
            for line in (tmp_path / "run" / "step_1" / "train_log.ndjson").read_text().splitlines()
        ]
        n_step1 = len(log)
        assert n_step1 > 0 and n_step1 % cfg.train.epochs_per_step == 0
        for rec in log:
            assert rec["lr"] == pytest.approx(
                poly_lr(rec["iter"], n_step1, cfg.train.lr0_step1, 0.9)
            )

    def test_frozen_groups_bit_exact_across_steps(self, tmp_path):
        cfg = _toy_config("freeze")
        run_experiment(cfg, tmp_path / "run")
        verify_frozen_manifest(tmp_path / "run", 2)
        m1 = json.loads((tmp_path / "run" / "step_1" / "manifest.json").read_text())
        m2 = json.loads((tmp_path / "run" / "step_2" / "manifest.json").read_text())
        h1 = {g["name"]: g["sha256"] for g in m1["groups"]}
        h2 = {g["name"]: g["sha256"] for g in m2["groups"]}
        for name in ("backbone", "meta_net", "blend_mlp", "heads.1"):
            assert h1[name] == h2[name]

    def test_tampered_manifest_raises_drift(self, tmp_path):
        cfg = _toy_config("tamper")
        run_experiment(cfg, tmp_path / "run")
        path = tmp_path / "run" / "step_2" / "manifest.json"
        doc = json.loads(path.read_text())
        for g in doc["groups"]:
            if g["name"] == "backbone":
                g["sha256"] = "0" * 64
        path.write_text(json.dumps(doc))
        with pytest.raises(FrozenDriftError):
            verify_frozen_manifest(tmp_path / "run", 2)

    def test_replay_changes_data_not_schedule(self, tmp_path):
        base = _toy_config("noreplay")
        with_replay = _toy_config("replay", replay={"enabled": True, "capacity": 20})
        run_experiment(base, tmp_path / "a")
        run_experiment(with_replay, tmp_path / "b")
        for run in ("a", "b"):
            m2 = json.loads((tmp_path / run / "step_2" / "manifest.json").read_text())
            m1 = json.loads((tmp_path / run / "step_1" / "manifest.json").read_text())
            h1 = {g["name"]: g["sha256"] for g in m1["groups"]}
            h2 = {g["name"]: g["sha256"] for g in m2["groups"]}
            assert h1["backbone"] == h2["backbone"]  # schedule identical either way

    def test_reevaluate_matches_stored_metrics(self, tmp_path):
        cfg = _toy_config("reeval")
        reports = run_experiment(cfg, tmp_path / "run")
        again = reevaluate(tmp_path / "run", step=2)
        assert again.to_dict() == reports[-1].to_dict()

    def test_disjoint_mode_runs(self, tmp_path):
        cfg = _toy_config("disjoint")
        cfg.task.mode = "disjoint"
        reports = run_experiment(cfg, tmp_path / "run")
        assert len(reports) == 2
