import hashlib
import json
from pathlib import Path

import pytest

from ending.cli import main


def _tree_hash(root: Path) -> str:
    digest = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            digest.update(str(path.relative_to(root)).encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()


def _toy_config_doc(run_name):
    return {
        "dataset": {
            "kind": "synthetic", "seed": 7, "n_images": 16, "n_val_images": 8,
            "size": 64, "n_fg_classes": 4, "pad_to": 16,
        },
        "task": {"split": "2-2", "mode": "overlapped", "total_fg_classes": 4},
        "model": {"scale_preset": "toy"},
        "train": {"seed": 5, "epochs_per_step": 1, "batch_size": 8},
        "output": {"run_name": run_name, "formats": ["json"]},
    }


class TestGenData:
    def test_writes_voc_tree(self, tmp_path):
        out = tmp_path / "data"
        code = main([
            "gen-data", "--seed", "7", "--classes", "4", "--images", "10",
            "--size", "64", "--out", str(out), "--val-images", "4", "--pad-to", "16",
        ])
        assert code == 0
        assert len(list((out / "images").glob("*.png"))) == 14
        assert (out / "splits" / "train.txt").read_text().count("\n") == 10
        assert (out / "splits" / "val.txt").read_text().count("\n") == 4
        assert len(list((out / "proposals").glob("*.capr"))) == 14

    def test_rerun_identical_tree(self, tmp_path):
        args = [
            "gen-data", "--seed", "3", "--classes", "4", "--images", "6",
            "--size", "64", "--val-images", "2", "--pad-to", "8",
        ]
        assert main(args + ["--out", str(tmp_path / "a")]) == 0
        assert main(args + ["--out", str(tmp_path / "b")]) == 0
        assert _tree_hash(tmp_path / "a") == _tree_hash(tmp_path / "b")

    def test_refuses_existing_without_force(self, tmp_path, capsys):
        out = tmp_path / "data"
        out.mkdir()
        (out / "stale.txt").write_text("x")
        args = ["gen-data", "--seed", "1", "--classes", "2", "--images", "2",
                "--out", str(out)]
        assert main(args) == 2
        assert "--force" in capsys.readouterr().err
        assert main(args + ["--force"]) == 0

    def test_single_class_rejected(self, tmp_path):
        code = main([
            "gen-data", "--seed", "1", "--classes", "1", "--images", "2",
            "--out", str(tmp_path / "x"),
        ])
        assert code == 2


@pytest.mark.slow
class TestRun:
    def test_run_and_report(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(_toy_config_doc("cli_run")))
        run_dir = tmp_path / "run"
        assert main(["run", "--config", str(cfg_path), "--out-dir", str(run_dir)]) == 0
        out = capsys.readouterr().out
        assert "all" in out
        assert (run_dir / "report.json").exists()

        assert main(["report", str(run_dir)]) == 0
        assert "step" in capsys.readouterr().out

        plot_dir = tmp_path / "plots"
        assert main(["report", str(run_dir), "--plot", "--out", str(plot_dir)]) == 0
        assert (plot_dir / "stepwise_miou.png").exists()

    def test_override_applied_and_recorded(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(_toy_config_doc("cli_override")))
        run_dir = tmp_path / "run"
        assert main([
            "run", "--config", str(cfg_path), "--out-dir", str(run_dir),
            "--override", "model.fusion_mode=f4_only",
        ]) == 0
        resolved = json.loads((run_dir / "resolved_config.json").read_text())
        assert resolved["model"]["fusion_mode"] == "f4_only"
        assert resolved["overrides"] == ["model.fusion_mode=f4_only"]

    def test_eval_subcommand(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(_toy_config_doc("cli_eval")))
        run_dir = tmp_path / "run"
        assert main(["run", "--config", str(cfg_path), "--out-dir", str(run_dir)]) == 0
        capsys.readouterr()
        assert main(["eval", "--run-dir", str(run_dir), "--step", "1"]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["step"] == 1


class TestErrors:
    def test_config_schema_errors_exit_2(self, tmp_path, capsys):
        cfg_path = tmp_path / "bad.json"
        cfg_path.write_text(json.dumps({"train": {}, "task": {"mode": "nope"}}))
        assert main(["run", "--config", str(cfg_path)]) == 2
        err = capsys.readouterr().err
        assert "task.mode" in err and "seed" in err  # all violations listed

    def test_report_missing_metrics_partial(self, tmp_path, capsys):
        empty = tmp_path / "empty_run"
        empty.mkdir()
        assert main(["report", str(empty)]) == 1
        assert "missing" in capsys.readouterr().err
