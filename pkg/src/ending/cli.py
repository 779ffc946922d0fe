"""Command-line entry point: gen-data, run, eval, report.

Exit codes: 0 success, 2 configuration error, 3 invariant violation (e.g.
frozen-group drift), 1 anything else.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import load_config
from .errors import ConfigError, EndingError, InvariantViolation
from .metrics import MetricReport, format_table


def _cmd_gen_data(args) -> int:
    from . import data as D

    if args.classes < 2:
        raise ConfigError("--classes must be at least 2")
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"{out} already exists and is not empty; pass --force to overwrite")
    n_val = args.val_images if args.val_images is not None else max(1, args.images // 5)
    index = D.generate_synthetic_dataset(args.seed, args.classes, args.images + n_val, args.size)
    splits = {
        "train": index.image_ids[: args.images],
        "val": index.image_ids[args.images :],
    }
    D.export_voc_layout(index, out, splits, pad_to=args.pad_to)
    print(f"wrote {args.images} train / {n_val} val images to {out}")
    return 0


def _cmd_run(args) -> int:
    from .engine import run_experiment

    cfg = load_config(args.config, args.override)
    reports = run_experiment(cfg, args.out_dir)
    print(format_table(reports, cfg.output.run_name))
    return 0


def _cmd_eval(args) -> int:
    from .engine import reevaluate

    report = reevaluate(args.run_dir, args.step)
    print(json.dumps(report.to_dict(), indent=1, sort_keys=True))
    return 0


def _load_run_reports(run_dir: Path) -> list[MetricReport]:
    report_file = run_dir / "report.json"
    if report_file.exists():
        return [MetricReport.from_dict(d) for d in json.loads(report_file.read_text())]
    reports = []
    for step_dir in sorted(run_dir.glob("step_*"), key=lambda p: int(p.name.split("_")[1])):
        metrics = step_dir / "metrics.json"
        if metrics.exists():
            reports.append(MetricReport.from_dict(json.loads(metrics.read_text())))
    return reports


def _cmd_report(args) -> int:
    runs: dict[str, list[MetricReport]] = {}
    missing = []
    for run_dir in map(Path, args.run_dirs):
        reports = _load_run_reports(run_dir)
        if reports:
            runs[run_dir.name] = reports
        else:
            missing.append(str(run_dir))
    if missing:
        print("missing metrics for: " + ", ".join(missing), file=sys.stderr)
    if not runs:
        print("no metrics found; nothing to report", file=sys.stderr)
        return 1

    for name, reports in runs.items():
        print(format_table(reports, name))
        print()

    if args.plot:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        fig, ax = plt.subplots(figsize=(5.5, 3.5))
        for name, reports in runs.items():
            steps = [r.step for r in reports]
            vals = [None if r.all_miou is None else 100 * r.all_miou for r in reports]
            ax.plot(steps, vals, marker="o", label=name)
        ax.set_xlabel("step")
        ax.set_ylabel("mIoU (%)")
        ax.legend()
        fig.tight_layout()
        path = out_dir / "stepwise_miou.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        print(f"plot written to {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ending", description="Incremental segmentation experiments"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate a synthetic dataset in VOC layout")
    gen.add_argument("--seed", type=int, required=True)
    gen.add_argument("--classes", type=int, required=True)
    gen.add_argument("--images", type=int, required=True)
    gen.add_argument("--size", type=int, default=64)
    gen.add_argument("--out", required=True)
    gen.add_argument("--val-images", type=int, default=None)
    gen.add_argument("--pad-to", type=int, default=100)
    gen.add_argument("--force", action="store_true")
    gen.set_defaults(fn=_cmd_gen_data)

    run = sub.add_parser("run", help="run an incremental experiment from a config")
    run.add_argument("--config", required=True)
    run.add_argument("--override", action="append", default=[], metavar="KEY.PATH=VALUE")
    run.add_argument("--out-dir", default=None, help="run directory (default runs/<name>)")
    run.set_defaults(fn=_cmd_run)

    ev = sub.add_parser("eval", help="re-evaluate a checkpointed step")
    ev.add_argument("--run-dir", required=True)
    ev.add_argument("--step", type=int, default=None)
    ev.set_defaults(fn=_cmd_eval)

    rep = sub.add_parser("report", help="tables/plots across finished runs")
    rep.add_argument("run_dirs", nargs="+")
    rep.add_argument("--plot", action="store_true")
    rep.add_argument("--out", default="report_out")
    rep.set_defaults(fn=_cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except InvariantViolation as e:
        print(f"invariant violation: {e}", file=sys.stderr)
        return 3
    except EndingError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
