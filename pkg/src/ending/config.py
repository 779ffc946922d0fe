"""Run configuration: JSON schema, defaults, and dotted-path overrides.

Every defaulted field is echoed into the resolved config that gets persisted
with a run, so a run directory always contains enough to reproduce itself
bit-exactly. Validation collects all schema violations before failing.
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ConfigError

# Preset-dependent defaults (value per scale preset).
PRESET_DEFAULTS = {
    "toy": {"mined_channels_m": 16, "K": 1, "epochs_per_step": 5, "batch_size": 8, "crop_size": 64},
    "full": {"mined_channels_m": 48, "K": 5, "epochs_per_step": 50, "batch_size": 16, "crop_size": 512},
}

LR_PRESETS = {"voc": (1e-2, 1e-2), "ade": (5e-3, 3e-2)}

# The fusion-mode key is spelled two ways at the interfaces; both are accepted.
OVERRIDE_ALIASES = {"fusion.mode": "model.fusion_mode"}


@dataclass
class DatasetConfig:
    kind: str = "synthetic"  # synthetic | voc
    path: str | None = None  # voc root (required for kind=voc)
    seed: int = 7
    n_images: int = 120
    n_val_images: int = 40
    size: int = 64
    n_fg_classes: int = 8
    crop_size: int | None = None  # preset default when omitted
    pad_to: int = 100  # proposal count after padding
    proposal_source: str = "auto"  # auto | oracle | files


@dataclass
class TaskConfig:
    split: str = "4-2"
    mode: str = "overlapped"
    total_fg_classes: int = 8


@dataclass
class ModelConfig:
    scale_preset: str = "toy"
    fusion_mode: str = "ending"  # ending | nfp | f4_only


@dataclass
class FusionConfig:
    bottleneck_r: int = 4
    mined_channels_m: int | None = None  # 48 full / 16 toy
    layer2_bias: bool = False
    nfp_levels: list[int] = field(default_factory=lambda: [1, 2, 3])


@dataclass
class SemanticConfig:
    enabled: bool = True
    hidden_dim: int | None = None  # defaults to mined channel count
    blend_dim: int | None = None


@dataclass
class LabelsConfig:
    tau: float = 0.7
    K: int | None = None  # 5 full / 1 toy
    unlabeled_overlap_threshold: float = 0.5


@dataclass
class ReplayConfig:
    enabled: bool = False
    capacity: int = 100


@dataclass
class TrainConfig:
    seed: int | None = None  # mandatory; no unseeded runs
    lr_preset: str = "voc"
    lr0_step1: float | None = None
    lr0_later: float | None = None
    epochs_per_step: int | None = None
    batch_size: int | None = None
    poly_power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 1e-4
    replay: ReplayConfig = field(default_factory=ReplayConfig)


@dataclass
class OutputConfig:
    run_name: str = "run"
    dir: str = "runs"
    formats: list[str] = field(default_factory=lambda: ["json", "table"])


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    semantic: SemanticConfig = field(default_factory=SemanticConfig)
    labels: LabelsConfig = field(default_factory=LabelsConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def to_dict(self) -> dict:
        return asdict(self)


_SCHEMA = {
    "dataset": {
        "kind": str, "path": (str, type(None)), "seed": int, "n_images": int,
        "n_val_images": int, "size": int, "n_fg_classes": int,
        "crop_size": (int, type(None)), "pad_to": int, "proposal_source": str,
    },
    "task": {"split": str, "mode": str, "total_fg_classes": int},
    "model": {"scale_preset": str, "fusion_mode": str},
    "fusion": {
        "bottleneck_r": int, "mined_channels_m": (int, type(None)),
        "layer2_bias": bool, "nfp_levels": list,
    },
    "semantic": {"enabled": bool, "hidden_dim": (int, type(None)), "blend_dim": (int, type(None))},
    "labels": {"tau": (int, float), "K": (int, type(None)), "unlabeled_overlap_threshold": (int, float)},
    "train": {
        "seed": (int, type(None)), "lr_preset": str, "lr0_step1": (int, float, type(None)),
        "lr0_later": (int, float, type(None)), "epochs_per_step": (int, type(None)),
        "batch_size": (int, type(None)), "poly_power": (int, float),
        "momentum": (int, float), "weight_decay": (int, float),
        "replay": {"enabled": bool, "capacity": int},
    },
    "output": {"run_name": str, "dir": str, "formats": list},
}


def _check_schema(doc: dict, schema: dict, prefix: str, errors: list[str]) -> None:
    for key, value in doc.items():
        path = f"{prefix}{key}"
        if key not in schema:
            errors.append(f"unknown key {path!r}")
            continue
        expected = schema[key]
        if isinstance(expected, dict):
            if isinstance(value, dict):
                _check_schema(value, expected, path + ".", errors)
            else:
                errors.append(f"{path!r} must be an object")
        elif isinstance(value, bool) and expected is int:
            errors.append(f"{path!r} has wrong type bool")
        elif not isinstance(value, expected):
            want = expected if isinstance(expected, type) else expected[0]
            errors.append(f"{path!r} has wrong type {type(value).__name__}, want {want.__name__}")


def _semantic_checks(cfg: RunConfig, errors: list[str]) -> None:
    if cfg.dataset.kind not in ("synthetic", "voc"):
        errors.append(f"dataset.kind must be synthetic or voc, got {cfg.dataset.kind!r}")
    if cfg.dataset.kind == "voc" and not cfg.dataset.path:
        errors.append("dataset.path required for kind=voc")
    if cfg.dataset.proposal_source not in ("auto", "oracle", "files"):
        errors.append(f"bad dataset.proposal_source {cfg.dataset.proposal_source!r}")
    if cfg.task.mode not in ("overlapped", "disjoint"):
        errors.append(f"task.mode must be overlapped or disjoint, got {cfg.task.mode!r}")
    if cfg.model.scale_preset not in PRESET_DEFAULTS:
        errors.append(f"model.scale_preset must be toy or full, got {cfg.model.scale_preset!r}")
    if cfg.model.fusion_mode not in ("ending", "nfp", "f4_only"):
        errors.append(f"bad model.fusion_mode {cfg.model.fusion_mode!r}")
    if any(lv not in (1, 2, 3) for lv in cfg.fusion.nfp_levels):
        errors.append(f"fusion.nfp_levels must be a subset of [1,2,3], got {cfg.fusion.nfp_levels}")
    if not 0.0 <= cfg.labels.tau <= 1.0:
        errors.append(f"labels.tau must lie in [0,1], got {cfg.labels.tau}")
    if cfg.train.seed is None:
        errors.append("train.seed is mandatory (no unseeded runs)")
    if cfg.train.lr_preset not in LR_PRESETS:
        errors.append(f"train.lr_preset must be one of {sorted(LR_PRESETS)}")
    if cfg.train.replay.enabled and cfg.train.replay.capacity <= 0:
        errors.append("train.replay.capacity must be positive when replay is enabled")
    for name in ("poly_power", "momentum", "weight_decay"):
        if getattr(cfg.train, name) < 0:
            errors.append(f"train.{name} must be non-negative")
    for fmt in cfg.output.formats:
        if fmt not in ("json", "table", "plot"):
            errors.append(f"unknown output format {fmt!r}")


def _apply_defaults(cfg: RunConfig) -> RunConfig:
    preset = PRESET_DEFAULTS.get(cfg.model.scale_preset, PRESET_DEFAULTS["toy"])
    if cfg.fusion.mined_channels_m is None:
        cfg.fusion.mined_channels_m = preset["mined_channels_m"]
    if cfg.labels.K is None:
        cfg.labels.K = preset["K"]
    if cfg.train.epochs_per_step is None:
        cfg.train.epochs_per_step = preset["epochs_per_step"]
    if cfg.train.batch_size is None:
        cfg.train.batch_size = preset["batch_size"]
    if cfg.dataset.crop_size is None:
        cfg.dataset.crop_size = preset["crop_size"]
    lr1, lr2 = LR_PRESETS.get(cfg.train.lr_preset, LR_PRESETS["voc"])
    if cfg.train.lr0_step1 is None:
        cfg.train.lr0_step1 = lr1
    if cfg.train.lr0_later is None:
        cfg.train.lr0_later = lr2
    if cfg.semantic.hidden_dim is None:
        cfg.semantic.hidden_dim = cfg.fusion.mined_channels_m
    if cfg.semantic.blend_dim is None:
        cfg.semantic.blend_dim = cfg.fusion.mined_channels_m
    if cfg.model.fusion_mode != "ending":
        # Prototype blending needs the mined features; plain modes run without it.
        cfg.semantic.enabled = False
    return cfg


def _positive_checks(cfg: RunConfig, errors: list[str]) -> None:
    positives = [
        ("dataset.n_images", cfg.dataset.n_images),
        ("dataset.size", cfg.dataset.size),
        ("dataset.n_fg_classes", cfg.dataset.n_fg_classes),
        ("dataset.pad_to", cfg.dataset.pad_to),
        ("dataset.crop_size", cfg.dataset.crop_size),
        ("fusion.bottleneck_r", cfg.fusion.bottleneck_r),
        ("fusion.mined_channels_m", cfg.fusion.mined_channels_m),
        ("semantic.hidden_dim", cfg.semantic.hidden_dim),
        ("semantic.blend_dim", cfg.semantic.blend_dim),
        ("labels.K", cfg.labels.K),
        ("train.epochs_per_step", cfg.train.epochs_per_step),
        ("train.batch_size", cfg.train.batch_size),
        ("train.lr0_step1", cfg.train.lr0_step1),
        ("train.lr0_later", cfg.train.lr0_later),
    ]
    for name, value in positives:
        if value is not None and value <= 0:
            errors.append(f"{name} must be positive, got {value}")


def _build(doc: dict) -> RunConfig:
    cfg = RunConfig()
    for section_name, section_doc in doc.items():
        if not hasattr(cfg, section_name) or not isinstance(section_doc, dict):
            continue
        section = getattr(cfg, section_name)
        for key, value in section_doc.items():
            if key == "replay" and isinstance(value, dict):
                for rk, rv in value.items():
                    if hasattr(section.replay, rk):
                        setattr(section.replay, rk, rv)
            elif hasattr(section, key):
                setattr(section, key, copy.deepcopy(value))
    return cfg


def parse_config(doc: dict, overrides: list[str] | None = None) -> RunConfig:
    """Validate a config document, apply overrides and defaults.

    Raises ConfigError carrying every violation found, not just the first.
    """
    doc = copy.deepcopy(doc)
    recorded = []
    for item in overrides or []:
        key, value = _parse_override(item)
        _set_dotted(doc, key, value)
        recorded.append(item)

    errors: list[str] = []
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    _check_schema(doc, _SCHEMA, "", errors)
    cfg = _build(doc)
    _apply_defaults(cfg)
    _semantic_checks(cfg, errors)
    _positive_checks(cfg, errors)
    if errors:
        raise ConfigError("config errors:\n  - " + "\n  - ".join(errors))
    cfg._overrides = recorded  # recorded verbatim into the resolved config
    return cfg


def load_config(path: str | Path, overrides: list[str] | None = None) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None
    return parse_config(doc, overrides)


def resolved_dict(cfg: RunConfig) -> dict:
    out = cfg.to_dict()
    out["overrides"] = list(getattr(cfg, "_overrides", []))
    return out


def save_resolved(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(resolved_dict(cfg), indent=1, sort_keys=True))


def _parse_override(item: str) -> tuple[str, object]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key.path=value")
    key, raw = item.split("=", 1)
    key = OVERRIDE_ALIASES.get(key.strip(), key.strip())
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw  # bare strings stay strings
    return key, value


def _set_dotted(doc: dict, key: str, value: object) -> None:
    parts = key.split(".")
    node = doc
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override path {key!r} crosses a non-object")
    node[parts[-1]] = value
