"""Incremental training orchestration.

Step 1 trains the whole model (backbone, fusion, blending, first head); every
later step freezes all of that and trains only the new head, with supervision
assembled from ground truth, the previous step's frozen snapshot, and the
unknown clusters. Runs are reproducible bit-exactly from (config, seed): all
randomness flows through seeded generators keyed by (seed, step, epoch,
image id), so the worker count never changes results.
"""
from __future__ import annotations

import copy
import json
import math
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import data as D
from . import protocol as P
from .backbone import (
    Backbone,
    BackboneConfig,
    ParameterRegistry,
    apply_freeze_schedule,
    head_group,
    load_checkpoint,
    save_checkpoint,
)
from .config import RunConfig, parse_config, save_resolved
from .enhancement import BlendMLP, blend_prototypes, enhance, masked_average_pool
from .errors import ConfigError, FrozenDriftError
from .fusion import build_fusion
from .heads import (
    PredictionPair,
    StepHead,
    bce_objective,
    cluster_prediction_vectors,
    contrastive_unseen_loss,
    decode_predictions,
    predict_dense,
    predict_proposal,
    total_loss,
)
from .labels import (
    EnhancedLabelMap,
    UnknownClusterState,
    assign_unknown_clusters,
    find_unlabeled_proposals,
    generate_enhanced_labels,
    init_cluster_state,
    rewrite_background_to_unknown,
)
from .metrics import (
    ConfusionMatrix,
    MetricReport,
    accumulate,
    emit_report,
    grouped_miou,
    iou_per_class,
)

# Stream tags for derived rng states.
_AUG, _SHUFFLE, _REPLAY_UPDATE, _REPLAY_DRAW = 11, 12, 13, 14


def poly_lr(iteration: int, max_iter: int, lr0: float, power: float) -> float:
    """Polynomial decay: lr0 * (1 - iter/max_iter) ** power."""
    if max_iter <= 0:
        raise ConfigError("max_iter must be positive")
    if not 0 <= iteration <= max_iter:
        raise ConfigError(f"iteration {iteration} outside [0, {max_iter}]")
    return lr0 * (1.0 - iteration / max_iter) ** power


def _rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(key))))


def _id_key(image_id: str) -> int:
    return zlib.crc32(image_id.encode())


class SegModel(nn.Module):
    """Backbone + fusion + blending + the per-step head stack."""

    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone_config = BackboneConfig.preset(cfg.model.scale_preset)
        self.backbone = Backbone(self.backbone_config)
        self.fusion = build_fusion(
            cfg.model.fusion_mode,
            self.backbone_config,
            cfg.fusion.mined_channels_m,
            cfg.fusion.bottleneck_r,
            cfg.fusion.layer2_bias,
            tuple(cfg.fusion.nfp_levels),
        )
        self.blend = (
            BlendMLP(cfg.fusion.mined_channels_m, cfg.semantic.hidden_dim, cfg.semantic.blend_dim)
            if cfg.semantic.enabled
            else None
        )
        self.heads = nn.ModuleList()
        self.dense_in = self.fusion.out_channels
        self.proto_in = self.fusion.out_channels + (self.blend.out_dim if self.blend else 0)

    def add_head(self, step: int, n_classes: int) -> StepHead:
        head = StepHead(step, n_classes, self.cfg.labels.K, self.dense_in, self.proto_in)
        self.heads.append(head)
        return head

    def head_list(self) -> list[StepHead]:
        return list(self.heads)

    def prototypes(self, fused, masks: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        p4 = masked_average_pool(fused.f_out, masks, valid)
        if self.blend is None:
            return p4
        p1, p2, p3 = (masked_average_pool(k, masks, valid) for k in fused.ks)
        return enhance(p4, blend_prototypes(p1, p2, p3, self.blend))

    def predict(
        self,
        images: torch.Tensor,
        masks: torch.Tensor,
        valid: torch.Tensor,
        need_dense: bool,
    ) -> tuple[PredictionPair, torch.Tensor]:
        """Both prediction paths at label resolution, plus the prototypes."""
        pyramid = self.backbone(images)
        fused = self.fusion(pyramid)
        p_out = self.prototypes(fused, masks, valid)
        out_hw = images.shape[-2:]
        heads = self.head_list()
        y2, covered = predict_proposal(
            p_out, masks, valid, heads, fused.f_out.shape[-2:], out_hw
        )
        y1 = predict_dense(fused.f_out, heads, out_hw) if need_dense else None
        return PredictionPair(y1=y1, y2=y2, coverage_valid=covered), p_out


def build_registry(model: SegModel) -> ParameterRegistry:
    registry = ParameterRegistry()
    registry.register("backbone", model.backbone)
    registry.register("meta_net", model.fusion)
    if model.blend is not None:
        registry.register("blend_mlp", model.blend)
    return registry


@dataclass
class ExperimentState:
    model: SegModel
    registry: ParameterRegistry
    cluster_state: UnknownClusterState
    prev_model: SegModel | None = None
    replay: D.ReplayMemory | None = None
    reports: list[MetricReport] = field(default_factory=list)
    prev_manifest: dict | None = None


@dataclass
class Batch:
    images: torch.Tensor  # B x 3 x H x W
    labels: torch.Tensor  # B x H x W long
    masks: torch.Tensor  # B x N x H x W float
    valid: torch.Tensor  # B x N bool
    gts: list[np.ndarray]


def _to_batch(samples: list[tuple[D.LabeledImage, D.ProposalSet]]) -> Batch:
    images = torch.stack(
        [torch.from_numpy(s.image).permute(2, 0, 1).contiguous() for s, _ in samples]
    )
    labels = torch.stack([torch.from_numpy(s.label.astype(np.int64)) for s, _ in samples])
    masks = torch.stack([torch.from_numpy(p.masks.astype(np.float32)) for _, p in samples])
    valid = torch.stack([torch.from_numpy(p.valid.copy()) for _, p in samples])
    return Batch(images, labels, masks, valid, [s.label for s, _ in samples])


def _num_workers() -> int:
    return max(0, int(os.environ.get("ENDING_NUM_WORKERS", "0")))


def _map_loader(fn, items):
    workers = _num_workers()
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))  # order-stable
    return [fn(item) for item in items]


def _load_train_sample(args):
    index, image_id, task, step, cfg, epoch = args
    sample = index.load(image_id)
    sample = D.LabeledImage(
        image=sample.image,
        label=P.remap_labels(sample.label, task, step),
        image_id=sample.image_id,
    )
    proposals = index.proposals(image_id, cfg.dataset.pad_to)
    rng = _rng(cfg.train.seed, step, epoch, _AUG, _id_key(image_id))
    return D.augment(sample, proposals, rng, cfg.dataset.crop_size)


def _augment_replay(entry: D.ReplayEntry, cfg: RunConfig, step: int, epoch: int):
    rng = _rng(cfg.train.seed, step, epoch, _AUG, _id_key(entry.sample.image_id) ^ 0x5A5A)
    return D.augment(entry.sample, entry.proposals, rng, cfg.dataset.crop_size)


def _enhanced_labels_for_batch(
    batch: Batch,
    prev_scores: torch.Tensor | None,
    step: int,
    cfg: RunConfig,
    seen: tuple[int, ...],
) -> list[EnhancedLabelMap]:
    out = []
    for i in range(batch.images.shape[0]):
        scores_i = None if prev_scores is None else prev_scores[i]
        out.append(
            generate_enhanced_labels(
                batch.labels[i], scores_i, cfg.labels.tau, step, cfg.labels.K, seen
            )
        )
    return out


def _cluster_pass(
    batch: Batch,
    labels: list[EnhancedLabelMap],
    p_out: torch.Tensor,
    state: UnknownClusterState,
    model: SegModel,
    step: int,
    cfg: RunConfig,
) -> tuple[list[EnhancedLabelMap], UnknownClusterState, torch.Tensor]:
    """Assign unlabeled proposals to clusters; returns the contrastive loss.

    Assignment is a detached decision; the cluster prediction vectors keep
    their gradient through the first head. Background targets are rewritten
    to unknown channels in step 1 only, where the unknown head is trained.
    """
    pairs: list[tuple[int, int]] = []
    for i, lab in enumerate(labels):
        unlabeled = find_unlabeled_proposals(
            batch.masks[i], batch.valid[i], lab, cfg.labels.unlabeled_overlap_threshold
        )
        pairs.extend((i, int(j)) for j in unlabeled.nonzero(as_tuple=True)[0])
    if not pairs:
        return labels, state, torch.zeros((), dtype=p_out.dtype)

    rows = torch.stack([p_out[i, j] for i, j in pairs])
    state, assignment = assign_unknown_clusters(rows, state)

    if step == 1:
        by_sample: dict[int, tuple[list[int], list[int]]] = {}
        for (i, j), a in zip(pairs, assignment.tolist()):
            by_sample.setdefault(i, ([], []))[0].append(j)
            by_sample[i][1].append(a)
        for i, (props, assigns) in by_sample.items():
            labels[i] = rewrite_background_to_unknown(
                labels[i], batch.masks[i], torch.tensor(props), torch.tensor(assigns)
            )

    head1_rows = model.heads[0].proto(rows.to(p_out.dtype))
    o, nonempty = cluster_prediction_vectors(head1_rows, assignment, cfg.labels.K)
    return labels, state, contrastive_unseen_loss(o, nonempty)


def _stack_targets(labels: list[EnhancedLabelMap]) -> tuple[torch.Tensor, torch.Tensor]:
    return (
        torch.stack([l.targets for l in labels]),
        torch.stack([l.valid for l in labels]),
    )


def _prev_scores(prev_model: SegModel, batch: Batch) -> torch.Tensor:
    with torch.no_grad():
        pair, _ = prev_model.predict(batch.images, batch.masks, batch.valid, need_dense=False)
        return torch.sigmoid(pair.y2)


def run_step(
    state: ExperimentState,
    step: int,
    task: P.TaskSpec,
    cfg: RunConfig,
    train_index: D.DatasetIndex,
    step_dir: Path,
) -> ExperimentState:
    """Train one incremental step and checkpoint it (Algorithm-1 body)."""
    model, registry = state.model, state.registry

    torch.manual_seed(cfg.train.seed * 1000003 + step)
    model.add_head(step, len(task.classes_at(step)))
    registry.register(head_group(step), model.heads[-1])
    apply_freeze_schedule(registry, step)
    frozen_before = {
        name: registry.group_hash(name)
        for name in registry.group_names()
        if not registry.trainable[name]
    }

    seen = task.seen_at(step)
    view = P.StepView(
        step_index=step,
        current_classes=task.classes_at(step),
        seen_classes=seen,
        image_ids=P.filter_images(train_index, task, step),
    )

    step_dir.mkdir(parents=True, exist_ok=True)
    log_path = step_dir / "train_log.ndjson"
    log_lines: list[str] = []

    n_images = len(view.image_ids)
    batch_size = cfg.train.batch_size
    lr0 = cfg.train.lr0_step1 if step == 1 else cfg.train.lr0_later
    replay_on = cfg.train.replay.enabled and step > 1 and state.replay and len(state.replay)

    if n_images == 0:
        log_lines.append(json.dumps({"event": "zero_image_step", "step": step}))
    else:
        params = registry.trainable_parameters()
        optimizer = torch.optim.SGD(
            params, lr=lr0, momentum=cfg.train.momentum, weight_decay=cfg.train.weight_decay
        )
        iters_per_epoch = math.ceil(n_images / batch_size)
        max_iter = cfg.train.epochs_per_step * iters_per_epoch
        replay_rng = _rng(cfg.train.seed, step, _REPLAY_DRAW)
        iteration = 0
        for epoch in range(cfg.train.epochs_per_step):
            order = list(view.image_ids)
            _rng(cfg.train.seed, step, epoch, _SHUFFLE).shuffle(order)
            for start in range(0, n_images, batch_size):
                chunk = order[start : start + batch_size]
                samples = _map_loader(
                    _load_train_sample,
                    [(train_index, i, task, step, cfg, epoch) for i in chunk],
                )
                if replay_on:
                    drawn = D.sample_replay(state.replay, len(chunk) // 3, replay_rng)
                    samples += [_augment_replay(e, cfg, step, epoch) for e in drawn]
                batch = _to_batch(samples)

                prev = None if step == 1 else _prev_scores(state.prev_model, batch)
                labels = _enhanced_labels_for_batch(batch, prev, step, cfg, seen)

                pyramid = model.backbone(batch.images)
                fused = model.fusion(pyramid)
                p_out = model.prototypes(fused, batch.masks, batch.valid)
                labels, state.cluster_state, lc = _cluster_pass(
                    batch, labels, p_out, state.cluster_state, model, step, cfg
                )
                targets, valid = _stack_targets(labels)
                out_hw = batch.images.shape[-2:]
                heads = model.head_list()
                y2, covered = predict_proposal(
                    p_out, batch.masks, batch.valid, heads, fused.f_out.shape[-2:], out_hw
                )
                y1 = predict_dense(fused.f_out, heads, out_hw) if step == 1 else None
                pair = PredictionPair(y1=y1, y2=y2, coverage_valid=covered)

                bce = bce_objective(pair, targets, valid, step)
                loss = total_loss(bce, lc)

                lr = poly_lr(iteration, max_iter, lr0, cfg.train.poly_power)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()

                log_lines.append(
                    json.dumps(
                        {
                            "step": step,
                            "epoch": epoch,
                            "iter": iteration,
                            "loss_total": float(loss.item()),
                            "loss_bce": float(bce.item()),
                            "loss_c": float(lc.item()),
                            "lr": lr,
                        },
                        sort_keys=True,
                    )
                )
                iteration += 1

    log_path.write_text("".join(line + "\n" for line in log_lines))

    drift = [
        name for name, digest in frozen_before.items() if registry.group_hash(name) != digest
    ]
    if drift:
        raise FrozenDriftError(f"frozen groups changed during step {step}: {drift}")

    state.prev_manifest = save_checkpoint(step_dir, registry, step)

    if cfg.train.replay.enabled:
        memory = state.replay or D.ReplayMemory(capacity=cfg.train.replay.capacity)
        candidates = []
        for image_id in view.image_ids:
            sample = train_index.load(image_id)
            candidates.append(
                (
                    D.LabeledImage(
                        image=sample.image,
                        label=P.remap_labels(sample.label, task, step),
                        image_id=sample.image_id,
                    ),
                    train_index.proposals(image_id, cfg.dataset.pad_to),
                )
            )
        state.replay = D.update_replay_memory(
            memory,
            candidates,
            list(view.current_classes),
            list(seen),
            step,
            _rng(cfg.train.seed, step, _REPLAY_UPDATE),
        )

    state.prev_model = copy.deepcopy(model)
    state.prev_model.eval()
    for p in state.prev_model.parameters():
        p.requires_grad_(False)
    return state


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def _pad_to_multiple(image: torch.Tensor, mult: int) -> torch.Tensor:
    h, w = image.shape[-2:]
    ph = (mult - h % mult) % mult
    pw = (mult - w % mult) % mult
    if ph or pw:
        image = torch.nn.functional.pad(image, (0, pw, 0, ph))
    return image


def evaluate_model(
    model: SegModel,
    index: D.DatasetIndex,
    image_ids: list[str],
    task: P.TaskSpec,
    step: int,
    cfg: RunConfig,
) -> MetricReport:
    """Un-augmented native-resolution evaluation over the seen classes."""
    model.eval()
    seen = task.seen_at(step)
    cm = ConfusionMatrix(task.total_fg_classes)
    stride = model.backbone_config.strides[2]
    with torch.no_grad():
        for image_id in image_ids:
            sample = index.load(image_id)
            proposals = index.proposals(image_id, cfg.dataset.pad_to)
            h, w = sample.label.shape
            images = torch.from_numpy(sample.image).permute(2, 0, 1).unsqueeze(0)
            images = _pad_to_multiple(images, stride)
            masks = torch.from_numpy(proposals.masks.astype(np.float32)).unsqueeze(0)
            masks = _pad_to_multiple(masks, stride)
            valid = torch.from_numpy(proposals.valid.copy()).unsqueeze(0)
            pair, _ = model.predict(images, masks, valid, need_dense=False)
            pred = decode_predictions(pair.y2, cfg.labels.K, seen)[0, :h, :w].numpy()
            gt = P.remap_labels_to_seen(sample.label, task, step)
            accumulate(cm, pred, gt)
    model.train()
    base = list(task.steps[0])
    new = [c for c in seen if c not in task.steps[0]]
    return grouped_miou(iou_per_class(cm), {"base": base, "new": new}, step=step)


# ---------------------------------------------------------------------------
# Whole experiments
# ---------------------------------------------------------------------------


def prepare_indexes(cfg: RunConfig) -> tuple[D.DatasetIndex, list[str], list[str]]:
    """Training/validation image ids over one dataset index."""
    if cfg.dataset.kind == "synthetic":
        index = D.generate_synthetic_dataset(
            cfg.dataset.seed,
            cfg.dataset.n_fg_classes,
            cfg.dataset.n_images + cfg.dataset.n_val_images,
            cfg.dataset.size,
        )
        train_ids = index.image_ids[: cfg.dataset.n_images]
        val_ids = index.image_ids[cfg.dataset.n_images :]
    else:
        index = D.load_voc_layout(cfg.dataset.path)
        train_ids = index.splits.get("train", [])
        val_ids = index.splits.get("val", [])
    if cfg.dataset.proposal_source == "oracle":
        index._load_proposals = None
    elif cfg.dataset.proposal_source == "files" and not index.has_proposal_files():
        raise ConfigError("proposal_source=files but the dataset ships no proposal files")
    return index, train_ids, val_ids


def verify_frozen_manifest(run_dir: Path, upto_step: int) -> None:
    """Cross-step freeze invariant: frozen group hashes must never move.

    Compares each step's manifest with the previous one for every group
    except the step's own new head.
    """
    manifests = {}
    for t in range(1, upto_step + 1):
        path = Path(run_dir) / f"step_{t}" / "manifest.json"
        manifests[t] = {g["name"]: g["sha256"] for g in json.loads(path.read_text())["groups"]}
    for t in range(2, upto_step + 1):
        for name, digest in manifests[t - 1].items():
            if manifests[t].get(name) != digest:
                raise FrozenDriftError(
                    f"group {name!r} hash changed between step {t - 1} and step {t}"
                )


def run_experiment(cfg: RunConfig, base_dir: str | Path | None = None) -> list[MetricReport]:
    """Build everything, run all steps, evaluate after each, write reports."""
    run_dir = Path(base_dir) if base_dir else Path(cfg.output.dir) / cfg.output.run_name
    run_dir.mkdir(parents=True, exist_ok=True)
    save_resolved(cfg, run_dir / "resolved_config.json")

    task = P.build_task(cfg.task.split, cfg.task.total_fg_classes, cfg.task.mode)
    index, train_ids, val_ids = prepare_indexes(cfg)
    train_index = index.subset(train_ids)

    torch.manual_seed(cfg.train.seed)
    model = SegModel(cfg)
    registry = build_registry(model)
    state = ExperimentState(
        model=model,
        registry=registry,
        cluster_state=init_cluster_state(cfg.labels.K, model.proto_in, cfg.train.seed),
    )

    for step in range(1, task.num_steps + 1):
        step_dir = run_dir / f"step_{step}"
        state = run_step(state, step, task, cfg, train_index, step_dir)
        report = evaluate_model(model, index, val_ids, task, step, cfg)
        state.reports.append(report)
        (step_dir / "metrics.json").write_text(
            json.dumps(report.to_dict(), indent=1, sort_keys=True)
        )

    verify_frozen_manifest(run_dir, task.num_steps)
    for fmt in cfg.output.formats:
        emit_report(state.reports, fmt, run_dir, name=cfg.output.run_name)
    return state.reports


def reevaluate(run_dir: str | Path, step: int | None = None) -> MetricReport:
    """Rebuild a checkpointed model and rerun validation for one step."""
    run_dir = Path(run_dir)
    resolved = json.loads((run_dir / "resolved_config.json").read_text())
    resolved.pop("overrides", None)
    cfg = parse_config(resolved)
    task = P.build_task(cfg.task.split, cfg.task.total_fg_classes, cfg.task.mode)
    if step is None:
        step = task.num_steps

    index, _, val_ids = prepare_indexes(cfg)
    torch.manual_seed(cfg.train.seed)
    model = SegModel(cfg)
    registry = build_registry(model)
    for t in range(1, step + 1):
        model.add_head(t, len(task.classes_at(t)))
        registry.register(head_group(t), model.heads[-1])
    load_checkpoint(run_dir / f"step_{step}", registry)
    return evaluate_model(model, index, val_ids, task, step, cfg)
