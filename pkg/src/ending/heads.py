"""Per-step segmentation heads, both prediction paths, and the losses.

Each step owns a dense head (bias-free 1x1 filter bank over the fused
feature) and a prototype head (biased affine map over enhanced prototypes).
The first step's head also carries the background and unknown-cluster
channels; later heads emit only their own classes. Concatenating all heads
in step order matches the enhanced-label channel layout exactly.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .enhancement import resize_masks_to_grid
from .errors import ConfigError, NumericError, ShapeError


class StepHead(nn.Module):
    """Dense and prototype classifiers for the classes of one step."""

    def __init__(self, step: int, n_classes: int, n_unknowns: int, dense_in: int, proto_in: int):
        super().__init__()
        self.step = step
        self.out_channels = (1 + n_unknowns + n_classes) if step == 1 else n_classes
        self.dense = nn.Conv2d(dense_in, self.out_channels, 1, bias=False)
        self.proto = nn.Linear(proto_in, self.out_channels, bias=True)


@dataclass
class PredictionPair:
    y1: torch.Tensor | None  # B x C x H x W dense-path logits (step-1 training only)
    y2: torch.Tensor  # B x C x H x W proposal-path logits
    coverage_valid: torch.Tensor  # B x H x W; 0 where no valid proposal covers the pixel


def _check_heads(heads: list[StepHead]) -> None:
    if not heads:
        raise ConfigError("no segmentation heads")
    for i, h in enumerate(heads, start=1):
        if h.step != i:
            raise ConfigError(f"head for step {i} missing (found step {h.step})")


def predict_dense(
    f_out: torch.Tensor, heads: list[StepHead], out_hw: tuple[int, int]
) -> torch.Tensor:
    """Per-pixel logits from every head, concatenated and upsampled."""
    _check_heads(heads)
    logits = torch.cat([h.dense(f_out) for h in heads], dim=1)
    if logits.shape[-2:] != tuple(out_hw):
        logits = F.interpolate(logits, size=out_hw, mode="bilinear", align_corners=False)
    return logits


def predict_proposal(
    p_out: torch.Tensor,
    masks: torch.Tensor,
    valid: torch.Tensor,
    heads: list[StepHead],
    feature_hw: tuple[int, int],
    out_hw: tuple[int, int],
) -> tuple[torch.Tensor, torch.Tensor]:
    """Broadcast per-proposal logits to pixels through the proposal masks.

    Per-proposal logits (all heads concatenated) are spread over each mask on
    the feature grid and averaged where valid proposals overlap, so stacked
    proposals cannot inflate the logit scale. Pixels no valid proposal covers
    come back flagged in the second return value and must be excluded from
    the loss. Both outputs are upsampled to `out_hw`.
    """
    _check_heads(heads)
    if p_out.shape[:2] != masks.shape[:2]:
        raise ShapeError(
            f"prototype rows {tuple(p_out.shape[:2])} vs masks {tuple(masks.shape[:2])}"
        )
    per_proposal = torch.cat([h.proto(p_out) for h in heads], dim=-1)  # B x N x C
    dtype = per_proposal.dtype
    m = resize_masks_to_grid(masks.to(dtype), feature_hw)
    m = m * valid.to(dtype)[:, :, None, None]
    coverage = m.sum(dim=1)  # B x h x w
    spread = torch.einsum("bnc,bnhw->bchw", per_proposal, m)
    y2 = spread / coverage.clamp(min=1.0).unsqueeze(1)
    covered = (coverage > 0).to(dtype)
    y2 = y2 * covered.unsqueeze(1)
    if y2.shape[-2:] != tuple(out_hw):
        y2 = F.interpolate(y2, size=out_hw, mode="bilinear", align_corners=False)
        covered = (
            F.interpolate(covered.unsqueeze(1), size=out_hw, mode="nearest-exact")
            .squeeze(1)
        )
    return y2, covered


def _masked_bce(logits: torch.Tensor, targets: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    per_entry = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    weight = valid.unsqueeze(1).expand_as(per_entry)
    denom = weight.sum().clamp(min=1.0)
    return (per_entry * weight).sum() / denom


def bce_objective(
    pair: PredictionPair,
    targets: torch.Tensor,
    valid: torch.Tensor,
    step: int,
) -> torch.Tensor:
    """Masked per-entry binary cross-entropy on logits.

    The dense-path term participates only at step 1; the proposal-path term
    additionally excludes pixels without proposal coverage. Each term is the
    mean over its own valid pixel-channel entries.
    """
    if torch.isnan(pair.y2).any() or (pair.y1 is not None and torch.isnan(pair.y1).any()):
        raise NumericError("NaN in prediction logits")
    if pair.y2.shape != targets.shape:
        raise ShapeError(f"logits {tuple(pair.y2.shape)} vs targets {tuple(targets.shape)}")
    loss = _masked_bce(pair.y2, targets, valid * pair.coverage_valid)
    if step == 1:
        if pair.y1 is None:
            raise ConfigError("step 1 requires dense-path predictions")
        loss = _masked_bce(pair.y1, targets, valid) + loss
    return loss


def cluster_prediction_vectors(
    head1_outputs: torch.Tensor, assignment: torch.Tensor, n_clusters: int
) -> tuple[torch.Tensor, torch.Tensor]:
    """Unit-normalized mean first-head output per cluster.

    `head1_outputs` holds one row per unlabeled proposal (the first step's
    prototype head applied to its enhanced prototype). Empty clusters yield
    zero rows, flagged False in the second return value.
    """
    k = n_clusters
    dim = head1_outputs.shape[-1]
    rows = []
    nonempty = torch.zeros(k, dtype=torch.bool)
    for j in range(k):
        mine = head1_outputs[assignment == j]
        if len(mine) == 0:
            rows.append(torch.zeros(dim, dtype=head1_outputs.dtype))
            continue
        mean = mine.mean(dim=0)
        rows.append(F.normalize(mean, dim=0))
        nonempty[j] = True
    return torch.stack(rows), nonempty


def contrastive_unseen_loss(
    o: torch.Tensor, nonempty: torch.Tensor | None = None
) -> torch.Tensor:
    """Self-similarity contrast between cluster prediction vectors.

    Each cluster's own dot product is pulled against its similarity to every
    other cluster through a stabilized log-sum-exp; empty clusters contribute
    nothing but still appear in the denominator as zero vectors. Identically
    zero for a single cluster.
    """
    if o.ndim != 2 or o.shape[0] < 1:
        raise ConfigError(f"need K >= 1 cluster vectors, got shape {tuple(o.shape)}")
    k = o.shape[0]
    if nonempty is None:
        nonempty = o.norm(dim=1) > 0
    sims = o @ o.t()
    log_terms = torch.diagonal(sims) - torch.logsumexp(sims, dim=1)
    kept = log_terms * nonempty.to(o.dtype)
    return -kept.sum() / k


def total_loss(bce: torch.Tensor, lc: torch.Tensor) -> torch.Tensor:
    """Unweighted sum of the two objectives."""
    return bce + lc


def decode_predictions(
    y2: torch.Tensor, n_unknowns: int, seen_classes: tuple[int, ...]
) -> torch.Tensor:
    """Per-pixel class ids from proposal-path logits.

    Argmax over channels; background and unknown channels both decode to
    background, since benchmarks carry no unknown ground truth.
    """
    arg = y2.argmax(dim=1)
    class_ids = torch.tensor([0] * (1 + n_unknowns) + list(seen_classes), dtype=torch.long)
    return class_ids[arg]
