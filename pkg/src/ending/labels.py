"""Enhanced supervision targets.

Per pixel the target combines, in priority order: ground truth for labeled
classes, confident old-class pseudo-labels from the previous step's frozen
model, plain background, or exclusion from the loss. Unlabeled proposals
(little overlap with labeled foreground) are assigned to "unknown" clusters
whose channels live in the first step's head.

Target channel order: [background, unknown_1..unknown_K, seen classes in
ascending id order]. Per pixel at most one channel is positive; an all-zero
column means the pixel is excluded via the validity mask.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError, DataError, InvariantViolation


@dataclass
class EnhancedLabelMap:
    targets: torch.Tensor  # (1 + K + n_seen) x H x W float binary
    valid: torch.Tensor  # H x W float binary; 0 excludes the pixel from the loss
    seen_classes: tuple[int, ...]  # ascending ids behind the class channels
    n_unknowns: int

    @property
    def n_channels(self) -> int:
        return self.targets.shape[0]

    def class_channel(self, class_id: int) -> int:
        return 1 + self.n_unknowns + self.seen_classes.index(class_id)


def channel_layout(n_unknowns: int, seen_classes: tuple[int, ...]) -> list[str]:
    """Human-readable names of the target/prediction channels, in order."""
    return (
        ["background"]
        + [f"unknown_{j}" for j in range(1, n_unknowns + 1)]
        + [f"class_{c}" for c in seen_classes]
    )


def generate_enhanced_labels(
    gt: torch.Tensor,
    prev_scores: torch.Tensor | None,
    tau: float,
    step: int,
    n_unknowns: int,
    seen_classes: tuple[int, ...],
) -> EnhancedLabelMap:
    """Build the per-pixel multi-channel binary target for one sample.

    `gt` is a remapped label grid (current classes for fresh samples; replay
    samples may carry classes from their origin step). `prev_scores` are the
    previous model's per-pixel probabilities over [background, unknowns, old
    classes] and must be absent exactly at step 1. Priority: ground truth,
    then confident old-class pseudo-label, then background when the previous
    model itself votes background/unknown, else loss exclusion.
    """
    if step == 1 and prev_scores is not None:
        raise InvariantViolation("previous-model scores passed at step 1")
    if step > 1 and prev_scores is None:
        raise InvariantViolation(f"step {step} needs previous-model scores")

    seen_classes = tuple(sorted(seen_classes))
    h, w = gt.shape
    n_ch = 1 + n_unknowns + len(seen_classes)
    targets = torch.zeros(n_ch, h, w, dtype=torch.float32)
    valid = torch.ones(h, w, dtype=torch.float32)

    fg = gt > 0
    bad = torch.unique(gt[fg]).tolist() if fg.any() else []
    bad = [c for c in bad if c not in seen_classes]
    if bad:
        raise DataError(f"label ids {bad} not among seen classes {seen_classes}")

    for idx, c in enumerate(seen_classes):
        targets[1 + n_unknowns + idx][gt == c] = 1.0

    bg = ~fg
    if prev_scores is None:
        targets[0][bg] = 1.0
        return EnhancedLabelMap(targets, valid, seen_classes, n_unknowns)

    n_old = prev_scores.shape[0] - 1 - n_unknowns
    if n_old <= 0:
        raise DataError("previous-model scores carry no old-class channels")
    old_probs = prev_scores[1 + n_unknowns :]
    max_old, arg_old = old_probs.max(dim=0)
    prev_argmax = prev_scores.argmax(dim=0)

    pseudo = bg & (max_old > tau)
    # Old-class channel ids are shared between the previous and current
    # layouts: old classes are a prefix of the current seen ordering.
    targets_flat = targets.view(n_ch, -1)
    pseudo_idx = pseudo.view(-1).nonzero(as_tuple=True)[0]
    targets_flat[1 + n_unknowns + arg_old.view(-1)[pseudo_idx], pseudo_idx] = 1.0

    prev_votes_nonfg = prev_argmax < (1 + n_unknowns)
    plain_bg = bg & ~pseudo & prev_votes_nonfg
    targets[0][plain_bg] = 1.0

    excluded = bg & ~pseudo & ~prev_votes_nonfg
    valid[excluded] = 0.0
    return EnhancedLabelMap(targets, valid, seen_classes, n_unknowns)


def count_pseudo_pixels(labels: EnhancedLabelMap, current_classes: tuple[int, ...]) -> int:
    """Positive old-class target pixels (diagnostic for threshold sweeps)."""
    old = [c for c in labels.seen_classes if c not in current_classes]
    if not old:
        return 0
    rows = [labels.class_channel(c) for c in old]
    return int(labels.targets[rows].sum().item())


# ---------------------------------------------------------------------------
# Unknown-cluster modeling
# ---------------------------------------------------------------------------


@dataclass
class UnknownClusterState:
    centroids: torch.Tensor  # K x D, unit rows
    momentum: float = 0.99

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


def init_cluster_state(
    n_clusters: int, dim: int, seed: int, momentum: float = 0.99
) -> UnknownClusterState:
    if n_clusters < 1:
        raise ConfigError("need at least one unknown cluster")
    gen = torch.Generator().manual_seed(seed)
    c = torch.randn(n_clusters, dim, generator=gen)
    return UnknownClusterState(F.normalize(c, dim=1), momentum)


def find_unlabeled_proposals(
    masks: torch.Tensor,
    valid: torch.Tensor,
    labels: EnhancedLabelMap,
    overlap_threshold: float = 0.5,
) -> torch.Tensor:
    """Valid proposals whose labeled-foreground overlap stays below threshold.

    Computed at label resolution, where proposals and targets are native.
    """
    class_rows = 1 + labels.n_unknowns
    fg_pos = (labels.targets[class_rows:].sum(dim=0) > 0).float()
    m = masks.float()
    areas = m.sum(dim=(1, 2))
    overlap = (m * fg_pos).sum(dim=(1, 2))
    frac = overlap / areas.clamp(min=1.0)
    return valid.bool() & (areas > 0) & (frac < overlap_threshold)


def assign_unknown_clusters(
    prototypes: torch.Tensor, state: UnknownClusterState
) -> tuple[UnknownClusterState, torch.Tensor]:
    """Nearest-centroid (cosine) assignment plus an EMA centroid refresh.

    Returns the updated state and one 0-based cluster index per prototype
    row. With no rows the state is returned unchanged.
    """
    if state.k < 1:
        raise ConfigError("cluster state has no centroids")
    if prototypes.numel() == 0:
        return state, torch.zeros(0, dtype=torch.long)
    p = F.normalize(prototypes.detach().to(state.centroids.dtype), dim=1)
    sims = p @ state.centroids.t()
    assignment = sims.argmax(dim=1)
    new_centroids = state.centroids.clone()
    for j in range(state.k):
        mine = p[assignment == j]
        if len(mine) == 0:
            continue
        blended = state.momentum * new_centroids[j] + (1 - state.momentum) * mine.mean(dim=0)
        new_centroids[j] = F.normalize(blended, dim=0)
    return UnknownClusterState(new_centroids, state.momentum), assignment


def rewrite_background_to_unknown(
    labels: EnhancedLabelMap,
    masks: torch.Tensor,
    unlabeled_idx: torch.Tensor,
    assignment: torch.Tensor,
) -> EnhancedLabelMap:
    """Move background targets under each unlabeled proposal to its cluster.

    Only pixels currently holding the background target change, so ground
    truth, pseudo-labels, and earlier cluster assignments stay intact.
    """
    targets = labels.targets.clone()
    for idx, cluster in zip(unlabeled_idx.tolist(), assignment.tolist()):
        hit = (masks[idx] > 0) & (targets[0] > 0)
        targets[0][hit] = 0.0
        targets[1 + cluster][hit] = 1.0
    return EnhancedLabelMap(targets, labels.valid, labels.seen_classes, labels.n_unknowns)
