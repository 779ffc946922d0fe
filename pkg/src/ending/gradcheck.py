"""End-to-end gradient verification on a tiny float64 model.

Builds a miniature two-image scenario, fixes the data-dependent discrete
choices (proposal-cluster assignment), and compares autograd gradients of
the full step-1 objective against central finite differences, parameter by
parameter. One passing run exercises the whole chain: feature extraction,
filter generation, knowledge mining, fusion, pooling, blending, both
prediction paths, the masked BCE, and the cluster contrast.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .backbone import Backbone, BackboneConfig
from .enhancement import BlendMLP, blend_prototypes, enhance, masked_average_pool
from .fusion import EvolvingFusion
from .heads import (
    PredictionPair,
    StepHead,
    bce_objective,
    cluster_prediction_vectors,
    contrastive_unseen_loss,
    predict_dense,
    predict_proposal,
    total_loss,
)
from .labels import (
    assign_unknown_clusters,
    find_unlabeled_proposals,
    generate_enhanced_labels,
    init_cluster_state,
    rewrite_background_to_unknown,
)
from . import data as D


@dataclass
class CheckSetup:
    backbone: Backbone
    fusion: EvolvingFusion
    blend: BlendMLP
    head: StepHead
    images: torch.Tensor
    masks: torch.Tensor
    valid: torch.Tensor
    targets: torch.Tensor
    pixel_valid: torch.Tensor
    cluster_pairs: list[tuple[int, int]]
    cluster_assignment: torch.Tensor
    n_clusters: int

    def parameter_groups(self) -> dict[str, list[tuple[str, torch.nn.Parameter]]]:
        return {
            "backbone": list(self.backbone.named_parameters()),
            "meta_net": list(self.fusion.named_parameters()),
            "blend_mlp": list(self.blend.named_parameters()),
            "heads.1": list(self.head.named_parameters()),
        }


def _tiny_sample(shift: int, size: int = 16) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([99, shift])))
    image = rng.uniform(0.1, 0.4, size=(size, size, 3)).astype(np.float64)
    label = np.zeros((size, size), dtype=np.int32)
    label[2 + shift : 7 + shift, 2:7] = 1
    yy, xx = np.mgrid[0:size, 0:size]
    label[(yy - 11) ** 2 + (xx - 11 + shift) ** 2 <= 9] = 2
    image[label == 1] = rng.uniform(0.6, 0.9)
    image[label == 2] = rng.uniform(0.6, 0.9)
    return image, label


def build_check_setup(seed: int = 3, n_clusters: int = 2) -> CheckSetup:
    """Miniature step-1 scenario in float64 with frozen cluster assignment."""
    torch.manual_seed(seed)
    config = BackboneConfig(channel_dims=(4, 6, 8, 8), strides=(2, 4, 8, 8))
    backbone = Backbone(config).double()
    fusion = EvolvingFusion(config, mined_channels=3, bottleneck=2).double()
    blend = BlendMLP(3, 3, 3).double()
    dense_in = fusion.out_channels
    head = StepHead(1, n_classes=2, n_unknowns=n_clusters, dense_in=dense_in,
                    proto_in=dense_in + 3).double()

    images, masks, valid, gts = [], [], [], []
    for b in range(2):
        img, lab = _tiny_sample(shift=b)
        props = D.oracle_proposals(lab, pad_to=4)
        images.append(torch.from_numpy(img).permute(2, 0, 1))
        masks.append(torch.from_numpy(props.masks.astype(np.float64)))
        valid.append(torch.from_numpy(props.valid.copy()))
        gts.append(torch.from_numpy(lab.astype(np.int64)))
    images_t = torch.stack(images)
    masks_t = torch.stack(masks)
    valid_t = torch.stack(valid)

    labels = [
        generate_enhanced_labels(g, None, tau=0.7, step=1, n_unknowns=n_clusters,
                                 seen_classes=(1, 2))
        for g in gts
    ]

    # Freeze the discrete cluster assignment once, from the initial model.
    with torch.no_grad():
        pyramid = backbone(images_t)
        fused = fusion(pyramid)
        p4 = masked_average_pool(fused.f_out, masks_t, valid_t)
        lows = [masked_average_pool(k, masks_t, valid_t) for k in fused.ks]
        p_out = enhance(p4, blend_prototypes(*lows, blend))
    pairs: list[tuple[int, int]] = []
    for i, lab in enumerate(labels):
        unlabeled = find_unlabeled_proposals(masks_t[i], valid_t[i], lab, 0.5)
        pairs.extend((i, int(j)) for j in unlabeled.nonzero(as_tuple=True)[0])
    rows = torch.stack([p_out[i, j] for i, j in pairs])
    state = init_cluster_state(n_clusters, rows.shape[1], seed)
    state.centroids = state.centroids.double()
    _, assignment = assign_unknown_clusters(rows, state)
    for (i, j), a in zip(pairs, assignment.tolist()):
        labels[i] = rewrite_background_to_unknown(
            labels[i], masks_t[i], torch.tensor([j]), torch.tensor([a])
        )

    targets = torch.stack([l.targets for l in labels]).double()
    pixel_valid = torch.stack([l.valid for l in labels]).double()
    return CheckSetup(
        backbone=backbone,
        fusion=fusion,
        blend=blend,
        head=head,
        images=images_t,
        masks=masks_t,
        valid=valid_t,
        targets=targets,
        pixel_valid=pixel_valid,
        cluster_pairs=pairs,
        cluster_assignment=assignment,
        n_clusters=n_clusters,
    )


def compute_loss(setup: CheckSetup) -> torch.Tensor:
    """Full step-1 objective with the setup's frozen cluster assignment."""
    pyramid = setup.backbone(setup.images)
    fused = setup.fusion(pyramid)
    p4 = masked_average_pool(fused.f_out, setup.masks, setup.valid)
    lows = [masked_average_pool(k, setup.masks, setup.valid) for k in fused.ks]
    p_out = enhance(p4, blend_prototypes(*lows, setup.blend))

    out_hw = setup.images.shape[-2:]
    heads = [setup.head]
    y2, covered = predict_proposal(
        p_out, setup.masks, setup.valid, heads, fused.f_out.shape[-2:], out_hw
    )
    y1 = predict_dense(fused.f_out, heads, out_hw)
    pair = PredictionPair(y1=y1, y2=y2, coverage_valid=covered)
    bce = bce_objective(pair, setup.targets, setup.pixel_valid, step=1)

    rows = torch.stack([p_out[i, j] for i, j in setup.cluster_pairs])
    head_rows = setup.head.proto(rows)
    o, nonempty = cluster_prediction_vectors(
        head_rows, setup.cluster_assignment, setup.n_clusters
    )
    return total_loss(bce, contrastive_unseen_loss(o, nonempty))


def run_gradient_check(
    seed: int = 3,
    rel_tol: float = 1e-4,
    abs_floor: float = 1e-7,
    eps: float = 1e-6,
) -> dict:
    """Compare autograd with central differences over every parameter.

    Returns per-group worst relative errors plus a global pass flag; an
    entry fails when |analytic - numeric| exceeds both the relative
    tolerance and the absolute floor.
    """
    setup = build_check_setup(seed)
    loss = compute_loss(setup)
    groups = setup.parameter_groups()
    all_params = [p for params in groups.values() for _, p in params]
    analytic = torch.autograd.grad(loss, all_params, allow_unused=False)
    flat_analytic = {id(p): g for (_, p), g in zip(
        [(n, p) for params in groups.values() for n, p in params], analytic
    )}

    report: dict = {"groups": {}, "passed": True, "n_checked": 0}
    for group_name, params in groups.items():
        worst = 0.0
        worst_param = ""
        n = 0
        for param_name, param in params:
            grad = flat_analytic[id(param)]
            flat = param.data.view(-1)
            gflat = grad.view(-1)
            for idx in range(flat.numel()):
                original = flat[idx].item()
                h = eps * max(1.0, abs(original))
                with torch.no_grad():
                    flat[idx] = original + h
                    up = compute_loss(setup).item()
                    flat[idx] = original - h
                    down = compute_loss(setup).item()
                    flat[idx] = original
                numeric = (up - down) / (2 * h)
                a = gflat[idx].item()
                err = abs(a - numeric)
                denom = max(abs(a), abs(numeric))
                rel = err / denom if denom > 0 else 0.0
                if err > abs_floor and rel > rel_tol:
                    report["passed"] = False
                if rel > worst and err > abs_floor:
                    worst = rel
                    worst_param = f"{param_name}[{idx}]"
                n += 1
        report["groups"][group_name] = {
            "n_params": n,
            "max_rel_err": worst,
            "worst_param": worst_param,
        }
        report["n_checked"] += n
    return report
