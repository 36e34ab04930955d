"""Cascaded hybrid-supervised detection heads.

Each head has three branches on shared pooled features: a classification
branch (foreground softmax ``s`` for the image-level path, ``C+1``-way
softmax ``s_det`` for detection), a proposal-confidence branch (softmax over
the proposals of one image, ``p``) and a class-agnostic box regressor.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn
from torchvision.ops import roi_align

from . import geometry
from .cam_rpn import binary_cross_entropy, smooth_l1
from .config import CascadeConfig, ConfigError

EPS = 1e-7


class HybridHead(nn.Module):
    def __init__(self, in_dim: int, fc_dim: int, num_classes: int):
        super().__init__()
        self.in_dim = in_dim
        self.num_classes = num_classes
        self.fc1 = nn.Linear(in_dim, fc_dim)
        self.fc2 = nn.Linear(fc_dim, fc_dim)
        self.cls = nn.Linear(fc_dim, num_classes + 1)   # column 0 is background
        self.conf = nn.Linear(fc_dim, num_classes)
        self.reg = nn.Linear(fc_dim, 4)
        nn.init.normal_(self.cls.weight, std=0.01)
        nn.init.normal_(self.conf.weight, std=0.01)
        nn.init.normal_(self.reg.weight, std=0.001)
        for m in (self.cls, self.conf, self.reg):
            nn.init.zeros_(m.bias)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Return raw ``(cls_logits, conf_logits, deltas)``."""
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"expected feature dim {self.in_dim}, got {x.shape[-1]}")
        h = F.relu(self.fc2(F.relu(self.fc1(x))))
        return self.cls(h), self.conf(h), self.reg(h)


@dataclass
class HeadOutputs:
    cls_logits: torch.Tensor      # (n, C+1)
    conf_logits: torch.Tensor     # (n, C)
    s: torch.Tensor               # (n, C) softmax over foreground logits
    s_det: torch.Tensor           # (n, C+1)
    p: torch.Tensor               # (n, C) softmax over proposals, per image
    deltas: torch.Tensor          # (n, 4)


def proposal_softmax(conf_logits: torch.Tensor, counts: Sequence[int]) -> torch.Tensor:
    """Softmax over proposals (dim 0), separately for each image's block."""
    return torch.cat([torch.softmax(chunk, dim=0) for chunk in conf_logits.split(list(counts))])


def outputs_from_logits(cls_logits: torch.Tensor, conf_logits: torch.Tensor,
                        deltas: torch.Tensor, counts: Sequence[int] | None = None) -> HeadOutputs:
    if counts is None:
        counts = [cls_logits.shape[0]]
    return HeadOutputs(
        cls_logits=cls_logits,
        conf_logits=conf_logits,
        s=torch.softmax(cls_logits[:, 1:], dim=1),
        s_det=torch.softmax(cls_logits, dim=1),
        p=proposal_softmax(conf_logits, counts),
        deltas=deltas,
    )


def head_forward(rois: torch.Tensor, head: HybridHead,
                 counts: Sequence[int] | None = None) -> HeadOutputs:
    """Run one head on flattened ROI features ``(n, D)``.

    ``counts`` splits the rows into images for the proposal softmax; by
    default all rows belong to one image.
    """
    if rois.shape[0] < 1:
        raise ValueError("head_forward needs at least one proposal")
    return outputs_from_logits(*head(rois), counts=counts)


def image_evidence(s: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    """``g_c = sum_i p_ic s_ic``."""
    return (p * s).sum(0)


def mid_loss(g: torch.Tensor, y_star: torch.Tensor) -> torch.Tensor:
    return binary_cross_entropy(g, y_star)


@dataclass
class ProposalTargets:
    p_star: torch.Tensor          # (n, C)
    counts: torch.Tensor          # N_j per class
    num_proposals: int            # R


def proposal_targets(assignment: geometry.Assignment, num_classes: int,
                     dtype: torch.dtype = torch.float32) -> ProposalTargets:
    """Uniform ``1/N_j`` targets over the proposals assigned to class ``j``."""
    labels = assignment.labels
    onehot = torch.zeros(labels.shape[0], num_classes, dtype=dtype)
    pos = labels > 0
    onehot[pos, labels[pos] - 1] = 1
    counts = onehot.sum(0)
    p_star = onehot / counts.clamp(min=1)
    return ProposalTargets(p_star=p_star, counts=counts.long(), num_proposals=labels.shape[0])


def proposals_loss(p: torch.Tensor, targets: ProposalTargets) -> torch.Tensor:
    """``-(1/R) sum_j sum_i p*_ij log p_ij``."""
    logp = torch.log(p.clamp(min=EPS))
    return -(targets.p_star.to(p) * logp).sum() / max(targets.num_proposals, 1)


def head_cls_loss(cls_logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    if labels.numel() == 0:
        return cls_logits.sum() * 0
    return F.cross_entropy(cls_logits, labels, reduction="mean")


def head_reg_loss(deltas: torch.Tensor, target_deltas: torch.Tensor, positive: torch.Tensor,
                  normalizer: int, beta: float = 1.0) -> torch.Tensor:
    if not positive.any():
        return deltas.sum() * 0
    diff = deltas[positive] - target_deltas[positive].to(deltas)
    return smooth_l1(diff, beta).sum() / max(normalizer, 1)


HEAD_TERMS = ("mid", "proposals", "cls", "reg")


def hs_head_loss(parts: dict[str, torch.Tensor | float], beta: Sequence[float]):
    """Weighted sum of the four head terms; missing terms count as zero."""
    if any(b < 0 for b in beta):
        raise ConfigError("head loss weights must be >= 0")
    total = 0.0
    for name, b in zip(HEAD_TERMS, beta):
        if parts.get(name) is not None:
            total = total + b * parts[name]
    return total


def sample_rois(labels: torch.Tensor, num_samples: int, pos_fraction: float,
                generator: torch.Generator | None = None) -> torch.Tensor:
    """Indices of a random positive/background sample for the detection loss."""
    pos = torch.nonzero(labels > 0).flatten()
    neg = torch.nonzero(labels == 0).flatten()
    max_pos = int(num_samples * pos_fraction)
    if pos.numel() > max_pos:
        pos = pos[torch.randperm(pos.numel(), generator=generator)[:max_pos]]
    max_neg = num_samples - pos.numel()
    if neg.numel() > max_neg:
        neg = neg[torch.randperm(neg.numel(), generator=generator)[:max_neg]]
    return torch.sort(torch.cat([pos, neg])).values


def pool_rois(features: Sequence[torch.Tensor], boxes: Sequence[torch.Tensor],
              strides: Sequence[int], output_size: int,
              canonical_level: int, canonical_size: float) -> torch.Tensor:
    """ROI-align each box on its FPN-matched level; returns ``(n, D*S*S)``."""
    all_boxes = torch.cat(list(boxes))
    batch_idx = torch.cat([torch.full((b.shape[0],), i, dtype=all_boxes.dtype)
                           for i, b in enumerate(boxes)])
    levels = geometry.fpn_level(all_boxes, canonical_level, canonical_size, len(features))
    d = features[0].shape[1]
    out = features[0].new_zeros(all_boxes.shape[0], d, output_size, output_size)
    for lvl, (f, stride) in enumerate(zip(features, strides)):
        idx = torch.nonzero(levels == lvl).flatten()
        if idx.numel() == 0:
            continue
        rois = torch.cat([batch_idx[idx, None], all_boxes[idx]], 1).to(f.dtype)
        out[idx] = roi_align(f, rois, output_size, spatial_scale=1.0 / stride,
                             sampling_ratio=2, aligned=True)
    return out.flatten(1)


@dataclass
class StageResult:
    boxes: list[torch.Tensor]                 # per-image input boxes of this stage
    outputs: HeadOutputs
    counts: list[int]
    assignments: list[geometry.Assignment | None] = field(default_factory=list)


def cascade_forward(features: Sequence[torch.Tensor], proposals: Sequence[torch.Tensor],
                    heads: Sequence[HybridHead], config: CascadeConfig,
                    strides: Sequence[int], image_sizes: Sequence[tuple[int, int]],
                    roi_size: int, canonical_level: int, canonical_size: float,
                    gt: Sequence[tuple[torch.Tensor, torch.Tensor] | None] | None = None,
                    ) -> list[StageResult]:
    """Run the heads in sequence, each on the previous stage's refined boxes.

    ``gt`` (training only) gives ``(boxes, labels)`` per image or ``None``
    for weakly labelled images; stage ``t`` assigns at its own threshold.
    """
    boxes = [b.detach() for b in proposals]
    results = []
    for t, head in enumerate(heads):
        counts = [b.shape[0] for b in boxes]
        feats = pool_rois(features, boxes, strides, roi_size, canonical_level, canonical_size)
        out = head_forward(feats, head, counts)
        assignments = []
        if gt is not None:
            thr = config.stage_thresholds[t]
            for b, g in zip(boxes, gt):
                assignments.append(None if g is None else geometry.assign(b, g[0], g[1], thr))
        results.append(StageResult(boxes=boxes, outputs=out, counts=counts,
                                   assignments=assignments))
        if t + 1 < len(heads):
            stds = config.stage_stds[t]
            refined = []
            for b, d, size in zip(boxes, out.deltas.detach().split(counts), image_sizes):
                refined.append(geometry.decode_deltas(d, b, stds, image_size=size))
            boxes = refined
    return results


@dataclass
class Detections:
    boxes: torch.Tensor
    scores: torch.Tensor
    labels: torch.Tensor          # 1..C


def cascade_detect(features: Sequence[torch.Tensor], proposals: Sequence[torch.Tensor],
                   heads: Sequence[HybridHead], config: CascadeConfig,
                   strides: Sequence[int], image_sizes: Sequence[tuple[int, int]],
                   roi_size: int, canonical_level: int, canonical_size: float,
                   ) -> list[Detections]:
    """Inference path: cascade refinement, stage-averaged scores, class-wise NMS.

    The scores of all heads are averaged on the last stage's input boxes and
    the last head's regression gives the output boxes.
    """
    empty = Detections(torch.zeros(0, 4), torch.zeros(0), torch.zeros(0, dtype=torch.long))
    nonempty = [i for i, p in enumerate(proposals) if p.shape[0] > 0]
    results: list[Detections] = [empty for _ in proposals]
    if not nonempty:
        return results
    features_ne = [f[nonempty] for f in features]
    props = [proposals[i] for i in nonempty]
    sizes = [image_sizes[i] for i in nonempty]
    stages = cascade_forward(features_ne, props, heads, config, strides, sizes, roi_size,
                             canonical_level, canonical_size)
    last = stages[-1]
    scores = last.outputs.s_det
    if len(heads) > 1:
        feats = pool_rois(features_ne, last.boxes, strides, roi_size, canonical_level,
                          canonical_size)
        for head in heads[:-1]:
            scores = scores + head_forward(feats, head, last.counts).s_det
        scores = scores / len(heads)
    stds = config.stage_stds[len(heads) - 1]
    for k, (b, sc, d, size) in enumerate(zip(last.boxes, scores.split(last.counts),
                                             last.outputs.deltas.split(last.counts), sizes)):
        final = geometry.decode_deltas(d, b, stds, image_size=size)
        fg = sc[:, 1:]
        rows, cols = torch.nonzero(fg > config.score_threshold, as_tuple=True)
        if rows.numel() == 0:
            continue
        cand_boxes = final[rows]
        cand_scores = fg[rows, cols]
        keep = geometry.batched_nms(cand_boxes, cand_scores, cols, config.nms_threshold)
        keep = torch.as_tensor(keep[: config.max_detections], dtype=torch.long)
        results[nonempty[k]] = Detections(cand_boxes[keep], cand_scores[keep], cols[keep] + 1)
    return results
