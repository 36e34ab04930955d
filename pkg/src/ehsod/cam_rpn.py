"""CAM-guided region proposal network.

Tensors follow the torch layout: a feature pyramid is a list of four
``(B, D, H, W)`` maps and a CAM pyramid is a list of ``(B, C, H, W)`` logit
maps.  Per-image helpers take the batch dimension off (``(C, H, W)``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from . import geometry
from .config import CamRpnConfig, ConfigError

EPS = 1e-7


class _ConvHead(nn.Module):
    """3x3 conv + ReLU followed by 1x1 convs, shared over pyramid levels."""

    def __init__(self, in_channels: int, out_channels: Sequence[int]):
        super().__init__()
        self.in_channels = in_channels
        self.conv = nn.Conv2d(in_channels, in_channels, 3, padding=1)
        self.outs = nn.ModuleList(nn.Conv2d(in_channels, c, 1) for c in out_channels)
        for m in [self.conv, *self.outs]:
            nn.init.normal_(m.weight, std=0.01)
            nn.init.zeros_(m.bias)

    def forward(self, features: Sequence[torch.Tensor]) -> list[list[torch.Tensor]]:
        results = []
        for f in features:
            if f.shape[1] != self.in_channels:
                raise ValueError(f"expected {self.in_channels} channels, got {f.shape[1]}")
            h = F.relu(self.conv(f))
            results.append([out(h) for out in self.outs])
        return results


class CamHead(_ConvHead):
    def __init__(self, in_channels: int, num_classes: int):
        super().__init__(in_channels, [num_classes])

    def forward(self, features):
        return [outs[0] for outs in super().forward(features)]


class RpnHead(_ConvHead):
    def __init__(self, in_channels: int, num_anchors: int):
        super().__init__(in_channels, [num_anchors, 4 * num_anchors])
        self.num_anchors = num_anchors

    def forward(self, features):
        """Return ``(logits (B, N), deltas (B, N, 4))`` in anchor order."""
        logits, deltas = [], []
        for cls, reg in super().forward(features):
            b, _, h, w = cls.shape
            logits.append(cls.permute(0, 2, 3, 1).reshape(b, -1))
            deltas.append(reg.permute(0, 2, 3, 1).reshape(b, h * w * self.num_anchors, 4))
        return torch.cat(logits, 1), torch.cat(deltas, 1)


def compute_cam(features: Sequence[torch.Tensor], head: CamHead) -> list[torch.Tensor]:
    """Per-level class activation logits; spatial shape is preserved."""
    return head(features)


def cam_image_probs(cam: Sequence[torch.Tensor]) -> torch.Tensor:
    """Image-level class probabilities from a CAM pyramid.

    Each level is average-pooled over space, the level vectors are averaged,
    and a per-class sigmoid is applied.  Accepts batched ``(B, C, H, W)`` or
    single ``(C, H, W)`` levels.
    """
    if len(cam) == 0:
        raise ValueError("empty CAM pyramid")
    pooled = torch.stack([a.mean(dim=(-2, -1)) for a in cam]).mean(0)
    return torch.sigmoid(pooled)


def binary_cross_entropy(probs: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Summed-over-classes BCE with probabilities clamped to ``[EPS, 1-EPS]``."""
    p = probs.clamp(EPS, 1 - EPS)
    t = targets.to(p.dtype)
    return -(t * torch.log(p) + (1 - t) * torch.log(1 - p)).sum(-1)


def cam_cls_loss(y_cam: torch.Tensor, y_star: torch.Tensor) -> torch.Tensor:
    return binary_cross_entropy(y_cam, y_star)


@dataclass
class GtHeatmap:
    """Per-level binary targets and 0/1 loss weights, each ``(C, H, W)``."""
    targets: list[torch.Tensor]
    masks: list[torch.Tensor]


def _covered_cells(lo: torch.Tensor, hi: torch.Tensor, n: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Index range ``[start, stop)`` of cells whose centres lie in ``[lo, hi]``."""
    start = torch.ceil(lo - 0.5).clamp(0, n).long()
    stop = (torch.floor(hi - 0.5) + 1).clamp(0, n).long()
    return start, stop


def build_gt_heatmap(gt_boxes: torch.Tensor, gt_labels: torch.Tensor,
                     pyramid_shapes: Sequence[tuple[int, int]], strides: Sequence[int],
                     sigma: float, num_classes: int,
                     canonical_level: int = 3, canonical_size: float = 224.0) -> GtHeatmap:
    """Tri-state segmentation targets for the CAM pyramid.

    Each box goes to one level by the FPN area rule and is mapped to cell
    units there.  Cells whose centre falls in the centred ``sigma``-scaled
    sub-box are positive; the rest of the mapped box is ignored; everything
    else, on every level, is negative.  A positive region that covers no cell
    centre marks the single cell containing its centre.
    """
    if not 0.0 < sigma <= 1.0:
        raise ConfigError("sigma must be in (0, 1]")
    targets = [torch.zeros(num_classes, h, w) for h, w in pyramid_shapes]
    ignore = [torch.zeros(num_classes, h, w, dtype=torch.bool) for h, w in pyramid_shapes]
    if gt_boxes.shape[0]:
        levels = geometry.fpn_level(gt_boxes.double(), canonical_level, canonical_size,
                                    len(pyramid_shapes))
        for box, label, lvl in zip(gt_boxes.double(), gt_labels.tolist(), levels.tolist()):
            h, w = pyramid_shapes[lvl]
            m = box / strides[lvl]
            cx, cy = (m[0] + m[2]) / 2, (m[1] + m[3]) / 2
            pw, ph = sigma * (m[2] - m[0]), sigma * (m[3] - m[1])
            c = label - 1
            px0, px1 = _covered_cells(cx - pw / 2, cx + pw / 2, w)
            py0, py1 = _covered_cells(cy - ph / 2, cy + ph / 2, h)
            if px1 <= px0 or py1 <= py0:
                j, i = int(torch.floor(cx)), int(torch.floor(cy))
                if 0 <= j < w and 0 <= i < h:
                    targets[lvl][c, i, j] = 1.0
            else:
                targets[lvl][c, py0:py1, px0:px1] = 1.0
            bx0, bx1 = _covered_cells(m[0], m[2], w)
            by0, by1 = _covered_cells(m[1], m[3], h)
            ignore[lvl][c, by0:by1, bx0:bx1] = True
    masks = [(~(ig & (t == 0))).float() for t, ig in zip(targets, ignore)]
    return GtHeatmap(targets=targets, masks=masks)


def focal_terms(logits: torch.Tensor, targets: torch.Tensor, gamma: float) -> torch.Tensor:
    """Per-pixel ``t (1-A)^g log A + (1-t) A^g log(1-A)`` with ``A = sigmoid``."""
    a = torch.sigmoid(logits).clamp(EPS, 1 - EPS)
    t = targets.to(a.dtype)
    return t * (1 - a) ** gamma * torch.log(a) + (1 - t) * a ** gamma * torch.log(1 - a)


def cam_seg_loss(cam: Sequence[torch.Tensor], target: GtHeatmap,
                 alpha: float, gamma: float) -> torch.Tensor:
    """Pixel-level focal loss summed over levels, classes and pixels.

    ``cam`` holds one image's ``(C, H, W)`` logit maps; ignored pixels have
    zero weight.
    """
    total = cam[0].new_zeros(())
    for logits, t, m in zip(cam, target.targets, target.masks):
        if logits.shape != t.shape:
            raise ValueError(f"CAM shape {tuple(logits.shape)} != target {tuple(t.shape)}")
        total = total + (m.to(logits) * focal_terms(logits, t.to(logits), gamma)).sum()
    return -alpha * total


def objectness_map(cam_level: torch.Tensor) -> torch.Tensor:
    """Single-channel CAM: channel softmax, then per-pixel max over classes."""
    return torch.softmax(cam_level, dim=0).max(dim=0).values


def _region_means(obj: torch.Tensor, boxes: torch.Tensor, stride: float) -> torch.Tensor:
    """Mean of ``obj`` (H, W) over each box's covered cells, via a summed-area table."""
    h, w = obj.shape
    sat = F.pad(obj.cumsum(0).cumsum(1), (1, 0, 1, 0))
    m = boxes / stride
    x0, x1 = _covered_cells(m[:, 0], m[:, 2], w)
    y0, y1 = _covered_cells(m[:, 1], m[:, 3], h)
    # Boxes covering no cell centre fall back to the cell holding their centre.
    empty = (x1 <= x0) | (y1 <= y0)
    cx = torch.floor((m[:, 0] + m[:, 2]) / 2).long()
    cy = torch.floor((m[:, 1] + m[:, 3]) / 2).long()
    inside = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
    x0 = torch.where(empty, cx.clamp(0, w - 1), x0)
    x1 = torch.where(empty, cx.clamp(0, w - 1) + 1, x1)
    y0 = torch.where(empty, cy.clamp(0, h - 1), y0)
    y1 = torch.where(empty, cy.clamp(0, h - 1) + 1, y1)
    sums = sat[y1, x1] - sat[y0, x1] - sat[y1, x0] + sat[y0, x0]
    count = ((x1 - x0) * (y1 - y0)).clamp(min=1).to(obj.dtype)
    means = sums / count
    return torch.where(empty & ~inside, torch.zeros_like(means), means)


def cam_objectness(cam_level: torch.Tensor, proposals: torch.Tensor, stride: float) -> torch.Tensor:
    """CAM objectness of each ``(N, 4)`` proposal on one ``(C, H, W)`` level."""
    if proposals.dim() == 1:
        proposals = proposals[None]
    return _region_means(objectness_map(cam_level), proposals.to(cam_level.dtype), stride)


def pyramid_objectness(cam: Sequence[torch.Tensor], proposals: torch.Tensor,
                       strides: Sequence[int], canonical_level: int,
                       canonical_size: float) -> torch.Tensor:
    """CAM objectness with each proposal scored on its FPN-matched level."""
    levels = geometry.fpn_level(proposals, canonical_level, canonical_size, len(cam))
    scores = proposals.new_zeros(proposals.shape[0])
    for lvl, (a, stride) in enumerate(zip(cam, strides)):
        idx = torch.nonzero(levels == lvl).flatten()
        if idx.numel():
            scores[idx] = cam_objectness(a, proposals[idx], stride).to(scores.dtype)
    return scores


def select_proposals(rpn_logits: torch.Tensor, rpn_deltas: torch.Tensor, anchors: torch.Tensor,
                     cam: Sequence[torch.Tensor] | None, strides: Sequence[int],
                     image_size: tuple[int, int], config: CamRpnConfig,
                     top_k: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Decode, fuse RPN confidence with CAM objectness, run NMS, keep ``top_k``.

    The fused score lies in ``[0, 2]`` and only orders candidates.  Pass
    ``cam=None`` to rank by RPN confidence alone.
    """
    with torch.no_grad():
        boxes = geometry.decode_deltas(rpn_deltas, anchors, image_size=image_size)
        scores = torch.sigmoid(rpn_logits)
        if cam is not None:
            scores = scores + pyramid_objectness(cam, boxes, strides, config.canonical_level,
                                                 config.canonical_size)
        if config.min_proposal_size > 0:
            wh = boxes[:, 2:] - boxes[:, :2]
            ok = (wh >= config.min_proposal_size).all(1)
            boxes, scores = boxes[ok], scores[ok]
        if scores.numel() > config.pre_nms_top_k:
            order = torch.argsort(-scores, stable=True)[: config.pre_nms_top_k]
            boxes, scores = boxes[order], scores[order]
        keep = geometry.nms(boxes, scores, config.nms_threshold)[:top_k]
        keep_t = torch.as_tensor(keep, dtype=torch.long)
        return boxes[keep_t], scores[keep_t]


@dataclass
class RpnTargets:
    labels: torch.Tensor          # 1 foreground, 0 background, -1 not sampled
    deltas: torch.Tensor          # regression targets, valid where labels == 1


def rpn_targets(anchors: torch.Tensor, gt_boxes: torch.Tensor, config: CamRpnConfig,
                generator: torch.Generator | None = None) -> RpnTargets:
    """Standard anchor labelling with a random positive/negative sample."""
    n = anchors.shape[0]
    labels = torch.full((n,), -1, dtype=torch.long)
    deltas = anchors.new_zeros(n, 4)
    if gt_boxes.shape[0] == 0:
        labels[:] = 0
    else:
        ious = geometry.box_iou(anchors, gt_boxes)
        best, best_gt = ious.max(1)
        labels[best < config.rpn_neg_iou] = 0
        labels[best >= config.rpn_pos_iou] = 1
        # Each gt keeps its best anchors even below the positive threshold.
        gt_best = ious.max(0).values
        hits = (ious == gt_best[None]) & (gt_best[None] > 0)
        labels[hits.any(1)] = 1
        pos = labels == 1
        deltas[pos] = geometry.encode_deltas(gt_boxes[best_gt[pos]], anchors[pos])
    pos_idx = torch.nonzero(labels == 1).flatten()
    max_pos = int(config.rpn_batch_size * config.rpn_pos_fraction)
    if pos_idx.numel() > max_pos:
        drop = pos_idx[torch.randperm(pos_idx.numel(), generator=generator)[max_pos:]]
        labels[drop] = -1
    neg_idx = torch.nonzero(labels == 0).flatten()
    max_neg = config.rpn_batch_size - int((labels == 1).sum())
    if neg_idx.numel() > max_neg:
        drop = neg_idx[torch.randperm(neg_idx.numel(), generator=generator)[max_neg:]]
        labels[drop] = -1
    return RpnTargets(labels=labels, deltas=deltas)


def smooth_l1(x: torch.Tensor, beta: float) -> torch.Tensor:
    ax = x.abs()
    return torch.where(ax < beta, 0.5 * ax ** 2 / beta, ax - 0.5 * beta)


def rpn_cls_loss(logits: torch.Tensor, targets: RpnTargets) -> torch.Tensor:
    sampled = targets.labels >= 0
    if not sampled.any():
        return logits.sum() * 0
    return F.binary_cross_entropy_with_logits(
        logits[sampled], targets.labels[sampled].to(logits.dtype), reduction="mean")


def rpn_reg_loss(deltas: torch.Tensor, targets: RpnTargets, beta: float = 1.0 / 9) -> torch.Tensor:
    pos = targets.labels == 1
    n = int((targets.labels >= 0).sum())
    if not pos.any():
        return deltas.sum() * 0
    return smooth_l1(deltas[pos] - targets.deltas[pos].to(deltas), beta).sum() / max(n, 1)


def cam_rpn_loss(parts: dict[str, torch.Tensor | float], config: CamRpnConfig) -> torch.Tensor | float:
    """Weighted sum of the CAM and RPN terms; missing terms count as zero."""
    weights = config.weights
    if any(w < 0 for w in weights):
        raise ConfigError("CAM-RPN loss weights must be >= 0")
    names = ("cam_cls", "cam_seg", "rpn_cls", "rpn_reg")
    total = 0.0
    for name, w in zip(names, weights):
        if parts.get(name) is not None:
            total = total + w * parts[name]
    return total


def anchor_sizes(strides: Sequence[int], scale: float) -> list[float]:
    return [scale * s for s in strides]


def num_anchors(config: CamRpnConfig) -> int:
    return len(config.anchor_ratios)


def feature_shapes(image_hw: tuple[int, int], strides: Sequence[int]) -> list[tuple[int, int]]:
    h, w = image_hw
    return [(math.ceil(h / s), math.ceil(w / s)) for s in strides]
