"""Box arithmetic shared by the proposal stage and the cascade heads.

Boxes are stored in corner form ``(x1, y1, x2, y2)`` in pixel units.  Batched
operations take ``(N, 4)`` tensors; the scalar :class:`Box` type is a thin
convenience for single-box calls and I/O.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch

# Minimum side length (pixels) of any decoded box.
MIN_BOX_SIZE = 1.0
# Largest log-scale change allowed when decoding, as in Faster R-CNN.
DELTA_CLAMP = math.log(1000.0 / 16)


class DegenerateBoxError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise DegenerateBoxError(f"non-finite box {coords}")
        if self.x2 <= self.x1 or self.y2 <= self.y1:
            raise DegenerateBoxError(f"box has non-positive size: {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def to_center(self) -> tuple[float, float, float, float]:
        """Return ``(cx, cy, w, h)``."""
        return ((self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2, self.width, self.height)

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "Box":
        return cls(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def box_area(boxes: torch.Tensor) -> torch.Tensor:
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def box_iou(boxes1: torch.Tensor, boxes2: torch.Tensor) -> torch.Tensor:
    """Pairwise IoU, ``(N, 4) x (M, 4) -> (N, M)``."""
    area1 = box_area(boxes1)
    area2 = box_area(boxes2)
    lt = torch.maximum(boxes1[:, None, :2], boxes2[None, :, :2])
    rb = torch.minimum(boxes1[:, None, 2:], boxes2[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area1[:, None] + area2[None, :] - inter
    return inter / union.clamp(min=1e-12)


def generate_anchors(
    pyramid_shapes: Sequence[tuple[int, int]],
    strides: Sequence[int],
    sizes: Sequence[float],
    ratios: Sequence[float] = (0.5, 1.0, 2.0),
    dtype: torch.dtype = torch.float32,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Dense anchors for every cell of every pyramid level.

    ``sizes[l]`` is the side of the square anchor on level ``l``; each ratio
    ``r = h / w`` keeps the area fixed.  Ordering is level-major, then
    row-major over cells, then anchor shape.

    Returns ``(boxes, levels)`` where ``levels`` holds 0-based level indices.
    """
    if len(pyramid_shapes) == 0:
        raise ValueError("empty pyramid")
    if len(ratios) == 0:
        raise ValueError("at least one anchor shape is required")
    if not (len(pyramid_shapes) == len(strides) == len(sizes)):
        raise ValueError("pyramid_shapes, strides and sizes must have equal length")

    all_boxes, all_levels = [], []
    ratios_t = torch.as_tensor(ratios, dtype=torch.float64)
    for level, ((h, w), stride, size) in enumerate(zip(pyramid_shapes, strides, sizes)):
        ws = size / torch.sqrt(ratios_t)
        hs = size * torch.sqrt(ratios_t)
        base = torch.stack([-ws / 2, -hs / 2, ws / 2, hs / 2], dim=1)  # (A, 4)
        cy = (torch.arange(h, dtype=torch.float64) + 0.5) * stride
        cx = (torch.arange(w, dtype=torch.float64) + 0.5) * stride
        yy, xx = torch.meshgrid(cy, cx, indexing="ij")
        centers = torch.stack([xx, yy, xx, yy], dim=-1).reshape(-1, 1, 4)
        boxes = (centers + base[None]).reshape(-1, 4)
        all_boxes.append(boxes)
        all_levels.append(torch.full((boxes.shape[0],), level, dtype=torch.long))
    return torch.cat(all_boxes).to(dtype), torch.cat(all_levels)


def nms(boxes: torch.Tensor, scores: torch.Tensor, iou_threshold: float) -> list[int]:
    """Greedy non-maximum suppression.

    Kept indices are returned in descending score order; equal scores are
    visited lower index first.
    """
    if boxes.shape[0] != scores.shape[0]:
        raise ValueError("boxes and scores must have equal length")
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must be in [0, 1], got {iou_threshold}")
    if torch.isnan(scores).any():
        raise ValueError("NaN score passed to nms")
    n = boxes.shape[0]
    if n == 0:
        return []
    order = torch.argsort(-scores, stable=True)
    ious = box_iou(boxes[order], boxes[order])
    suppressed = torch.zeros(n, dtype=torch.bool)
    keep = []
    for pos in range(n):
        if suppressed[pos]:
            continue
        keep.append(int(order[pos]))
        suppressed |= ious[pos] > iou_threshold
    return keep


def batched_nms(boxes: torch.Tensor, scores: torch.Tensor, classes: torch.Tensor,
                iou_threshold: float) -> list[int]:
    """Class-wise NMS; result sorted by descending score."""
    keep: list[int] = []
    for c in torch.unique(classes).tolist():
        idx = torch.nonzero(classes == c).flatten()
        keep.extend(idx[k].item() for k in nms(boxes[idx], scores[idx], iou_threshold))
    keep_t = torch.as_tensor(keep, dtype=torch.long)
    if keep_t.numel() == 0:
        return []
    order = torch.argsort(-scores[keep_t], stable=True)
    return keep_t[order].tolist()


def encode_deltas(boxes: torch.Tensor, refs: torch.Tensor,
                  stds: Sequence[float] = (1.0, 1.0, 1.0, 1.0)) -> torch.Tensor:
    """Offsets ``(dx, dy, dw, dh)`` taking ``refs`` to ``boxes``."""
    rw = refs[:, 2] - refs[:, 0]
    rh = refs[:, 3] - refs[:, 1]
    if (rw <= 0).any() or (rh <= 0).any():
        raise DegenerateBoxError("reference box has non-positive size")
    rx = refs[:, 0] + 0.5 * rw
    ry = refs[:, 1] + 0.5 * rh
    bw = boxes[:, 2] - boxes[:, 0]
    bh = boxes[:, 3] - boxes[:, 1]
    bx = boxes[:, 0] + 0.5 * bw
    by = boxes[:, 1] + 0.5 * bh
    deltas = torch.stack([(bx - rx) / rw, (by - ry) / rh,
                          torch.log(bw / rw), torch.log(bh / rh)], dim=1)
    return deltas / deltas.new_tensor(stds)


def decode_deltas(deltas: torch.Tensor, refs: torch.Tensor,
                  stds: Sequence[float] = (1.0, 1.0, 1.0, 1.0),
                  image_size: tuple[int, int] | None = None) -> torch.Tensor:
    """Apply offsets to reference boxes.

    With ``image_size=(h, w)`` the result is clipped to the image.  Every
    output side is at least :data:`MIN_BOX_SIZE`.
    """
    deltas = deltas * deltas.new_tensor(stds)
    rw = refs[:, 2] - refs[:, 0]
    rh = refs[:, 3] - refs[:, 1]
    rx = refs[:, 0] + 0.5 * rw
    ry = refs[:, 1] + 0.5 * rh
    dw = deltas[:, 2].clamp(max=DELTA_CLAMP)
    dh = deltas[:, 3].clamp(max=DELTA_CLAMP)
    cx = rx + deltas[:, 0] * rw
    cy = ry + deltas[:, 1] * rh
    w = (rw * torch.exp(dw)).clamp(min=MIN_BOX_SIZE)
    h = (rh * torch.exp(dh)).clamp(min=MIN_BOX_SIZE)
    x1, y1, x2, y2 = cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h
    if image_size is not None:
        img_h, img_w = image_size
        x1 = x1.clamp(0, img_w - MIN_BOX_SIZE)
        y1 = y1.clamp(0, img_h - MIN_BOX_SIZE)
        x2 = torch.maximum(x2.clamp(max=img_w), x1 + MIN_BOX_SIZE)
        y2 = torch.maximum(y2.clamp(max=img_h), y1 + MIN_BOX_SIZE)
    return torch.stack([x1, y1, x2, y2], dim=1)


@dataclass
class Assignment:
    """Per-proposal assignment at one IoU threshold.

    ``labels`` holds 0 for background, ``-1`` for ignore (never produced by
    :func:`assign`) and 1..C for a class.  ``matched_gt`` is -1 unless the
    proposal is positive.
    """
    labels: torch.Tensor
    matched_gt: torch.Tensor
    iou: torch.Tensor

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def positive(self) -> torch.Tensor:
        return self.labels > 0


def assign(proposals: torch.Tensor, gt_boxes: torch.Tensor, gt_labels: torch.Tensor,
           pos_iou_threshold: float) -> Assignment:
    """Label each proposal by its best-overlapping ground truth.

    A proposal is positive when that IoU reaches ``pos_iou_threshold``;
    otherwise it is background.  Ties go to the lower ground-truth index.
    """
    if not 0.0 < pos_iou_threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {pos_iou_threshold}")
    n = proposals.shape[0]
    if gt_boxes.shape[0] == 0 or n == 0:
        return Assignment(
            labels=torch.zeros(n, dtype=torch.long),
            matched_gt=torch.full((n,), -1, dtype=torch.long),
            iou=torch.zeros(n, dtype=proposals.dtype),
        )
    ious = box_iou(proposals, gt_boxes)
    # torch.max returns the first maximal index on CPU; make it explicit.
    best_iou = ious.max(dim=1).values
    best_gt = (ious == best_iou[:, None]).to(torch.int8).argmax(dim=1)
    positive = best_iou >= pos_iou_threshold
    labels = torch.where(positive, gt_labels[best_gt].long(), torch.zeros_like(best_gt))
    matched = torch.where(positive, best_gt, torch.full_like(best_gt, -1))
    return Assignment(labels=labels, matched_gt=matched, iou=best_iou)


def fpn_level(boxes: torch.Tensor, canonical_level: int, canonical_size: float,
              num_levels: int = 4) -> torch.Tensor:
    """0-based pyramid level for each box by the FPN area rule.

    ``level = clamp(floor(l0 + log2(sqrt(wh) / s0)), 1, L)`` with 1-based
    ``l0``; the returned index is shifted to 0-based.
    """
    scale = torch.sqrt(box_area(boxes).clamp(min=1e-12))
    lvl = torch.floor(canonical_level + torch.log2(scale / canonical_size))
    return (lvl.clamp(1, num_levels) - 1).long()
