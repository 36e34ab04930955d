"""The detector, its per-image loss routing and the inference path."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .. import cam_rpn, geometry, hybrid_cascade
from ..config import RunConfig
from ..data import ImageRecord
from .backbone import Backbone

CAM_RPN_TERMS = ("cam_cls", "cam_seg", "rpn_cls", "rpn_reg")


class EHSOD(nn.Module):
    def __init__(self, config: RunConfig):
        super().__init__()
        m = config.model
        self.config = config
        self.strides = tuple(m.strides)
        self.backbone = Backbone(m.width, m.stage_channels, m.blocks_per_stage)
        self.cam_head = cam_rpn.CamHead(m.width, m.num_classes)
        self.rpn_head = cam_rpn.RpnHead(m.width, cam_rpn.num_anchors(config.cam_rpn))
        in_dim = m.width * m.roi_size * m.roi_size
        self.heads = nn.ModuleList(hybrid_cascade.HybridHead(in_dim, m.fc_dim, m.num_classes)
                                   for _ in range(config.cascade.num_stages))
        self._anchor_cache: dict[tuple, torch.Tensor] = {}

    @property
    def num_classes(self) -> int:
        return self.config.model.num_classes

    def anchors(self, shapes: Sequence[tuple[int, int]]) -> torch.Tensor:
        key = tuple(shapes)
        if key not in self._anchor_cache:
            c = self.config.cam_rpn
            boxes, _ = geometry.generate_anchors(
                shapes, self.strides, cam_rpn.anchor_sizes(self.strides, c.anchor_scale),
                c.anchor_ratios)
            self._anchor_cache[key] = boxes
        return self._anchor_cache[key]

    def forward(self, images: torch.Tensor):
        features = self.backbone(images)
        cam = cam_rpn.compute_cam(features, self.cam_head)
        rpn_logits, rpn_deltas = self.rpn_head(features)
        return features, cam, rpn_logits, rpn_deltas


@dataclass
class Batch:
    images: torch.Tensor                       # (B, 3, H, W), normalized and padded
    image_sizes: list[tuple[int, int]]
    full: list[bool]
    gt_boxes: list[torch.Tensor | None]
    gt_labels: list[torch.Tensor | None]
    y_star: torch.Tensor                       # (B, C)
    ids: list


def normalize_image(pixels: np.ndarray) -> torch.Tensor:
    """``(H, W, 3)`` uint8 to a ``(3, H, W)`` float tensor, zero-mean unit-variance per channel."""
    x = torch.from_numpy(np.array(pixels, dtype=np.float32)).permute(2, 0, 1) / 255.0
    mean = x.mean(dim=(1, 2), keepdim=True)
    std = x.std(dim=(1, 2), keepdim=True).clamp(min=1e-3)
    return (x - mean) / std


def make_batch(records: Sequence[ImageRecord], pixels: Sequence[np.ndarray], num_classes: int,
               flips: Sequence[bool] | None = None) -> Batch:
    tensors, sizes, full, boxes, labels, ys = [], [], [], [], [], []
    for k, (rec, px) in enumerate(zip(records, pixels)):
        flip = bool(flips[k]) if flips is not None else False
        if flip:
            px = px[:, ::-1]
        h, w = px.shape[:2]
        tensors.append(normalize_image(px))
        sizes.append((h, w))
        full.append(rec.is_full)
        ys.append(torch.from_numpy(rec.label_vector(num_classes)))
        if rec.is_full:
            b = torch.as_tensor(rec.boxes, dtype=torch.float32).reshape(-1, 4)
            if flip:
                b = torch.stack([w - b[:, 2], b[:, 1], w - b[:, 0], b[:, 3]], 1)
            boxes.append(b)
            labels.append(torch.as_tensor(rec.box_labels, dtype=torch.long))
        else:
            boxes.append(None)
            labels.append(None)
    ph = max(math.ceil(h / 32) * 32 for h, _ in sizes)
    pw = max(math.ceil(w / 32) * 32 for _, w in sizes)
    images = torch.zeros(len(tensors), 3, ph, pw)
    for k, t in enumerate(tensors):
        images[k, :, : t.shape[1], : t.shape[2]] = t
    return Batch(images=images, image_sizes=sizes, full=full, gt_boxes=boxes, gt_labels=labels,
                 y_star=torch.stack(ys), ids=[r.id for r in records])


def image_losses(model: EHSOD, batch: Batch,
                 generator: torch.Generator | None = None) -> list[dict[str, torch.Tensor]]:
    """Raw loss terms for each image, routed by its supervision kind.

    Fully annotated images get every term; weakly annotated images only get
    the CAM classification term and the per-stage MID terms.  Stage terms are
    keyed ``"{term}/{stage}"`` with 1-based stages.
    """
    cfg = model.config
    c_cfg, h_cfg = cfg.cam_rpn, cfg.cascade
    features, cam, rpn_logits, rpn_deltas = model(batch.images)
    shapes = [tuple(f.shape[-2:]) for f in features]
    anchors = model.anchors(shapes)
    y_cam = cam_rpn.cam_image_probs(cam)

    terms: list[dict[str, torch.Tensor]] = [{} for _ in batch.ids]
    proposals = []
    for i, is_full in enumerate(batch.full):
        cam_i = [a[i] for a in cam]
        if c_cfg.use_cam:
            terms[i]["cam_cls"] = cam_rpn.cam_cls_loss(y_cam[i], batch.y_star[i])
        if is_full:
            gt_b, gt_l = batch.gt_boxes[i], batch.gt_labels[i]
            if c_cfg.use_cam:
                heat = cam_rpn.build_gt_heatmap(gt_b, gt_l, shapes, model.strides, c_cfg.sigma,
                                                model.num_classes, c_cfg.canonical_level,
                                                c_cfg.canonical_size)
                terms[i]["cam_seg"] = cam_rpn.cam_seg_loss(cam_i, heat, c_cfg.focal_alpha,
                                                           c_cfg.focal_gamma)
            targets = cam_rpn.rpn_targets(anchors, gt_b, c_cfg, generator)
            terms[i]["rpn_cls"] = cam_rpn.rpn_cls_loss(rpn_logits[i], targets)
            terms[i]["rpn_reg"] = cam_rpn.rpn_reg_loss(rpn_deltas[i], targets)
        props, _ = cam_rpn.select_proposals(
            rpn_logits[i].detach(), rpn_deltas[i].detach(), anchors,
            [a.detach() for a in cam_i] if c_cfg.use_cam else None, model.strides,
            batch.image_sizes[i], c_cfg, c_cfg.train_proposals)
        if is_full and h_cfg.add_gt_as_proposals and batch.gt_boxes[i].shape[0]:
            props = torch.cat([props, batch.gt_boxes[i]])
        proposals.append(props)

    gt = [(b, l) if f else None for f, b, l in zip(batch.full, batch.gt_boxes, batch.gt_labels)]
    stages = hybrid_cascade.cascade_forward(
        features, proposals, model.heads, h_cfg, model.strides, batch.image_sizes,
        cfg.model.roi_size, c_cfg.canonical_level, c_cfg.canonical_size, gt=gt)

    for t, stage in enumerate(stages, start=1):
        out = stage.outputs
        stds = h_cfg.stage_stds[t - 1]
        offsets = np.cumsum([0] + stage.counts)
        for i, is_full in enumerate(batch.full):
            rows = slice(offsets[i], offsets[i + 1])
            s, p = out.s[rows], out.p[rows]
            g = hybrid_cascade.image_evidence(s, p)
            terms[i][f"mid/{t}"] = hybrid_cascade.mid_loss(g, batch.y_star[i])
            if not is_full:
                continue
            a = stage.assignments[i]
            ptargets = hybrid_cascade.proposal_targets(a, model.num_classes, p.dtype)
            terms[i][f"proposals/{t}"] = hybrid_cascade.proposals_loss(p, ptargets)
            idx = hybrid_cascade.sample_rois(a.labels, h_cfg.samples_per_image,
                                             h_cfg.pos_fraction, generator)
            cls_logits = out.cls_logits[rows][idx]
            terms[i][f"cls/{t}"] = hybrid_cascade.head_cls_loss(cls_logits, a.labels[idx])
            boxes = stage.boxes[i][idx]
            positive = a.labels[idx] > 0
            target = torch.zeros_like(boxes)
            if positive.any():
                matched = batch.gt_boxes[i][a.matched_gt[idx][positive]]
                target[positive] = geometry.encode_deltas(matched, boxes[positive], stds)
            terms[i][f"reg/{t}"] = hybrid_cascade.head_reg_loss(
                out.deltas[rows][idx], target, positive, idx.numel())
    return terms


def combine_losses(terms: dict[str, torch.Tensor | float], config: RunConfig):
    """``lambda0 * L_CAM-RPN + sum_t lambda_t * L_HS-head-t`` for one image."""
    total = config.train.lambda0 * cam_rpn.cam_rpn_loss(
        {k: terms.get(k) for k in CAM_RPN_TERMS}, config.cam_rpn)
    for t, lam in enumerate(config.cascade.stage_weights, start=1):
        parts = {name: terms.get(f"{name}/{t}") for name in hybrid_cascade.HEAD_TERMS}
        total = total + lam * hybrid_cascade.hs_head_loss(parts, config.cascade.beta)
    return total


def total_loss(batch: Batch, model: EHSOD, config: RunConfig | None = None,
               generator: torch.Generator | None = None) -> tuple[torch.Tensor, dict[str, float]]:
    """Batch loss (mean over images) and a per-term breakdown.

    The breakdown averages each raw term over the images where it is defined.
    Raises :class:`FloatingPointError` naming the first non-finite term.
    """
    config = config or model.config
    per_image = image_losses(model, batch, generator)
    totals = []
    sums: dict[str, list[float]] = {}
    for terms in per_image:
        for name, value in terms.items():
            if not torch.isfinite(value):
                raise FloatingPointError(f"non-finite loss term {name} on image batch {batch.ids}")
            sums.setdefault(name, []).append(float(value.detach()))
        totals.append(combine_losses(terms, config))
    loss = torch.stack([torch.as_tensor(t) if not torch.is_tensor(t) else t for t in totals]).mean()
    breakdown = {name: float(np.mean(v)) for name, v in sorted(sums.items())}
    breakdown["total"] = float(loss.detach())
    return loss, breakdown


@dataclass
class Detection:
    box: geometry.Box
    label: int
    score: float

    def to_json(self, categories: Sequence[str] | None = None) -> dict:
        out = {"box": [round(v, 4) for v in self.box.as_list()], "label": self.label,
               "score": round(self.score, 6)}
        if categories is not None:
            out["category"] = categories[self.label - 1]
        return out


@torch.no_grad()
def infer_batch(model: EHSOD, images: torch.Tensor,
                image_sizes: Sequence[tuple[int, int]]) -> list[list[Detection]]:
    model.eval()
    cfg = model.config
    c_cfg = cfg.cam_rpn
    features, cam, rpn_logits, rpn_deltas = model(images)
    anchors = model.anchors([tuple(f.shape[-2:]) for f in features])
    proposals = []
    for i, size in enumerate(image_sizes):
        props, _ = cam_rpn.select_proposals(
            rpn_logits[i], rpn_deltas[i], anchors,
            [a[i] for a in cam] if c_cfg.use_cam else None, model.strides, size, c_cfg,
            c_cfg.test_proposals)
        proposals.append(props)
    dets = hybrid_cascade.cascade_detect(
        features, proposals, model.heads, cfg.cascade, model.strides, image_sizes,
        cfg.model.roi_size, c_cfg.canonical_level, c_cfg.canonical_size)
    results = []
    for d in dets:
        results.append([
            Detection(geometry.Box(*map(float, b.tolist())), int(l), float(s))
            for b, l, s in zip(d.boxes, d.labels, d.scores)])
    return results


def infer(image: np.ndarray, model: EHSOD, config: RunConfig | None = None) -> list[Detection]:
    """Detections for one ``(H, W, 3)`` uint8 image."""
    x = normalize_image(image)
    h, w = image.shape[:2]
    ph, pw = math.ceil(h / 32) * 32, math.ceil(w / 32) * 32
    padded = torch.zeros(1, 3, ph, pw)
    padded[0, :, :h, :w] = x
    return infer_batch(model, padded, [(h, w)])[0]


def infer_records(model: EHSOD, records: Sequence[ImageRecord], pixels: Sequence[np.ndarray],
                  batch_size: int = 16) -> dict:
    out = {}
    for start in range(0, len(records), batch_size):
        recs = records[start:start + batch_size]
        batch = make_batch(recs, pixels[start:start + batch_size], model.num_classes)
        for rec, dets in zip(recs, infer_batch(model, batch.images, batch.image_sizes)):
            out[rec.id] = dets
    return out
