"""Average precision at one or several IoU thresholds."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch

from .. import geometry
from ..data import DatasetManifest
from .model import Detection

COCO_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2).tolist())


@dataclass
class ClassCurve:
    """Cumulative precision/recall after each detection, in score order."""
    precision: np.ndarray
    recall: np.ndarray
    num_gt: int


@dataclass
class EvalReport:
    categories: list[str]
    ap50: dict[str, float]
    ap: dict[str, float]                  # averaged over the COCO thresholds
    map50: float
    map_coco: float
    counts: dict[str, int]
    curves: dict[str, ClassCurve] = field(default_factory=dict, repr=False)

    def to_json(self) -> dict:
        d = asdict(self)
        d.pop("curves")
        return d


def average_precision(recall: np.ndarray, precision: np.ndarray, eleven_point: bool = False) -> float:
    """Area under the precision envelope (all-points), or VOC07 11-point."""
    if recall.size == 0:
        return 0.0
    if eleven_point:
        return float(np.mean([precision[recall >= t].max() if (recall >= t).any() else 0.0
                              for t in np.linspace(0, 1, 11)]))
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _rank_key(det) -> tuple:
    img, box, score = det
    return (-score, img, tuple(float(v) for v in box))


def match_detections(dets: Sequence[tuple[object, np.ndarray, float]],
                     gts: Mapping[object, np.ndarray], iou_threshold: float) -> np.ndarray:
    """True-positive flags for detections ``(image_id, box, score)``.

    Detections are visited by descending score, ties broken by image id and
    box coordinates so the result does not depend on input order; each takes
    the unmatched ground truth of its image with the highest IoU at or above
    the threshold.  Returned flags follow the visiting order.
    """
    order = sorted(range(len(dets)), key=lambda k: _rank_key(dets[k]))
    used = {img: np.zeros(len(b), dtype=bool) for img, b in gts.items()}
    tp = np.zeros(len(dets), dtype=bool)
    for rank, k in enumerate(order):
        img, box, _ = dets[k]
        g = gts.get(img)
        if g is None or len(g) == 0:
            continue
        ious = geometry.box_iou(torch.as_tensor(box, dtype=torch.float64)[None],
                                torch.as_tensor(g, dtype=torch.float64))[0].numpy()
        ious[used[img]] = -1.0
        best = int(np.argmax(ious))
        if ious[best] >= iou_threshold:
            used[img][best] = True
            tp[rank] = True
    return tp


def class_curve(dets, gts, iou_threshold: float) -> ClassCurve:
    num_gt = int(sum(len(b) for b in gts.values()))
    tp = match_detections(dets, gts, iou_threshold)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    precision = ctp / np.maximum(ctp + cfp, 1)
    recall = ctp / num_gt if num_gt else np.zeros_like(ctp, dtype=float)
    return ClassCurve(precision=precision, recall=recall, num_gt=num_gt)


def evaluate(detections: Mapping[object, Sequence[Detection]], manifest: DatasetManifest,
             thresholds: Sequence[float] = COCO_THRESHOLDS, eleven_point: bool = False) -> EvalReport:
    """Per-class AP and mAP at IoU 0.5 and averaged over ``thresholds``.

    Classes without ground truth are left out of the means.  Only fully
    annotated records are scored.
    """
    C = manifest.num_classes
    gts: list[dict] = [dict() for _ in range(C)]
    n_gt = 0
    records = [r for r in manifest.records if r.is_full]
    for r in records:
        for c in range(1, C + 1):
            gts[c - 1][r.id] = r.boxes[r.box_labels == c]
        n_gt += len(r.boxes)
    per_class: list[list] = [[] for _ in range(C)]
    n_det = 0
    ids = {r.id for r in records}
    for img, dets in detections.items():
        if img not in ids:
            continue
        for d in dets:
            if not 1 <= d.label <= C:
                raise ValueError(f"detection class {d.label} outside 1..{C}")
            per_class[d.label - 1].append((img, np.asarray(d.box.as_list()), d.score))
            n_det += 1

    ap50, ap, curves = {}, {}, {}
    scored = []
    for c, name in enumerate(manifest.categories):
        num_gt = sum(len(b) for b in gts[c].values())
        if num_gt == 0:
            continue
        scored.append(name)
        curves[name] = class_curve(per_class[c], gts[c], 0.5)
        ap50[name] = average_precision(curves[name].recall, curves[name].precision, eleven_point)
        per_thr = []
        for thr in thresholds:
            curve = class_curve(per_class[c], gts[c], thr)
            per_thr.append(average_precision(curve.recall, curve.precision, eleven_point))
        ap[name] = float(np.mean(per_thr))
    return EvalReport(
        categories=list(manifest.categories),
        ap50=ap50,
        ap=ap,
        map50=float(np.mean([ap50[n] for n in scored])) if scored else 0.0,
        map_coco=float(np.mean([ap[n] for n in scored])) if scored else 0.0,
        counts={"images": len(records), "ground_truth": n_gt, "detections": n_det},
        curves=curves,
    )
