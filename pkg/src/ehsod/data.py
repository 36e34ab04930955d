"""Datasets with mixed box-level and image-level supervision.

The native interchange format is a UTF-8 JSON manifest::

    {
      "categories": [{"id": 1, "name": "circle"}, ...],
      "images": [
        {"id": 0, "file": "images/000000.png", "width": 64, "height": 64,
         "supervision": "full", "labels": [1, 3], "boxes": [[x1, y1, x2, y2], ...]},
        {"id": 1, ..., "supervision": "weak", "labels": [2], "boxes": []}
      ],
      "split": {"fraction": 0.3, "seed": 0}
    }

For ``full`` images ``labels`` is aligned with ``boxes`` (one class per box);
for ``weak`` images it is the image-level label set and ``boxes`` is empty.
"""

from __future__ import annotations

import json
import logging
import math
import os
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
from PIL import Image, ImageDraw

from . import geometry

log = logging.getLogger(__name__)

FULL = "full"
WEAK = "weak"

VOC_CLASSES = (
    "aeroplane", "bicycle", "bird", "boat", "bottle", "bus", "car", "cat", "chair", "cow",
    "diningtable", "dog", "horse", "motorbike", "person", "pottedplant", "sheep", "sofa",
    "train", "tvmonitor",
)
SHAPE_CLASSES = ("circle", "square", "triangle")


class DatasetError(ValueError):
    pass


@dataclass
class ImageRecord:
    """One image and its annotation.

    Weak records keep their source boxes privately so that the same records
    can be re-split, but :attr:`boxes` and :attr:`box_labels` return ``None``.
    """
    id: int | str
    width: int
    height: int
    supervision: str = FULL
    file: str | None = None
    image: np.ndarray | None = field(default=None, repr=False)
    _boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)), repr=False)
    _box_labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64),
                                    repr=False)
    _image_labels: tuple[int, ...] | None = None

    @property
    def is_full(self) -> bool:
        return self.supervision == FULL

    @property
    def boxes(self) -> np.ndarray | None:
        return self._boxes.copy() if self.is_full else None

    @property
    def box_labels(self) -> np.ndarray | None:
        return self._box_labels.copy() if self.is_full else None

    @property
    def image_labels(self) -> tuple[int, ...]:
        if self._image_labels is not None and not self.is_full:
            return self._image_labels
        return tuple(sorted(set(int(c) for c in self._box_labels)))

    def label_vector(self, num_classes: int) -> np.ndarray:
        y = np.zeros(num_classes, dtype=np.float32)
        for c in self.image_labels:
            y[c - 1] = 1
        return y

    def with_supervision(self, kind: str) -> "ImageRecord":
        return replace(self, supervision=kind)

    def load_image(self, root: str | os.PathLike | None = None) -> np.ndarray:
        """``(H, W, 3)`` uint8 pixels, read from disk if not held in memory."""
        if self.image is not None:
            return self.image
        if self.file is None:
            raise DatasetError(f"image {self.id} has neither pixels nor a file")
        path = Path(self.file)
        if root is not None and not path.is_absolute():
            path = Path(root) / path
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))


@dataclass
class DatasetManifest:
    categories: list[str]
    records: list[ImageRecord]
    root: str | None = None
    split: dict[str, Any] | None = None
    rejected: list[tuple[Any, str]] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return len(self.categories)

    def __len__(self) -> int:
        return len(self.records)

    def subset(self, kind: str) -> "DatasetManifest":
        return replace(self, records=[r for r in self.records if r.supervision == kind],
                       rejected=[])

    def image(self, record: ImageRecord) -> np.ndarray:
        return record.load_image(self.root)

    def to_json(self) -> dict[str, Any]:
        images = []
        for r in self.records:
            entry = {"id": r.id, "file": r.file, "width": r.width, "height": r.height,
                     "supervision": r.supervision}
            if r.is_full:
                entry["labels"] = [int(c) for c in r.box_labels]
                entry["boxes"] = [[float(v) for v in b] for b in r.boxes]
            else:
                entry["labels"] = list(r.image_labels)
                entry["boxes"] = []
            images.append(entry)
        out = {"categories": [{"id": i + 1, "name": n} for i, n in enumerate(self.categories)],
               "images": images}
        if self.split is not None:
            out["split"] = self.split
        return out

    def save(self, path: str | os.PathLike) -> None:
        """Write the native JSON manifest; in-memory pixels are written as PNGs."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        for r in self.records:
            if r.file is None and r.image is not None:
                r.file = f"images/{r.id}.png"
            if r.image is not None:
                target = path.parent / r.file
                target.parent.mkdir(parents=True, exist_ok=True)
                Image.fromarray(r.image).save(target)
        path.write_text(json.dumps(self.to_json(), indent=1), encoding="utf-8")


def _check_category(label: int, num_classes: int, image_id) -> None:
    if not 1 <= label <= num_classes:
        raise DatasetError(f"image {image_id}: class {label} not in category list")


def _valid_box(box: Sequence[float]) -> bool:
    return (len(box) == 4 and all(math.isfinite(v) for v in box)
            and box[2] > box[0] and box[3] > box[1])


def _load_native(path: Path) -> DatasetManifest:
    raw = json.loads(path.read_text(encoding="utf-8"))
    try:
        cats = sorted(raw["categories"], key=lambda c: c["id"])
        names = [c["name"] for c in cats]
        if [c["id"] for c in cats] != list(range(1, len(cats) + 1)):
            raise DatasetError("category ids must be dense 1..C")
        records, rejected, seen = [], [], set()
        for entry in raw["images"]:
            image_id = entry["id"]
            if image_id in seen:
                raise DatasetError(f"duplicate image id {image_id}")
            seen.add(image_id)
            kind = entry.get("supervision", FULL)
            if kind not in (FULL, WEAK):
                raise DatasetError(f"image {image_id}: unknown supervision {kind!r}")
            labels = [int(c) for c in entry.get("labels", [])]
            for c in labels:
                _check_category(c, len(names), image_id)
            boxes = entry.get("boxes", [])
            base = dict(id=image_id, width=int(entry["width"]), height=int(entry["height"]),
                        supervision=kind, file=entry.get("file"))
            if kind == FULL:
                if len(boxes) != len(labels):
                    rejected.append((image_id, "labels and boxes differ in length"))
                    continue
                if not all(_valid_box(b) for b in boxes):
                    rejected.append((image_id, "box with non-positive size"))
                    continue
                records.append(ImageRecord(
                    **base,
                    _boxes=np.asarray(boxes, dtype=np.float64).reshape(-1, 4),
                    _box_labels=np.asarray(labels, dtype=np.int64)))
            else:
                if not labels:
                    rejected.append((image_id, "weak image without labels"))
                    continue
                records.append(ImageRecord(**base, _image_labels=tuple(sorted(set(labels)))))
    except KeyError as exc:
        raise DatasetError(f"{path}: missing key {exc}") from None
    return DatasetManifest(categories=names, records=records, root=str(path.parent),
                           split=raw.get("split"), rejected=rejected)


def _load_coco(path: Path) -> DatasetManifest:
    raw = json.loads(path.read_text(encoding="utf-8"))
    try:
        cats = sorted(raw["categories"], key=lambda c: c["id"])
        dense = {c["id"]: i + 1 for i, c in enumerate(cats)}
        per_image: dict[Any, list] = {img["id"]: [] for img in raw["images"]}
        bad: dict[Any, str] = {}
        for ann in raw.get("annotations", []):
            if ann.get("iscrowd", 0):
                continue
            if ann["category_id"] not in dense:
                raise DatasetError(f"image {ann['image_id']}: category "
                                   f"{ann['category_id']} not in category list")
            x, y, w, h = ann["bbox"]
            if w <= 0 or h <= 0:
                bad[ann["image_id"]] = "box with non-positive size"
                continue
            per_image.setdefault(ann["image_id"], []).append(
                ([x, y, x + w, y + h], dense[ann["category_id"]]))
        records, rejected = [], []
        for img in raw["images"]:
            if img["id"] in bad:
                rejected.append((img["id"], bad[img["id"]]))
                continue
            anns = per_image.get(img["id"], [])
            records.append(ImageRecord(
                id=img["id"], width=int(img["width"]), height=int(img["height"]),
                file=img.get("file_name"),
                _boxes=np.asarray([a[0] for a in anns], dtype=np.float64).reshape(-1, 4),
                _box_labels=np.asarray([a[1] for a in anns], dtype=np.int64)))
    except KeyError as exc:
        raise DatasetError(f"{path}: missing key {exc}") from None
    return DatasetManifest(categories=[c["name"] for c in cats], records=records,
                           root=str(path.parent), rejected=rejected)


def _load_voc(path: Path, categories: Sequence[str]) -> DatasetManifest:
    index = {name: i + 1 for i, name in enumerate(categories)}
    files = sorted(path.glob("*.xml")) if path.is_dir() else [path]
    if path.is_dir() and (path / "Annotations").is_dir():
        files = sorted((path / "Annotations").glob("*.xml"))
    records, rejected = [], []
    for f in files:
        root = ET.parse(f).getroot()
        image_id = root.findtext("filename") or f.stem
        size = root.find("size")
        if size is None:
            raise DatasetError(f"{f}: missing <size>")
        boxes, labels, problem = [], [], None
        for obj in root.iter("object"):
            name = obj.findtext("name", "").strip()
            if name not in index:
                raise DatasetError(f"{f}: class {name!r} not in category list")
            bb = obj.find("bndbox")
            if bb is None:
                raise DatasetError(f"{f}: object without <bndbox>")
            # VOC coordinates are 1-based inclusive pixel indices.
            box = [float(bb.findtext(k)) for k in ("xmin", "ymin", "xmax", "ymax")]
            box = [box[0] - 1, box[1] - 1, box[2], box[3]]
            if not _valid_box(box):
                problem = "box with non-positive size"
            boxes.append(box)
            labels.append(index[name])
        if problem:
            rejected.append((image_id, problem))
            continue
        image_dir = f.parent.parent / "JPEGImages" if f.parent.name == "Annotations" else f.parent
        records.append(ImageRecord(
            id=image_id, width=int(size.findtext("width")), height=int(size.findtext("height")),
            file=str(image_dir / (root.findtext("filename") or f"{f.stem}.jpg")),
            _boxes=np.asarray(boxes, dtype=np.float64).reshape(-1, 4),
            _box_labels=np.asarray(labels, dtype=np.int64)))
    return DatasetManifest(categories=list(categories), records=records,
                           root=str(path if path.is_dir() else path.parent), rejected=rejected)


def load_dataset(path: str | os.PathLike, format: str = "native-json",
                 categories: Sequence[str] | None = None) -> DatasetManifest:
    """Read a dataset into a normalized manifest (corner-form boxes).

    Records with invalid boxes are dropped and listed in ``rejected``.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    if format == "native-json":
        manifest = _load_native(path)
    elif format == "coco-json":
        manifest = _load_coco(path)
    elif format == "voc-xml":
        manifest = _load_voc(path, categories or VOC_CLASSES)
    else:
        raise DatasetError(f"unknown dataset format {format!r}")
    for image_id, reason in manifest.rejected:
        log.warning("rejected image %s: %s", image_id, reason)
    return manifest


def full_count(n: int, fraction: float) -> int:
    """``round(fraction * n)`` (half rounds up), at least one when fraction > 0."""
    k = int(math.floor(fraction * n + 0.5))
    if fraction > 0 and n > 0:
        k = max(k, 1)
    return min(k, n)


def hybrid_split(manifest: DatasetManifest, fraction: float, seed: int) -> DatasetManifest:
    """Mark a seeded random ``fraction`` of records fully supervised, the rest weak."""
    if not 0.0 <= fraction <= 1.0:
        raise DatasetError(f"fraction must be in [0, 1], got {fraction}")
    n = len(manifest.records)
    k = full_count(n, fraction)
    order = np.random.default_rng(seed).permutation(n)
    full = set(order[:k].tolist())
    records = []
    for i, r in enumerate(manifest.records):
        if i in full:
            records.append(r.with_supervision(FULL))
        else:
            records.append(replace(r, supervision=WEAK, _image_labels=r.image_labels))
    return replace(manifest, records=records, split={"fraction": fraction, "seed": seed},
                   rejected=[])


@dataclass
class SyntheticConfig:
    n_images: int = 200
    image_size: int = 64
    min_objects: int = 1
    max_objects: int = 3
    min_size: int = 12
    max_size: int = 28
    noise: float = 0.08
    max_overlap: float = 0.7
    max_retries: int = 20
    seed: int = 0
    id_offset: int = 0


def render_shape(kind: str, box: Sequence[int], size: int) -> np.ndarray:
    """Boolean mask of one filled shape inscribed in integer ``box``."""
    x1, y1, x2, y2 = box
    mask = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(mask)
    if kind == "square":
        draw.rectangle([x1, y1, x2 - 1, y2 - 1], fill=255)
    elif kind == "circle":
        draw.ellipse([x1, y1, x2 - 1, y2 - 1], fill=255)
    elif kind == "triangle":
        draw.polygon([((x1 + x2 - 1) / 2, y1), (x1, y2 - 1), (x2 - 1, y2 - 1)], fill=255)
    else:
        raise ValueError(f"unknown shape {kind!r}")
    return np.asarray(mask) > 0


def mask_extent(mask: np.ndarray) -> list[float]:
    """Tight corner box ``[x1, y1, x2, y2)`` of the set pixels."""
    ys, xs = np.nonzero(mask)
    return [float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1)]


def generate_synthetic(config: SyntheticConfig | None = None, **kwargs) -> DatasetManifest:
    """Render images of coloured circles, squares and triangles on noise.

    Boxes are the exact pixel extent of each rendered shape.  A placement that
    overlaps an earlier object by more than ``max_overlap`` IoU is redrawn up
    to ``max_retries`` times and then skipped.
    """
    cfg = replace(config or SyntheticConfig(), **kwargs)
    if cfg.image_size < 32:
        raise DatasetError("synthetic images must be at least 32 pixels")
    rng = np.random.default_rng(cfg.seed)
    size = cfg.image_size
    records = []
    for n in range(cfg.n_images):
        background = rng.uniform(0.25, 0.75, size=3)
        img = np.tile(background, (size, size, 1))
        boxes, labels = [], []
        for _ in range(int(rng.integers(cfg.min_objects, cfg.max_objects + 1))):
            for _attempt in range(cfg.max_retries):
                cls = int(rng.integers(len(SHAPE_CLASSES)))
                w = int(rng.integers(cfg.min_size, cfg.max_size + 1))
                h = w if cls != 2 else int(rng.integers(cfg.min_size, cfg.max_size + 1))
                x1 = int(rng.integers(0, size - w + 1))
                y1 = int(rng.integers(0, size - h + 1))
                mask = render_shape(SHAPE_CLASSES[cls], (x1, y1, x1 + w, y1 + h), size)
                box = mask_extent(mask)
                if all(geometry.iou(geometry.Box(*box), geometry.Box(*b)) <= cfg.max_overlap
                       for b in boxes):
                    break
            else:
                continue
            # Colour differs from the background by at least 0.3 in some channel.
            color = rng.uniform(0, 1, size=3)
            while np.abs(color - background).max() < 0.3:
                color = rng.uniform(0, 1, size=3)
            img[mask] = color
            boxes.append(box)
            labels.append(cls + 1)
        img = img + rng.normal(0, cfg.noise, size=img.shape)
        pixels = (np.clip(img, 0, 1) * 255).round().astype(np.uint8)
        records.append(ImageRecord(
            id=cfg.id_offset + n, width=size, height=size, image=pixels,
            _boxes=np.asarray(boxes, dtype=np.float64).reshape(-1, 4),
            _box_labels=np.asarray(labels, dtype=np.int64)))
    return DatasetManifest(categories=list(SHAPE_CLASSES), records=records)


def iter_batches(records: Sequence[ImageRecord], batch_size: int, seed: int, epoch: int,
                 shuffle: bool = True) -> Iterable[list[ImageRecord]]:
    """Deterministic mini-batches; order depends only on ``(seed, epoch)``."""
    order = np.arange(len(records))
    if shuffle:
        order = np.random.default_rng([seed, epoch]).permutation(len(records))
    for start in range(0, len(order), batch_size):
        yield [records[i] for i in order[start:start + batch_size]]
