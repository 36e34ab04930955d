"""One-shot SGD training over mixed full/weak batches, plus checkpoints."""

from __future__ import annotations

import json
import logging
import os
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from ..config import RunConfig
from ..data import DatasetManifest, iter_batches
from .model import EHSOD, make_batch, total_loss

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "ehsod-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


def build_model(config: RunConfig) -> EHSOD:
    seed_everything(config.train.seed)
    model = EHSOD(config)
    if config.model.pretrained:
        state = torch.load(config.model.pretrained, map_location="cpu", weights_only=True)
        model.backbone.load_state_dict(state)
    return model


def save_checkpoint(path: str | os.PathLike, model: EHSOD, categories: list[str],
                    epoch: int) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "categories": list(categories),
        "epoch": epoch,
        "state_dict": model.state_dict(),
    }, path)


def load_checkpoint(path: str | os.PathLike) -> tuple[EHSOD, list[str], int]:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a detector checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {blob.get('version')}")
    config = RunConfig.from_dict(blob["config"])
    model = EHSOD(config)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, blob["categories"], blob["epoch"]


def learning_rate(config: RunConfig, epoch: int, iteration: int) -> float:
    t = config.train
    lr = t.lr * t.lr_factor ** sum(epoch >= s for s in t.lr_steps)
    if iteration < t.warmup_iters:
        alpha = iteration / t.warmup_iters
        lr *= t.warmup_ratio * (1 - alpha) + alpha
    return lr


@dataclass
class TrainResult:
    model: EHSOD
    history: list[dict] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)

    def epoch_losses(self) -> list[float]:
        """Mean total loss per epoch (0-based epochs in order)."""
        by_epoch: dict[int, list[float]] = {}
        for row in self.history:
            by_epoch.setdefault(row["epoch"], []).append(row["total"])
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


def train(manifest: DatasetManifest, config: RunConfig, output_dir: str | os.PathLike | None = None,
          on_iteration: Callable[[dict], None] | None = None) -> TrainResult:
    """Train from scratch on all records of ``manifest`` in one pass of SGD.

    Full and weak records share batches; each image contributes the loss
    terms its supervision allows.  With ``output_dir`` a metrics log
    (``metrics.jsonl``), periodic checkpoints and the resolved config are
    written there.
    """
    t = config.train
    model = build_model(config)
    generator = torch.Generator().manual_seed(t.seed)
    optimizer = torch.optim.SGD(model.parameters(), lr=t.lr, momentum=t.momentum,
                                weight_decay=t.weight_decay)
    out = Path(output_dir) if output_dir is not None else None
    metrics = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        config.save(out / "config.yaml")
        metrics = open(out / "metrics.jsonl", "w", encoding="utf-8")
    result = TrainResult(model=model)

    def checkpoint(epoch: int) -> None:
        if out is not None:
            path = out / f"checkpoint_epoch{epoch}.pt"
            save_checkpoint(path, model, manifest.categories, epoch)
            save_checkpoint(out / "checkpoint.pt", model, manifest.categories, epoch)
            result.checkpoints.append(str(path))

    records = manifest.records
    pixels = {r.id: manifest.image(r) for r in records}
    iteration = 0
    initial = None
    try:
        if t.epochs == 0:
            checkpoint(0)
        for epoch in range(t.epochs):
            flip_rng = np.random.default_rng([t.seed, epoch, 1])
            for batch_records in iter_batches(records, t.batch_size, t.seed, epoch):
                model.train()
                flips = flip_rng.random(len(batch_records)) < 0.5 if t.hflip else None
                batch = make_batch(batch_records, [pixels[r.id] for r in batch_records],
                                   model.num_classes, flips)
                lr = learning_rate(config, epoch, iteration)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                loss, breakdown = total_loss(batch, model, config, generator)
                if initial is None:
                    initial = max(breakdown["total"], 1e-12)
                elif breakdown["total"] > t.divergence_factor * initial:
                    raise TrainingDiverged(
                        f"loss {breakdown['total']:.4g} exceeds {t.divergence_factor:g}x the "
                        f"initial loss {initial:.4g} at iteration {iteration}: {breakdown}")
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                max_norm = t.grad_clip if t.grad_clip else float("inf")
                grad_norm = torch.nn.utils.clip_grad_norm_(model.parameters(), max_norm)
                optimizer.step()
                row = {"iter": iteration, "epoch": epoch, "lr": lr, **breakdown,
                       "grad_norm": float(grad_norm)}
                result.history.append(row)
                if metrics is not None:
                    metrics.write(json.dumps(row) + "\n")
                if on_iteration is not None:
                    on_iteration(row)
                iteration += 1
            log.info("epoch %d: mean loss %.4f", epoch + 1,
                     np.mean([r["total"] for r in result.history if r["epoch"] == epoch]))
            if (epoch + 1) % t.checkpoint_every == 0 or epoch + 1 == t.epochs:
                checkpoint(epoch + 1)
    finally:
        if metrics is not None:
            metrics.close()
    model.eval()
    return result
