"""Backbone, loss routing, training, inference and evaluation."""

from .backbone import Backbone, backbone_forward
from .evaluation import EvalReport, evaluate
from .model import (EHSOD, Batch, Detection, combine_losses, image_losses, infer, infer_batch,
                    infer_records, make_batch, normalize_image, total_loss)
from .training import (TrainingDiverged, TrainResult, build_model, load_checkpoint,
                       save_checkpoint, train)

__all__ = [
    "Backbone", "backbone_forward", "EvalReport", "evaluate", "EHSOD", "Batch", "Detection",
    "combine_losses", "image_losses", "infer", "infer_batch", "infer_records", "make_batch",
    "normalize_image", "total_loss", "TrainingDiverged", "TrainResult", "build_model",
    "load_checkpoint", "save_checkpoint", "train",
]
