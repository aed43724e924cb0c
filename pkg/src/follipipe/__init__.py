"""follipipe: classification-gated follicular segmentation at desk scale."""

__version__ = "0.1.0"

from .losses import Criterion, LossReport, adaptive_loss, criterion_value
from .model import HybridModel, ModelConfig, init_weights, load_checkpoint, save_checkpoint
from .pipeline import TrainConfig, evaluate, infer_wsi, synth_dataset, train
from .slides import PatchCoord, PatchLabel, SlideParams, synth_slide, tile_grid

__all__ = [
    "Criterion", "LossReport", "adaptive_loss", "criterion_value",
    "HybridModel", "ModelConfig", "init_weights", "load_checkpoint", "save_checkpoint",
    "TrainConfig", "evaluate", "infer_wsi", "synth_dataset", "train",
    "PatchCoord", "PatchLabel", "SlideParams", "synth_slide", "tile_grid",
]
