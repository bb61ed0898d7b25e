from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .evaluate import MetricsReport, evaluate
from .train import TrainConfig, TrainingError, lr_at, train

__all__ = [
    "Checkpoint",
    "CheckpointError",
    "MetricsReport",
    "TrainConfig",
    "TrainingError",
    "evaluate",
    "load_checkpoint",
    "lr_at",
    "save_checkpoint",
    "train",
]
