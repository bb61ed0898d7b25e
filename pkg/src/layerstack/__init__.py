"""Text-guided multi-layered composable image synthesis at desk scale."""
from .layerspace import (
    CompositeImage,
    ForegroundLayer,
    LayerMask,
    LayerSet,
    LayerValidationError,
    background_from_foregrounds,
    binarize_masks,
    composite,
    dilate_mask,
    validate,
)
from .schedule import NoiseSchedule, build_schedule, ddim_step, draw_timesteps, predict_x0, q_sample

__version__ = "0.1.0"
