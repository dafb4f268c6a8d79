"""Pooling-transformer single-image dehazing with adversarial distillation training."""

from .generator import DehazeGenerator, GeneratorConfig, build_generator, generate
from .priors import HazeMap, dark_channel, extract_haze_map, make_loss_weight, smooth_map
from .ptb import PoolingTransformerBlock, ptb_forward, ptb_init

__version__ = "0.1.0"

__all__ = [
    "DehazeGenerator",
    "GeneratorConfig",
    "HazeMap",
    "PoolingTransformerBlock",
    "build_generator",
    "dark_channel",
    "extract_haze_map",
    "generate",
    "make_loss_weight",
    "ptb_forward",
    "ptb_init",
    "smooth_map",
]
