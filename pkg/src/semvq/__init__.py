"""Semantic masked vector-quantization codec for images and their label maps."""

from .bitstream import bpp_total, deserialize, rate_upper_bound, serialize
from .networks import Codec, ModelConfig, desk_config
from .semantic_map import ClassTable, cityscapes_table, compute_miou

__version__ = "0.1.0"

__all__ = [
    "ClassTable",
    "Codec",
    "ModelConfig",
    "bpp_total",
    "cityscapes_table",
    "compute_miou",
    "deserialize",
    "desk_config",
    "rate_upper_bound",
    "serialize",
]
