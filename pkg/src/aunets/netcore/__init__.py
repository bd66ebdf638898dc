"""Minimal numpy network kernel shared by every detector architecture."""

from .arch import (
    Arch,
    FusionMode,
    Profile,
    TINY,
    TwoStreamGraph,
    VGG16,
    backward,
    build,
    describe,
    forward,
    get_profile,
    make_net,
    param_count,
    param_table,
)
from .checkpoint import file_hash, from_bytes, load, save, to_bytes
from .graph import Kind, LayerGraph, LayerSpec
from .optim import adam_init, adam_step, copy_state
from .surgery import Transplant, adapt_head, from_rgb, tile_fc, transplant

__all__ = [
    "Arch", "FusionMode", "Kind", "LayerGraph", "LayerSpec", "Profile", "TINY", "Transplant",
    "TwoStreamGraph", "VGG16", "adam_init", "adam_step", "adapt_head", "backward", "build",
    "copy_state", "describe", "file_hash", "forward", "from_bytes", "from_rgb", "get_profile",
    "load", "make_net", "param_count", "param_table", "save", "tile_fc", "to_bytes", "transplant",
]
