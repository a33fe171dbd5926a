"""Roto-reflection equivariant semantic segmentation (p1 / p4 / p4m GU-Nets) in numpy."""
from .groups import P1, P4, P4M, GroupElement, GroupSpec, get_group
from .model import ArchitectureConfig, GUNet, build, count_parameters, load_model, matched_width, save_model

__all__ = [
    "P1", "P4", "P4M", "GroupElement", "GroupSpec", "get_group",
    "ArchitectureConfig", "GUNet", "build", "count_parameters", "load_model", "matched_width", "save_model",
]
__version__ = "0.1.0"
