"""Polynomial residual blocks for multigrid-inspired ResNets."""
from .blocks import PlacementSpec, SiteSpec, block_weight_count
from .network import ArchConfig, build_model, count_weights, init_coefficients, scale_channels
from .spectral import RootKind, RootSet, SpectrumEstimate, estimate_spectrum, select_initial_roots

__all__ = [
    "ArchConfig",
    "PlacementSpec",
    "RootKind",
    "RootSet",
    "SiteSpec",
    "SpectrumEstimate",
    "block_weight_count",
    "build_model",
    "count_weights",
    "estimate_spectrum",
    "init_coefficients",
    "scale_channels",
    "select_initial_roots",
]

__version__ = "0.1.0"
