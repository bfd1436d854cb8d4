"""Top-down, bottom-up, fusing-splitting and mixture feature pyramids on a
small reverse-mode autodiff engine."""

from .pyramids import (
    KINDS,
    BackboneFeatures,
    FpnConfig,
    PyramidSet,
    apply_laterals,
    build,
    build_bottom_up,
    build_fpn,
    build_fusing_splitting,
    build_mfpn,
    build_top_down,
)
from .tensor import Graph, GraphError, Parameter, Tensor, backward
from .weights import WeightStore, load_weights, save_weights

__version__ = "0.1.0"
