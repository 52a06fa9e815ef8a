"""Group Shift pointwise-convolution networks for volumetric segmentation."""

__version__ = "0.1.0"

from .errors import BoundsError, ConfigError, FormatError, GSConvError, ShapeError, StateError
from .group_shift import (
    GroupShiftConfig,
    PermutationTable,
    apply_group_shift_naive,
    apply_permutation,
    build_permutation,
    group_shift_backward,
    invert_permutation,
    map_coordinate,
)
from .network import Insert, NetworkSpec, Placement, build_network, make_spec, preset_spatial_groups

__all__ = [
    "BoundsError",
    "ConfigError",
    "FormatError",
    "GSConvError",
    "ShapeError",
    "StateError",
    "GroupShiftConfig",
    "PermutationTable",
    "apply_group_shift_naive",
    "apply_permutation",
    "build_permutation",
    "group_shift_backward",
    "invert_permutation",
    "map_coordinate",
    "Insert",
    "NetworkSpec",
    "Placement",
    "build_network",
    "make_spec",
    "preset_spatial_groups",
]
