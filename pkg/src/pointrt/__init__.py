"""Point-cloud radio propagation with learnable materials."""

import os as _os

if "NUMBA_THREADING_LAYER" not in _os.environ:
    import numba as _numba

    # the TBB layer warns on version mismatches and is not needed here
    _numba.config.THREADING_LAYER = "workqueue"

from .scene import MaterialParams, Scene, SceneError, build_scene, load_scene, save_scene, validate_scene  # noqa: E402
from .grid import build_accel, build_grid  # noqa: E402
from .isect import IntersectionConfig, cast_ray, intersect_dps, test_visibility  # noqa: E402
from .vis import VisibilityMatrix, build_visibility  # noqa: E402
from .paths import Interaction, InteractionKind, PathSet, PropagationPath  # noqa: E402

__all__ = [
    "MaterialParams", "Scene", "SceneError", "build_scene", "load_scene", "save_scene", "validate_scene",
    "build_accel", "build_grid", "IntersectionConfig", "cast_ray", "intersect_dps", "test_visibility",
    "VisibilityMatrix", "build_visibility", "Interaction", "InteractionKind", "PathSet", "PropagationPath",
]
__version__ = "0.1.0"
