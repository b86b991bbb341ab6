"""Perspective-warped multi-hash radiance fields for unbounded scenes with free camera paths."""

import numba as _numba

try:
    # TBB in this environment is too old for numba; prefer OpenMP, then the built-in pool
    _numba.config.THREADING_LAYER = "omp"
except Exception:  # pragma: no cover
    pass

from .geometry import Aabb, Camera, GeometryError, Ray, project, project_jacobian  # noqa: E402
from .subdivision import Octree, build_octree, locate_leaf  # noqa: E402
from .warp import WarpDegenerateError, WarpFunction, WarpTable, build_warps, construct_warp  # noqa: E402
from .sampling import Sampler, march_ray  # noqa: E402
from .field import FieldConfig, GridConfig, NodeHashParams, RadianceField, hash_vertex, sh_encode  # noqa: E402
from .renderer import LossWeights, Model, ModelConfig, TrainConfig, Trainer, composite, render_image  # noqa: E402
from .scenes import SphereScene, make_preset, oracle_render, psnr, read_dataset, write_dataset  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "Aabb", "Camera", "GeometryError", "Ray", "project", "project_jacobian",
    "Octree", "build_octree", "locate_leaf",
    "WarpDegenerateError", "WarpFunction", "WarpTable", "build_warps", "construct_warp",
    "Sampler", "march_ray",
    "FieldConfig", "GridConfig", "NodeHashParams", "RadianceField", "hash_vertex", "sh_encode",
    "LossWeights", "Model", "ModelConfig", "TrainConfig", "Trainer", "composite", "render_image",
    "SphereScene", "make_preset", "oracle_render", "psnr", "read_dataset", "write_dataset",
]
