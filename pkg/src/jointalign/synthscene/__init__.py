"""Procedural scenes: models, sampling, rasterization, noise, detection, IO."""

from .channels import DetectConfig, Detection, NoiseConfig, detect_objects, perturb_channels
from .io import (
    dataset_paths,
    load_channels,
    load_scene,
    save_channels,
    save_scene,
    scene_from_json,
    scene_to_json,
)
from .models import (
    CATEGORIES,
    CATEGORY_SYMMETRY,
    CadModel,
    ConstructionError,
    make_primitive_model,
    sample_shape_params,
    sample_surface,
)
from .raster import ChannelMaps, bearing_grid, rasterize, transform_normals
from .scene import (
    DESK_CATEGORIES,
    Scene,
    SceneConfig,
    SceneGenerationError,
    SceneObject,
    sample_object_scale,
    sample_scene,
)

__all__ = [
    "CadModel", "ConstructionError", "make_primitive_model", "CATEGORIES",
    "CATEGORY_SYMMETRY", "sample_shape_params", "sample_surface",
    "ChannelMaps", "rasterize", "transform_normals", "bearing_grid",
    "Scene", "SceneObject", "SceneConfig", "SceneGenerationError",
    "sample_scene", "sample_object_scale", "DESK_CATEGORIES",
    "NoiseConfig", "DetectConfig", "Detection", "perturb_channels",
    "detect_objects", "save_channels", "load_channels", "save_scene",
    "load_scene", "scene_to_json", "scene_from_json", "dataset_paths",
]
