"""Random scene sampling: objects, poses and the camera."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..geometry import (
    Camera,
    Pose,
    UPRIGHT_QUAT,
    object_offset_quat,
    pixel_bearing,
    pose_from_translation,
    quat_multiply,
)
from .models import CadModel, CATEGORY_SYMMETRY, make_primitive_model

DESK_CATEGORIES = ("box-chair", "cylinder-table", "l-sofa", "slab-display")

# categories whose symmetry tag is only geometrically true with sx == sy
_TIED_XY = {"cylinder-table", "box-stool"}


class SceneGenerationError(RuntimeError):
    """Rejection sampling could not place the requested objects."""


@dataclass
class SceneConfig:
    """Ranges driving random scene generation."""

    image_width: int = 128
    image_height: int = 96
    focal: float = 110.0
    count_range: tuple = (1, 3)
    categories: tuple = DESK_CATEGORIES
    depth_range: tuple = (1.7, 3.6)       # object center z in meters
    margin_frac: float = 0.17             # keep centers away from image border
    tilt_range_deg: float = 8.0
    elev_range_deg: float = 8.0
    scale_range: tuple = (0.75, 1.35)     # per-axis, per-category override below
    scale_ranges: dict = field(default_factory=dict)
    min_separation: float = 0.7           # meters between object centers
    model_samples: int = 512
    max_attempts: int = 200

    def camera(self) -> Camera:
        return Camera(fx=self.focal, fy=self.focal,
                      cx=(self.image_width - 1) / 2.0,
                      cy=(self.image_height - 1) / 2.0,
                      width=self.image_width, height=self.image_height)

    def category_scale_range(self, category: str) -> tuple:
        return tuple(self.scale_ranges.get(category, self.scale_range))


@dataclass
class SceneObject:
    model: CadModel
    pose: Pose
    category: str


@dataclass
class Scene:
    camera: Camera
    objects: list
    seed: int


def sample_object_scale(category: str, rng: np.random.Generator,
                        cfg: SceneConfig) -> np.ndarray:
    lo, hi = cfg.category_scale_range(category)
    s = rng.uniform(lo, hi, size=3)
    if category in _TIED_XY:
        s[1] = s[0]
    return s


def sample_scene(cfg: SceneConfig, seed: int) -> Scene:
    """Deterministically sample a scene; centers always project in-image."""
    rng = np.random.default_rng(np.random.SeedSequence([0x5CE4E, seed]))
    camera = cfg.camera()
    n = int(rng.integers(cfg.count_range[0], cfg.count_range[1] + 1))

    mx = cfg.margin_frac * cfg.image_width
    my = cfg.margin_frac * cfg.image_height
    objects, centers = [], []
    for _ in range(n):
        category = str(rng.choice(list(cfg.categories)))
        model = make_primitive_model(category, None,
                                     seed=int(rng.integers(2**31)),
                                     n_samples=cfg.model_samples)
        for attempt in range(cfg.max_attempts + 1):
            if attempt == cfg.max_attempts:
                raise SceneGenerationError(
                    f"could not separate {n} objects after {attempt} attempts")
            u = rng.uniform(mx, cfg.image_width - 1 - mx)
            v = rng.uniform(my, cfg.image_height - 1 - my)
            z = rng.uniform(*cfg.depth_range)
            bearing = pixel_bearing(camera, u, v)
            center = bearing * (z / bearing[2])
            if all(np.linalg.norm(center - c) >= cfg.min_separation
                   for c in centers):
                break
        centers.append(center)

        azim = rng.uniform(-math.pi, math.pi)
        tilt = math.radians(rng.uniform(-cfg.tilt_range_deg, cfg.tilt_range_deg))
        elev = math.radians(rng.uniform(-cfg.elev_range_deg, cfg.elev_range_deg))
        q = quat_multiply(UPRIGHT_QUAT, object_offset_quat(tilt, azim, elev))
        s = sample_object_scale(category, rng, cfg)
        objects.append(SceneObject(model=model,
                                   pose=pose_from_translation(center, q, s),
                                   category=category))

    return Scene(camera=camera, objects=objects, seed=seed)
