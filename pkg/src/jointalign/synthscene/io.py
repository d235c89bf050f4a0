"""Dataset persistence: scene JSON files and raw channel blobs.

Channel blob layout (little-endian): int32 H, int32 W, then row-major
float32 depth [H*W], float32 normals [H*W*3], int32 instance [H*W],
float32 color [H*W*3].
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..geometry import Camera, Pose
from .models import make_primitive_model
from .raster import ChannelMaps
from .scene import Scene, SceneObject


def save_channels(path, maps: ChannelMaps):
    H, W = maps.depth.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<ii", H, W))
        fh.write(maps.depth.astype("<f4").tobytes())
        fh.write(maps.normal.astype("<f4").tobytes())
        fh.write(maps.instance.astype("<i4").tobytes())
        fh.write(maps.color.astype("<f4").tobytes())


def load_channels(path) -> ChannelMaps:
    with open(path, "rb") as fh:
        H, W = struct.unpack("<ii", fh.read(8))
        depth = np.frombuffer(fh.read(4 * H * W), dtype="<f4").reshape(H, W)
        normal = np.frombuffer(fh.read(12 * H * W), dtype="<f4").reshape(H, W, 3)
        inst = np.frombuffer(fh.read(4 * H * W), dtype="<i4").reshape(H, W)
        color = np.frombuffer(fh.read(12 * H * W), dtype="<f4").reshape(H, W, 3)
    return ChannelMaps(depth=depth.copy(), normal=normal.copy(),
                       instance=inst.astype(np.int32), color=color.copy())


def scene_to_json(scene: Scene) -> dict:
    return {
        "seed": scene.seed,
        "camera": scene.camera.to_json(),
        "objects": [
            {
                "model": {"id": o.model.id, "category": o.model.category,
                          "params": o.model.params, "seed": o.model.seed,
                          "n_samples": len(o.model.canonical_samples[0])},
                "category": o.category,
                "pose": o.pose.to_json(),
                "symmetry": o.model.symmetry.value,
            }
            for o in scene.objects
        ],
    }


def scene_from_json(obj: dict) -> Scene:
    objects = []
    for rec in obj["objects"]:
        m = rec["model"]
        model = make_primitive_model(m["category"], m["params"], seed=m["seed"],
                                     n_samples=m.get("n_samples", 512))
        objects.append(SceneObject(model=model, pose=Pose.from_json(rec["pose"]),
                                   category=rec["category"]))
    return Scene(camera=Camera.from_json(obj["camera"]), objects=objects,
                 seed=obj["seed"])


def save_scene(path, scene: Scene):
    Path(path).write_text(json.dumps(scene_to_json(scene), indent=None,
                                     sort_keys=True))


def load_scene(path) -> Scene:
    return scene_from_json(json.loads(Path(path).read_text()))


def dataset_paths(root, index: int) -> tuple[Path, Path]:
    root = Path(root)
    return (root / "scenes" / f"{index:05d}.json",
            root / "channels" / f"{index:05d}.bin")
