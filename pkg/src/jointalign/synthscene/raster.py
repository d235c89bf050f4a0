"""Z-buffered triangle rasterizer producing per-pixel scene channels.

Pixel (row r, col c) samples the continuous image plane at (u=c, v=r).
Depth is interpolated perspective-correctly (linear in 1/z), so the value at
a pixel center equals the ray/triangle intersection depth up to float
rounding. Normals are interpolated the same way from per-corner normals and
renormalized; the color channel is a per-object albedo with headlight
Lambertian shading.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import Camera, Pose, apply_pose, quat_to_matrix

NEAR_PLANE = 0.05


@dataclass
class ChannelMaps:
    """Rendered per-pixel buffers for one camera view."""

    depth: np.ndarray     # (H, W) float32, 0 where empty
    normal: np.ndarray    # (H, W, 3) float32 camera-frame unit vectors
    instance: np.ndarray  # (H, W) int32 object index, -1 background
    color: np.ndarray     # (H, W, 3) float32 in [0, 1]

    def copy(self) -> "ChannelMaps":
        return ChannelMaps(self.depth.copy(), self.normal.copy(),
                           self.instance.copy(), self.color.copy())


def transform_normals(pose: Pose, normals: np.ndarray) -> np.ndarray:
    """Map canonical surface normals to camera frame.

    Normals transform with the inverse-transpose of the linear part, i.e.
    divide by the per-axis scale before rotating, then renormalize.
    """
    n = np.asarray(normals, dtype=np.float64) / pose.s
    n = n @ quat_to_matrix(pose.q).T
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def bearing_grid(camera: Camera) -> np.ndarray:
    """(H, W, 3) unit ray directions through every pixel center."""
    c, r = np.meshgrid(np.arange(camera.width), np.arange(camera.height))
    b = np.stack([(c - camera.cx) / camera.fx, (r - camera.cy) / camera.fy,
                  np.ones_like(c, dtype=np.float64)], axis=-1)
    return b / np.linalg.norm(b, axis=-1, keepdims=True)


def _object_albedo(model_id: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([0xA1B, model_id & 0x7FFFFFFF]))
    return rng.uniform(0.25, 0.95, size=3)


def _raster_object(camera, verts_cam, faces, corners_cam, zbuf, nbuf, ibuf, obj_idx):
    z = verts_cam[:, 2]
    valid = z > NEAR_PLANE
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.fx * verts_cam[:, 0] / z + camera.cx
        v = camera.fy * verts_cam[:, 1] / z + camera.cy
    H, W = zbuf.shape

    for f_idx, tri in enumerate(faces):
        if not valid[tri].all():
            continue
        tu, tv, tz = u[tri], v[tri], z[tri]
        x0 = max(int(np.floor(tu.min())), 0)
        x1 = min(int(np.ceil(tu.max())), W - 1)
        y0 = max(int(np.floor(tv.min())), 0)
        y1 = min(int(np.ceil(tv.max())), H - 1)
        if x0 > x1 or y0 > y1:
            continue
        area = ((tu[1] - tu[0]) * (tv[2] - tv[0])
                - (tu[2] - tu[0]) * (tv[1] - tv[0]))
        if abs(area) < 1e-12:
            continue
        px, py = np.meshgrid(np.arange(x0, x1 + 1), np.arange(y0, y1 + 1))
        w0 = ((tu[2] - tu[1]) * (py - tv[1]) - (tv[2] - tv[1]) * (px - tu[1])) / area
        w1 = ((tu[0] - tu[2]) * (py - tv[2]) - (tv[0] - tv[2]) * (px - tu[2])) / area
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue
        b = np.stack([w0[inside], w1[inside], w2[inside]], axis=1)
        depth = 1.0 / (b @ (1.0 / tz))
        rows, cols = py[inside], px[inside]
        closer = depth < zbuf[rows, cols]
        if not closer.any():
            continue
        rows, cols, depth, b = rows[closer], cols[closer], depth[closer], b[closer]
        n = (b / tz) @ corners_cam[f_idx] * depth[:, None]
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        zbuf[rows, cols] = depth
        nbuf[rows, cols] = n
        ibuf[rows, cols] = obj_idx


def rasterize(scene, only_object: int | None = None) -> ChannelMaps:
    """Render a scene's depth/normal/instance/color channels.

    ``only_object`` renders a single object index alone (used for
    visibility accounting).
    """
    cam = scene.camera
    H, W = cam.height, cam.width
    zbuf = np.full((H, W), np.inf)
    nbuf = np.zeros((H, W, 3))
    ibuf = np.full((H, W), -1, dtype=np.int32)

    for idx, obj in enumerate(scene.objects):
        if only_object is not None and idx != only_object:
            continue
        verts_cam = apply_pose(obj.pose, obj.model.vertices)
        corners_cam = transform_normals(obj.pose,
                                        obj.model.face_corner_normals.reshape(-1, 3))
        corners_cam = corners_cam.reshape(-1, 3, 3)
        _raster_object(cam, verts_cam, obj.model.faces, corners_cam,
                       zbuf, nbuf, ibuf, idx)

    covered = np.isfinite(zbuf)
    depth = np.where(covered, zbuf, 0.0).astype(np.float32)

    color = np.zeros((H, W, 3))
    if covered.any():
        bear = bearing_grid(cam)
        lambert = np.clip(-(nbuf * bear).sum(axis=-1), 0.0, 1.0)
        for idx, obj in enumerate(scene.objects):
            sel = ibuf == idx
            if sel.any():
                color[sel] = _object_albedo(obj.model.id) * (
                    0.3 + 0.7 * lambert[sel, None])

    return ChannelMaps(depth=depth, normal=nbuf.astype(np.float32),
                       instance=ibuf, color=color.astype(np.float32))
