"""Shared fixtures and independent oracles for the test suite."""

import numpy as np
import pytest

from jointalign.geometry import Camera, Pose, UPRIGHT_QUAT, apply_pose, pixel_bearing
from jointalign.synthscene import Scene, SceneObject, make_primitive_model


def make_camera(width=128, height=96, focal=110.0) -> Camera:
    return Camera(fx=focal, fy=focal, cx=(width - 1) / 2, cy=(height - 1) / 2,
                  width=width, height=height)


def make_scene(objects, camera=None, seed=0) -> Scene:
    return Scene(camera=camera or make_camera(), objects=list(objects), seed=seed)


def cube_object(center=(0, 0, 2.5), scale=(1, 1, 1), q=(1, 0, 0, 0), seed=0,
                n_samples=600):
    from jointalign.geometry import pose_from_translation

    model = make_primitive_model("box-stool", {"width": 0.6, "height": 0.6},
                                 seed=seed, n_samples=n_samples)
    # box-stool normalizes to a unit cube when width == height
    pose = pose_from_translation(np.asarray(center, dtype=float), np.asarray(q, dtype=float),
                                 np.asarray(scale, dtype=float))
    return SceneObject(model=model, pose=pose, category="box-stool")


def ray_mesh_depth(camera: Camera, scene: Scene, u: float, v: float) -> float:
    """Brute-force nearest ray/triangle intersection depth (Moller-Trumbore).

    Independent oracle for rasterizer depth; returns inf when nothing is hit.
    """
    direction = pixel_bearing(camera, u, v)
    best = np.inf
    for obj in scene.objects:
        verts = apply_pose(obj.pose, obj.model.vertices)
        tri = verts[obj.model.faces]  # (m, 3, 3)
        e1 = tri[:, 1] - tri[:, 0]
        e2 = tri[:, 2] - tri[:, 0]
        pvec = np.cross(direction, e2)
        det = np.einsum("ij,ij->i", e1, pvec)
        ok = np.abs(det) > 1e-14
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tvec = -tri[:, 0]
        bu = np.einsum("ij,ij->i", tvec, pvec) * inv
        qvec = np.cross(tvec, e1)
        bv = (qvec @ direction) * inv
        t = np.einsum("ij,ij->i", e2, qvec) * inv
        hit = ok & (bu >= -1e-12) & (bv >= -1e-12) & (bu + bv <= 1 + 1e-12) & (t > 0)
        if hit.any():
            best = min(best, t[hit].min() * direction[2])
    return float(best)


def _own_ray_depth(tri_pack, direction) -> float:
    """Nearest own-mesh intersection depth along one ray (Moller-Trumbore)."""
    tri, e1, e2 = tri_pack
    pvec = np.cross(direction, e2)
    det = np.einsum("ij,ij->i", e1, pvec)
    ok = np.abs(det) > 1e-14
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tvec = -tri[:, 0]
    bu = np.einsum("ij,ij->i", tvec, pvec) * inv
    qvec = np.cross(tvec, e1)
    bv = (qvec @ direction) * inv
    t = np.einsum("ij,ij->i", e2, qvec) * inv
    hit = ok & (bu >= -1e-12) & (bv >= -1e-12) & (bu + bv <= 1 + 1e-12) & (t > 0)
    if not hit.any():
        return np.inf
    return float(t[hit].min() * direction[2])


def visible_resolved_rows(camera: Camera, obj, points_cam: np.ndarray,
                          self_tol: float = 2e-3,
                          grid_tol: float = 1e-2) -> np.ndarray:
    """Rows whose surface point the pixel grid genuinely sees.

    Exact mesh ray casts only (no rasterization): the point must be the
    object's own nearest surface along its ray (not self-occluded), and the
    rounded pixel center's own-mesh depth must lie within ``grid_tol`` of
    the point's depth (surfaces thinner or steeper than a pixel cannot be
    represented by any pixel-grid sensor at that tolerance).
    """
    verts = apply_pose(obj.pose, obj.model.vertices)
    tri = verts[obj.model.faces]
    tri_pack = (tri, tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    out = np.zeros(len(points_cam), dtype=bool)
    for i, p in enumerate(points_cam):
        if p[2] <= 0:
            continue
        u = camera.fx * p[0] / p[2] + camera.cx
        v = camera.fy * p[1] / p[2] + camera.cy
        r, c = round(float(v)), round(float(u))
        if not (0 <= c < camera.width and 0 <= r < camera.height):
            continue
        if _own_ray_depth(tri_pack, p / np.linalg.norm(p)) < p[2] - self_tol:
            continue  # self-occluded
        center_depth = _own_ray_depth(tri_pack, pixel_bearing(camera, c, r))
        out[i] = abs(center_depth - p[2]) < grid_tol
    return out


@pytest.fixture
def camera():
    return make_camera()
