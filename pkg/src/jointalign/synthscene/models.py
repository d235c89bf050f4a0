"""Procedural CAD-like furniture primitives.

Canonical model frame: +z up, bounding box centered at the origin and
normalized so the longest side is exactly 1. Meshes are unions of closed
boxes and cylinders, so every connected component is watertight and face
normals point outward. Flat parts keep flat per-corner normals; cylinder
side walls get smooth radial normals.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from ..geometry import SymmetryTag


class ConstructionError(ValueError):
    """Invalid shape parameters for a procedural category."""


@dataclass
class CadModel:
    """Triangle mesh with canonical surface samples and a symmetry tag."""

    id: int
    category: str
    vertices: np.ndarray        # (n, 3) float64, canonical frame
    faces: np.ndarray           # (m, 3) int32
    vertex_normals: np.ndarray  # (n, 3) unit, area-weighted average
    face_corner_normals: np.ndarray  # (m, 3, 3) unit, used for shading
    symmetry: SymmetryTag
    canonical_samples: tuple = field(repr=False, default=None)  # (pts, normals)
    params: dict = field(default_factory=dict)
    seed: int = 0

    @property
    def extent(self) -> np.ndarray:
        """Canonical bounding-box side lengths (max side == 1)."""
        return self.vertices.max(axis=0) - self.vertices.min(axis=0)


# ---------------------------------------------------------------------------
# part builders: each returns (vertices, faces, corner_normals)
# ---------------------------------------------------------------------------

_BOX_CORNERS = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1)
                         for z in (-1, 1)], dtype=np.float64) * 0.5
# 12 triangles over the 8 corners above; outward orientation is restored
# numerically afterwards, only the topology matters here
_BOX_FACES = np.array([
    [0, 1, 3], [0, 3, 2],  # x = -0.5
    [4, 7, 5], [4, 6, 7],  # x = +0.5
    [0, 4, 5], [0, 5, 1],  # y = -0.5
    [2, 3, 7], [2, 7, 6],  # y = +0.5
    [0, 2, 6], [0, 6, 4],  # z = -0.5
    [1, 5, 7], [1, 7, 3],  # z = +0.5
], dtype=np.int32)


def _face_normals_outward(verts, faces, center):
    """Unit face normals flipped to point away from the part center."""
    tri = verts[faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    outward = np.einsum("ij,ij->i", n, tri.mean(axis=1) - center)
    n[outward < 0] *= -1.0
    return n


def _box(center, size):
    center = np.asarray(center, dtype=np.float64)
    size = np.asarray(size, dtype=np.float64)
    if np.any(size <= 0):
        raise ConstructionError(f"box size must be positive, got {size}")
    verts = _BOX_CORNERS * size + center
    fn = _face_normals_outward(verts, _BOX_FACES, center)
    corner = np.repeat(fn[:, None, :], 3, axis=1)
    return verts, _BOX_FACES.copy(), corner


def _cylinder(center, radius, height, segments=32):
    """Closed cylinder along z: smooth side normals, flat cap normals."""
    if radius <= 0 or height <= 0 or segments < 3:
        raise ConstructionError("cylinder needs radius, height > 0, segments >= 3")
    center = np.asarray(center, dtype=np.float64)
    ang = 2 * math.pi * np.arange(segments) / segments
    ring = np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)
    lo = np.concatenate([ring, np.full((segments, 1), -height / 2)], axis=1)
    hi = np.concatenate([ring, np.full((segments, 1), height / 2)], axis=1)
    verts = np.concatenate([lo, hi, [[0, 0, -height / 2]], [[0, 0, height / 2]]])
    c_lo, c_hi = 2 * segments, 2 * segments + 1

    faces, corner = [], []
    radial = np.concatenate([ring / radius, np.zeros((segments, 1))], axis=1)
    down, up = np.array([0.0, 0, -1]), np.array([0.0, 0, 1])
    for i in range(segments):
        j = (i + 1) % segments
        faces.append([i, j, segments + j])
        corner.append([radial[i], radial[j], radial[j]])
        faces.append([i, segments + j, segments + i])
        corner.append([radial[i], radial[j], radial[i]])
        faces.append([c_lo, j, i])
        corner.append([down, down, down])
        faces.append([c_hi, segments + i, segments + j])
        corner.append([up, up, up])
    verts += center
    return verts, np.array(faces, dtype=np.int32), np.array(corner)


def _merge(parts):
    verts, faces, corner = [], [], []
    offset = 0
    for v, f, c in parts:
        verts.append(v)
        faces.append(f + offset)
        corner.append(c)
        offset += len(v)
    return (np.concatenate(verts), np.concatenate(faces).astype(np.int32),
            np.concatenate(corner))


# ---------------------------------------------------------------------------
# categories
# ---------------------------------------------------------------------------

# parameter name -> (default, lo, hi); values are relative proportions
CATEGORIES = {
    "box-chair": {
        "width": (0.55, 0.4, 0.7), "depth": (0.55, 0.4, 0.7),
        "seat_height": (0.45, 0.35, 0.55), "back_height": (0.55, 0.4, 0.7),
        "leg_thickness": (0.07, 0.05, 0.1),
    },
    "cylinder-table": {
        "radius": (0.5, 0.35, 0.5), "top_thickness": (0.08, 0.05, 0.12),
        "height": (0.75, 0.55, 1.0), "column_radius": (0.08, 0.05, 0.12),
        "base_radius": (0.25, 0.15, 0.35), "segments": (32, 12, 64),
    },
    "l-sofa": {
        "length": (1.0, 0.8, 1.0), "depth": (0.45, 0.35, 0.55),
        "seat_height": (0.35, 0.25, 0.45), "back_height": (0.4, 0.3, 0.5),
        "arm_length": (0.6, 0.45, 0.8), "arm_width": (0.25, 0.18, 0.32),
    },
    "slab-display": {
        "width": (0.9, 0.6, 1.0), "height": (0.55, 0.4, 0.7),
        "thickness": (0.06, 0.04, 0.09), "base_size": (0.3, 0.2, 0.4),
        "base_height": (0.08, 0.05, 0.12),
    },
    "box-stool": {
        "width": (0.45, 0.3, 1.0), "height": (0.5, 0.35, 1.0),
    },
}

CATEGORY_SYMMETRY = {
    "box-chair": SymmetryTag.NONE,
    "cylinder-table": SymmetryTag.INFINITE,
    "l-sofa": SymmetryTag.NONE,
    "slab-display": SymmetryTag.TWO_FOLD,
    "box-stool": SymmetryTag.FOUR_FOLD,
}


def _build_box_chair(p):
    w, d, sh, bh, lt = (p["width"], p["depth"], p["seat_height"],
                        p["back_height"], p["leg_thickness"])
    seat_t = 1.5 * lt
    parts = [_box([0, 0, sh - seat_t / 2], [w, d, seat_t]),
             _box([0, -d / 2 + lt / 2, sh + bh / 2], [w, lt, bh])]
    for sx in (-1, 1):
        for sy in (-1, 1):
            parts.append(_box([sx * (w - lt) / 2, sy * (d - lt) / 2,
                               (sh - seat_t) / 2], [lt, lt, sh - seat_t]))
    return parts


def _build_cylinder_table(p):
    seg = int(p["segments"])
    h, tt = p["height"], p["top_thickness"]
    base_h = 0.6 * tt
    return [
        _cylinder([0, 0, h - tt / 2], p["radius"], tt, seg),
        _cylinder([0, 0, (base_h + h - tt) / 2], p["column_radius"],
                  h - tt - base_h, seg),
        _cylinder([0, 0, base_h / 2], p["base_radius"], base_h, seg),
    ]


def _build_l_sofa(p):
    ln, d, sh, bh = p["length"], p["depth"], p["seat_height"], p["back_height"]
    aln, aw = p["arm_length"], p["arm_width"]
    back_t = 0.5 * d
    return [
        _box([0, 0, sh / 2], [ln, d, sh]),
        _box([0, -d / 2 - back_t / 2, (sh + bh) / 2], [ln, back_t, sh + bh]),
        _box([-ln / 2 + aw / 2, d / 2 + aln / 2, (sh + 0.5 * bh) / 2],
             [aw, aln, sh + 0.5 * bh]),
    ]


def _build_slab_display(p):
    w, h, t = p["width"], p["height"], p["thickness"]
    bs, bhh = p["base_size"], p["base_height"]
    return [
        _box([0, 0, bhh + h / 2], [w, t, h]),
        _box([0, 0, bhh / 2], [bs, bs, bhh]),
    ]


def _build_box_stool(p):
    return [_box([0, 0, p["height"] / 2], [p["width"], p["width"], p["height"]])]


_BUILDERS = {
    "box-chair": _build_box_chair,
    "cylinder-table": _build_cylinder_table,
    "l-sofa": _build_l_sofa,
    "slab-display": _build_slab_display,
    "box-stool": _build_box_stool,
}


def sample_shape_params(category: str, rng: np.random.Generator) -> dict:
    """Draw shape parameters uniformly within the documented ranges."""
    if category not in CATEGORIES:
        raise ConstructionError(f"unknown category '{category}'")
    out = {}
    for name, (default, lo, hi) in CATEGORIES[category].items():
        if name == "segments":
            out[name] = int(default)
        else:
            out[name] = float(rng.uniform(lo, hi))
    return out


def _validate_params(category: str, params: dict) -> dict:
    table = CATEGORIES[category]
    unknown = set(params) - set(table)
    if unknown:
        raise ConstructionError(f"unknown parameters {sorted(unknown)} for {category}")
    merged = {k: params.get(k, v[0]) for k, v in table.items()}
    for name, value in merged.items():
        lo, hi = table[name][1], table[name][2]
        if not (lo <= value <= hi):
            raise ConstructionError(
                f"{category}.{name}={value} outside documented range [{lo}, {hi}]")
    return merged


def _vertex_normals(verts, faces, corner_normals):
    """Area-weighted average of incident corner normals, unit length."""
    tri = verts[faces]
    area2 = np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]),
                           axis=1)
    acc = np.zeros_like(verts)
    np.add.at(acc, faces.ravel(),
              (corner_normals * area2[:, None, None]).reshape(-1, 3))
    norms = np.linalg.norm(acc, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return acc / norms


def sample_surface(verts, faces, corner_normals, n: int, rng) -> tuple:
    """Area-uniform (point, normal) samples over the mesh surface."""
    tri = verts[faces]
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    area = 0.5 * np.linalg.norm(cross, axis=1)
    idx = rng.choice(len(faces), size=n, p=area / area.sum())
    r1, r2 = rng.uniform(size=n), rng.uniform(size=n)
    flip = r1 + r2 > 1
    r1[flip], r2[flip] = 1 - r1[flip], 1 - r2[flip]
    bary = np.stack([1 - r1 - r2, r1, r2], axis=1)
    pts = np.einsum("nk,nkd->nd", bary, tri[idx])
    nrm = np.einsum("nk,nkd->nd", bary, corner_normals[idx])
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    return pts, nrm


def make_primitive_model(category: str, shape_params: dict | None = None,
                         seed: int = 0, n_samples: int = 512) -> CadModel:
    """Build a canonical, bit-deterministic procedural model.

    ``shape_params=None`` draws parameters from the documented ranges using
    the seed; explicit parameters are validated against those ranges.
    """
    if category not in _BUILDERS:
        raise ConstructionError(f"unknown category '{category}'")
    cat_key = zlib.crc32(category.encode())  # stable across runs
    rng = np.random.default_rng(np.random.SeedSequence([cat_key, seed]))
    if shape_params is None:
        shape_params = sample_shape_params(category, rng)
    params = _validate_params(category, shape_params)

    verts, faces, corner = _merge(_BUILDERS[category](params))

    # normalize: center the bounding box, longest side exactly 1
    lo, hi = verts.min(axis=0), verts.max(axis=0)
    verts = (verts - (lo + hi) / 2) / (hi - lo).max()

    pts, nrm = sample_surface(verts, faces, corner, n_samples,
                              np.random.default_rng(np.random.SeedSequence([seed, 7])))
    return CadModel(id=seed, category=category, vertices=verts, faces=faces,
                    vertex_normals=_vertex_normals(verts, faces, corner),
                    face_corner_normals=corner,
                    symmetry=CATEGORY_SYMMETRY[category],
                    canonical_samples=(pts, nrm), params=params, seed=seed)
