"""Sparse per-detection input blocks for the alignment network.

Every input row has exactly 13 channels in this fixed order:

    [rgb(3), normal(3), depth(1), mask(1), bearing(3), tau(1), det_id(1)]

tau is 0 for bbox-sampled image rows, 1 for image rows at CAD reprojection
pixels, 2 for CAD-side rows (whose rgb and mask are zero-filled). det_id is
the batch slot index normalized by N_mul. A block holds n_bbox + 2*n_cad
rows ordered [bbox | image-at-reprojection | CAD].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Camera, Pose, apply_pose
from .synthscene import CadModel, ChannelMaps, Detection, transform_normals

C_INPUT = 13
CH_RGB = slice(0, 3)
CH_NORMAL = slice(3, 6)
CH_DEPTH = 6
CH_MASK = 7
CH_BEARING = slice(8, 11)
CH_TAU = 11
CH_DET_ID = 12


class EmptyRegionError(ValueError):
    """Detection bbox does not cover any image pixel."""


@dataclass
class InputConfig:
    """Row counts for block construction (full-scale defaults)."""

    n_bbox: int = 2000
    n_cad: int = 500
    n_mul: int = 5

    @property
    def rows_per_block(self) -> int:
        return self.n_bbox + 2 * self.n_cad


@dataclass
class InputBlock:
    """All sparse rows for one detection at its current pose hypothesis."""

    rows: np.ndarray            # (n_bbox + 2*n_cad, 13) float32
    detection: Detection
    current_pose: Pose
    n_bbox: int
    n_cad: int

    def stamp_det_id(self, det_id: int, n_mul: int):
        self.rows[:, CH_DET_ID] = det_id / float(n_mul)


@dataclass
class Batch:
    """N_mul block slots (zero padding for missing detections)."""

    blocks: list                # length n_mul, InputBlock or None
    n_mul: int
    rows_per_block: int

    @property
    def active_count(self) -> int:
        return sum(b is not None for b in self.blocks)

    def tensor(self) -> np.ndarray:
        """(n_mul, rows, 13) float32 with zeroed padding slots."""
        out = np.zeros((self.n_mul, self.rows_per_block, C_INPUT), dtype=np.float32)
        for i, b in enumerate(self.blocks):
            if b is not None:
                out[i] = b.rows
        return out


def _bearing_for_pixels(camera: Camera, cols, rows) -> np.ndarray:
    b = np.stack([(cols - camera.cx) / camera.fx,
                  (rows - camera.cy) / camera.fy,
                  np.ones_like(cols, dtype=np.float64)], axis=1)
    return b / np.linalg.norm(b, axis=1, keepdims=True)


def _read_image_rows(maps: ChannelMaps, camera: Camera, cols, rows,
                     object_id: int, tau: float) -> np.ndarray:
    out = np.zeros((len(cols), C_INPUT), dtype=np.float32)
    out[:, CH_RGB] = maps.color[rows, cols]
    out[:, CH_NORMAL] = maps.normal[rows, cols]
    out[:, CH_DEPTH] = maps.depth[rows, cols]
    out[:, CH_MASK] = (maps.instance[rows, cols] == object_id)
    out[:, CH_BEARING] = _bearing_for_pixels(camera, cols.astype(np.float64),
                                             rows.astype(np.float64))
    out[:, CH_TAU] = tau
    return out


def sample_bbox_pixels(maps: ChannelMaps, camera: Camera, detection: Detection,
                       n: int, seed: int) -> np.ndarray:
    """Uniformly sample n pixels from the (already extended) detection bbox.

    Sampling is without replacement when the clipped bbox holds at least n
    pixels, with replacement otherwise. Returns (n, 13) rows with tau = 0.
    """
    x0, y0, x1, y1 = detection.bbox
    c0, c1 = max(0, math.ceil(x0)), min(camera.width - 1, math.floor(x1))
    r0, r1 = max(0, math.ceil(y0)), min(camera.height - 1, math.floor(y1))
    if c0 > c1 or r0 > r1:
        raise EmptyRegionError(f"bbox {detection.bbox} covers no pixel")
    n_cols, n_rows = c1 - c0 + 1, r1 - r0 + 1
    area = n_cols * n_rows
    rng = np.random.default_rng(np.random.SeedSequence([0xB0C5, seed]))
    flat = rng.choice(area, size=n, replace=area < n)
    cols = c0 + (flat % n_cols)
    rows = r0 + (flat // n_cols)
    return _read_image_rows(maps, camera, cols, rows, detection.object_id, tau=0.0)


def encode_cad(model: CadModel, pose: Pose, camera: Camera, maps: ChannelMaps,
               n: int, seed: int, object_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Reproject n CAD surface samples; return (image-side, CAD-side) rows.

    Image-side rows (tau=1) read the channel maps at the landed pixel;
    CAD-side rows (tau=2) carry the reprojected point's own depth and
    camera-frame normal with rgb and mask zero-filled. Points landing
    outside the image or behind the camera yield all-zero rows in both
    outputs (row count preserved).
    """
    pts, normals = model.canonical_samples
    if n > len(pts):
        raise ValueError(f"requested {n} CAD rows, model has {len(pts)} samples")
    rng = np.random.default_rng(np.random.SeedSequence([0xCAD, seed]))
    sel = rng.choice(len(pts), size=n, replace=False)
    pts_cam = apply_pose(pose, pts[sel])
    normals_cam = transform_normals(pose, normals[sel])

    z = pts_cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.fx * pts_cam[:, 0] / z + camera.cx
        v = camera.fy * pts_cam[:, 1] / z + camera.cy
    cols = np.round(u).astype(np.int64)
    rows = np.round(v).astype(np.int64)
    visible = ((z > 0) & (cols >= 0) & (cols <= camera.width - 1)
               & (rows >= 0) & (rows <= camera.height - 1))

    img = np.zeros((n, C_INPUT), dtype=np.float32)
    cad = np.zeros((n, C_INPUT), dtype=np.float32)
    if visible.any():
        vc, vr = cols[visible], rows[visible]
        img[visible] = _read_image_rows(maps, camera, vc, vr, object_id, tau=1.0)
        cad_rows = np.zeros((int(visible.sum()), C_INPUT), dtype=np.float32)
        cad_rows[:, CH_NORMAL] = normals_cam[visible]
        cad_rows[:, CH_DEPTH] = z[visible]
        cad_rows[:, CH_BEARING] = _bearing_for_pixels(
            camera, vc.astype(np.float64), vr.astype(np.float64))
        cad_rows[:, CH_TAU] = 2.0
        cad[visible] = cad_rows
    return img, cad


def build_block(maps: ChannelMaps, camera: Camera, detection: Detection,
                model: CadModel, pose: Pose, cfg: InputConfig, seed: int,
                det_id: int = 0) -> InputBlock:
    """Assemble one detection's (n_bbox + 2*n_cad, 13) block."""
    bbox_rows = sample_bbox_pixels(maps, camera, detection, cfg.n_bbox, seed)
    img_rows, cad_rows = encode_cad(model, pose, camera, maps, cfg.n_cad,
                                    seed, detection.object_id)
    block = InputBlock(rows=np.concatenate([bbox_rows, img_rows, cad_rows]),
                       detection=detection, current_pose=pose,
                       n_bbox=cfg.n_bbox, n_cad=cfg.n_cad)
    block.stamp_det_id(det_id, cfg.n_mul)
    return block


CHANNEL_NAMES = ("r", "g", "b", "nx", "ny", "nz", "depth", "mask",
                 "bx", "by", "bz", "tau", "det_id")


def dump_block(block: InputBlock, path) -> None:
    """Debug dump: raw float32 rows plus a JSON sidecar describing them."""
    import json
    from pathlib import Path

    path = Path(path)
    path.write_bytes(np.ascontiguousarray(block.rows, dtype="<f4").tobytes())
    sidecar = {
        "shape": list(block.rows.shape),
        "dtype": "float32-le",
        "channels": list(CHANNEL_NAMES),
        "n_bbox": block.n_bbox,
        "n_cad": block.n_cad,
        "row_regions": {"bbox": [0, block.n_bbox],
                        "image_at_reprojection": [block.n_bbox,
                                                  block.n_bbox + block.n_cad],
                        "cad": [block.n_bbox + block.n_cad,
                                block.n_bbox + 2 * block.n_cad]},
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2,
                                                    sort_keys=True))


def load_block_dump(path) -> tuple[np.ndarray, dict]:
    import json
    from pathlib import Path

    sidecar = json.loads(Path(str(path) + ".json").read_text())
    rows = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    return rows.reshape(sidecar["shape"]).copy(), sidecar


def assemble_batch(blocks: list, n_mul: int) -> list:
    """Greedy-fill blocks into ceil(len/n_mul) batches, zero padding the last.

    Slot order follows the input order; det_id channels are renumbered to
    the slot index within each batch.
    """
    if not blocks:
        return []
    rows_per_block = blocks[0].rows.shape[0]
    batches = []
    for start in range(0, len(blocks), n_mul):
        chunk = list(blocks[start:start + n_mul])
        for slot, b in enumerate(chunk):
            b.stamp_det_id(slot, n_mul)
        chunk += [None] * (n_mul - len(chunk))
        batches.append(Batch(blocks=chunk, n_mul=n_mul,
                             rows_per_block=rows_per_block))
    return batches
