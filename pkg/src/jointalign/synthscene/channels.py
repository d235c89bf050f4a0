"""Channel perturbation (synthetic sensor noise) and GT-derived detections."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .raster import ChannelMaps, rasterize


@dataclass
class NoiseConfig:
    """Synthetic degradation applied to rendered channels."""

    depth_sigma: float = 0.0        # multiplicative gaussian std on depth
    normal_jitter_deg: float = 0.0  # mean angular deviation of normals
    mask_morph_px: int = 0          # >0 erode instance regions, <0 dilate

    def is_noop(self) -> bool:
        return (self.depth_sigma == 0 and self.normal_jitter_deg == 0
                and self.mask_morph_px == 0)


@dataclass
class DetectConfig:
    """Bounding-box jitter/extension and the visibility drop threshold."""

    bbox_jitter_frac: float = 0.0
    extend_frac: float = 0.10
    min_visibility: float = 0.25


@dataclass
class Detection:
    """One detected object: extended bbox, class label, visibility."""

    bbox: tuple                 # (x0, y0, x1, y1) continuous pixel coords
    category: str
    object_id: int
    gt_visible_fraction: float
    confidence: float = 1.0


def _shift(mask: np.ndarray, dr: int, dc: int, fill) -> np.ndarray:
    out = np.full_like(mask, fill)
    H, W = mask.shape
    rs = slice(max(dr, 0), H + min(dr, 0))
    cs = slice(max(dc, 0), W + min(dc, 0))
    rs_src = slice(max(-dr, 0), H + min(-dr, 0))
    cs_src = slice(max(-dc, 0), W + min(-dc, 0))
    out[rs, cs] = mask[rs_src, cs_src]
    return out


def _morph_instance(inst: np.ndarray, px: int) -> np.ndarray:
    out = inst.copy()
    for _ in range(abs(px)):
        if px > 0:  # erode: boundary pixels of any region become background
            boundary = np.zeros(out.shape, dtype=bool)
            for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                boundary |= _shift(out, dr, dc, -1) != out
            out = np.where(boundary & (out >= 0), -1, out)
        else:  # dilate: background adopts a deterministic neighbor label
            grown = out.copy()
            for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                nb = _shift(out, dr, dc, -1)
                grown = np.where((grown < 0) & (nb >= 0), nb, grown)
            out = grown
    return out


def perturb_channels(maps: ChannelMaps, noise: NoiseConfig, seed: int) -> ChannelMaps:
    """Apply seeded noise to depth/normals and morph the instance mask."""
    if noise.is_noop():
        return maps.copy()
    rng = np.random.default_rng(np.random.SeedSequence([0x4015E, seed]))
    out = maps.copy()
    covered = maps.depth > 0

    if noise.depth_sigma > 0:
        factor = 1.0 + noise.depth_sigma * rng.standard_normal(maps.depth.shape)
        out.depth = np.where(covered, maps.depth * factor.astype(np.float32), 0.0)

    if noise.normal_jitter_deg > 0:
        n = out.normal.astype(np.float64)
        sigma = np.radians(noise.normal_jitter_deg) * np.sqrt(np.pi / 2.0)
        angle = np.abs(sigma * rng.standard_normal(covered.shape))
        raw = rng.standard_normal(n.shape)
        tang = raw - (raw * n).sum(-1, keepdims=True) * n
        tnorm = np.linalg.norm(tang, axis=-1, keepdims=True)
        tang = np.divide(tang, tnorm, out=np.zeros_like(tang), where=tnorm > 1e-9)
        jittered = n * np.cos(angle)[..., None] + tang * np.sin(angle)[..., None]
        out.normal = np.where(covered[..., None], jittered, 0.0).astype(np.float32)

    if noise.mask_morph_px != 0:
        out.instance = _morph_instance(out.instance, noise.mask_morph_px)

    return out


def detect_objects(scene, maps: ChannelMaps, cfg: DetectConfig, seed: int) -> list:
    """GT-derived detections: tight visible-mask bbox, jittered, extended 10%.

    Visibility = visible pixels / pixels when rendered alone; objects under
    ``min_visibility`` (or fully occluded) are dropped.
    """
    rng = np.random.default_rng(np.random.SeedSequence([0xDE7EC7, seed]))
    W = scene.camera.width
    H = scene.camera.height
    detections = []
    for idx, obj in enumerate(scene.objects):
        visible = maps.instance == idx
        vis_count = int(visible.sum())
        alone_count = int((rasterize(scene, only_object=idx).instance == idx).sum())
        fraction = vis_count / alone_count if alone_count else 0.0
        # draw jitter before the visibility gate to keep the stream stable
        jit = rng.uniform(-cfg.bbox_jitter_frac, cfg.bbox_jitter_frac, size=4)
        if vis_count == 0 or fraction < cfg.min_visibility:
            continue
        rows = np.flatnonzero(visible.any(axis=1))
        cols = np.flatnonzero(visible.any(axis=0))
        x0, x1 = float(cols[0]), float(cols[-1])
        y0, y1 = float(rows[0]), float(rows[-1])
        w, h = x1 - x0 + 1, y1 - y0 + 1
        x0, x1 = x0 + jit[0] * w, x1 + jit[1] * w
        y0, y1 = y0 + jit[2] * h, y1 + jit[3] * h
        x0, x1 = x0 - cfg.extend_frac * w, x1 + cfg.extend_frac * w
        y0, y1 = y0 - cfg.extend_frac * h, y1 + cfg.extend_frac * h
        bbox = (max(0.0, min(x0, x1)), max(0.0, min(y0, y1)),
                min(W - 1.0, max(x0, x1)), min(H - 1.0, max(y0, y1)))
        if bbox[2] < bbox[0] or bbox[3] < bbox[1]:
            continue
        detections.append(Detection(bbox=bbox, category=obj.category,
                                    object_id=idx,
                                    gt_visible_fraction=fraction,
                                    confidence=fraction))
    return detections
