"""Losses, training-pose samplers and the rollout training loop.

Training interleaves two example streams with an exact 3:1 schedule: after
every third update example one classifier example is drawn. Update examples
receive only the point-alignment loss; classifier examples only the binary
cross-entropy on sigma. Rollout poses advance by the (detached) predicted
updates; gradients never flow across rollout steps.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import diff_engine as de
from .diff_engine import Tensor
from .align_net import AlignNet, Lamb, raw_to_delta
from .geometry import (
    Camera,
    Pose,
    PoseDelta,
    SymmetryTag,
    apply_pose,
    object_offset_quat,
    pixel_bearing,
    pose_from_translation,
    pose_is_correct,
    quat_from_axis_angle,
    quat_multiply,
    translation_vector,
    CANONICAL_UP,
)
from .sparse_input import Batch, InputConfig, assemble_batch, build_block, sample_bbox_pixels
from .synthscene import CadModel, ChannelMaps, Detection

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; the epoch aborted."""


@dataclass
class Thresholds:
    """Correctness thresholds: 20 cm, 20 degrees, 20 percent."""

    t_max: float = 0.20
    r_max: float = 20.0
    s_max: float = 0.20


@dataclass
class SamplingRegion:
    """Uniform sampling bounds around GT for classifier training poses."""

    rot_deg: tuple       # (tilt, azim, elev) max offsets in degrees
    t_cm: float          # per-component translation bound in cm
    s_pct: float         # per-axis scale bound in percent
    discrete_rotation: bool
    frequency: float


DEFAULT_REGIONS = (
    SamplingRegion((7, 10, 10), 13, 13, False, 0.4),
    SamplingRegion((7, 10, 10), 13, 13, True, 0.2),
    SamplingRegion((7, 45, 20), 30, 30, False, 0.2),
    SamplingRegion((7, 45, 20), 30, 30, True, 0.1),
    SamplingRegion((20, 45, 20), 60, 60, True, 0.1),
)


@dataclass
class TrainConfig:
    batch_images: int = 20
    rollout_steps: int = 3
    n_loss: int = 1000
    lr: float = 1e-3
    epochs: int = 1
    optimizer: str = "lamb"
    loss_normalize: bool = False    # divide L_align by N_loss when True
    init_depth_range: tuple = (1.0, 5.0)
    init_rot_deg: tuple = (10.0, 45.0, 20.0)   # tilt, azimuth, elevation

    def __post_init__(self):
        if min(self.batch_images, self.rollout_steps, self.n_loss,
               self.epochs) <= 0 or self.lr <= 0:
            raise ValueError("TrainConfig values must be positive")


# ---------------------------------------------------------------------------
# losses and labels
# ---------------------------------------------------------------------------

def loss_points(model: CadModel, n: int, seed: int) -> np.ndarray:
    """n canonical points for the alignment loss (replacement if needed)."""
    pts = model.canonical_samples[0]
    rng = np.random.default_rng(np.random.SeedSequence([0x1055, seed]))
    idx = rng.choice(len(pts), size=n, replace=n > len(pts))
    return pts[idx]


def align_loss(pred: Pose, gt: Pose, model: CadModel, n: int, seed: int,
               normalize: bool = False) -> float:
    """Sum over n sampled CAD points of the L1 transform discrepancy."""
    pts = loss_points(model, n, seed)
    total = float(np.abs(apply_pose(pred, pts) - apply_pose(gt, pts)).sum())
    return total / n if normalize else total


def classifier_loss(sigma: float, label: int) -> float:
    """Binary cross entropy with sigma clamped to [1e-7, 1 - 1e-7]."""
    s = min(max(float(sigma), 1e-7), 1.0 - 1e-7)
    return -(label * math.log(s) + (1 - label) * math.log(1.0 - s))


def label_pose(pose: Pose, gt: Pose, sym: SymmetryTag,
               thresholds: Thresholds = Thresholds()) -> int:
    return int(pose_is_correct(pose, gt, sym, thresholds.t_max,
                               thresholds.r_max, thresholds.s_max))


# ---------------------------------------------------------------------------
# training-pose samplers
# ---------------------------------------------------------------------------

def draw_rotation_offset(rng: np.random.Generator, tilt_deg: float,
                         azim_deg: float, elev_deg: float):
    """Uniform (tilt, azim, elev) draws and the composed offset quaternion."""
    tilt = math.radians(rng.uniform(-tilt_deg, tilt_deg))
    azim = math.radians(rng.uniform(-azim_deg, azim_deg))
    elev = math.radians(rng.uniform(-elev_deg, elev_deg))
    return tilt, azim, elev, object_offset_quat(tilt, azim, elev)


def sample_update_pose(gt: Pose, detection: Detection, camera: Camera,
                       seed: int, scale_range: tuple = (0.75, 1.35),
                       cfg: TrainConfig = TrainConfig(),
                       tie_xy_scale: bool = False) -> Pose:
    """Initial pose for the update regime.

    Translation lifts a uniform bbox pixel to depth z ~ U(init_depth_range);
    scale is uniform in the per-category range; rotation is GT composed with
    a uniform offset inside (tilt, azim, elev) bounds.
    """
    rng = np.random.default_rng(np.random.SeedSequence([0x0BD, seed]))
    x0, y0, x1, y1 = detection.bbox
    u = rng.uniform(x0, x1) if x1 > x0 else x0
    v = rng.uniform(y0, y1) if y1 > y0 else y0
    z = rng.uniform(*cfg.init_depth_range)
    bearing = pixel_bearing(camera, u, v)
    t_vec = bearing * (z / bearing[2])

    s = rng.uniform(scale_range[0], scale_range[1], size=3)
    if tie_xy_scale:
        s[1] = s[0]
    _, _, _, dq = draw_rotation_offset(rng, *cfg.init_rot_deg)
    return pose_from_translation(t_vec, quat_multiply(gt.q, dq), s)


def sample_classifier_pose(gt: Pose, sym: SymmetryTag, seed: int,
                           regions: tuple = DEFAULT_REGIONS,
                           thresholds: Thresholds = Thresholds(),
                           tie_xy_scale: bool = False) -> tuple[Pose, int]:
    """Region-table pose draw around GT plus its correctness label."""
    rng = np.random.default_rng(np.random.SeedSequence([0xC1A55, seed]))
    freqs = np.array([r.frequency for r in regions])
    region = regions[int(rng.choice(len(regions), p=freqs / freqs.sum()))]

    t_vec = translation_vector(gt) + rng.uniform(-region.t_cm, region.t_cm,
                                                 size=3) / 100.0
    s_off = rng.uniform(-region.s_pct, region.s_pct, size=3) / 100.0
    if tie_xy_scale:
        s_off[1] = s_off[0]
    s = gt.s * (1.0 + s_off)
    _, _, _, dq = draw_rotation_offset(rng, *region.rot_deg)
    q = quat_multiply(gt.q, dq)
    if region.discrete_rotation:
        k = int(rng.integers(4))
        q = quat_multiply(q, quat_from_axis_angle(CANONICAL_UP, k * math.pi / 2))
    pose = pose_from_translation(t_vec, q, s)
    return pose, label_pose(pose, gt, sym, thresholds)


# ---------------------------------------------------------------------------
# differentiable pose update + loss
# ---------------------------------------------------------------------------

def delta_graph(raw: Tensor) -> dict:
    """Raw (E, 11) outputs -> update fields, mirroring raw_to_delta."""
    dd = 2.0 * de.sigmoid(raw[:, 0:1])
    dphi = (math.pi / 4) * de.tanh(raw[:, 1:2])
    dtheta = (math.pi / 4) * de.tanh(raw[:, 2:3])
    dq = de.concat([1.0 + raw[:, 3:4], raw[:, 4:5], raw[:, 5:6], raw[:, 6:7]],
                   axis=1)
    ds = 2.0 * de.sigmoid(raw[:, 7:10])
    sigma = de.sigmoid(raw[:, 10])
    return {"dd": dd, "dphi": dphi, "dtheta": dtheta, "dq": dq, "ds": ds,
            "sigma": sigma}


def _rotation_from_quat_graph(qhat: Tensor) -> Tensor:
    """(E, 4) unit quaternions -> (E, 3, 3) rotation matrices, in graph."""
    w, x, y, z = (qhat[:, i:i + 1] for i in range(4))
    rows = [
        1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y),
        2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x),
        2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y),
    ]
    return de.concat(rows, axis=1).reshape((-1, 3, 3))


def align_loss_graph(raw: Tensor, poses: list, gts: list, models: list,
                     n_loss: int, seeds: list, normalize: bool = False) -> Tensor:
    """Differentiable L_align for E update examples.

    raw: (E, 11) network outputs; poses/gts/models/seeds: per-example
    current pose, GT pose, CAD model and loss-point seed.
    """
    E = raw.shape[0]
    dtype = raw.dtype
    cur_q = np.stack([p.q for p in poses]).astype(dtype)
    cur_d = np.array([[p.d] for p in poses], dtype=dtype)
    cur_phi = np.array([[p.phi] for p in poses], dtype=dtype)
    cur_theta = np.array([[p.theta] for p in poses], dtype=dtype)
    cur_s = np.stack([p.s for p in poses]).astype(dtype)
    pts = np.stack([loss_points(m, n_loss, sd) for m, sd in zip(models, seeds)])
    targets = np.stack([apply_pose(g, p) for g, p in zip(gts, pts)]).astype(dtype)
    pts = pts.astype(dtype)

    f = delta_graph(raw)
    d_new = cur_d * f["dd"]
    phi = cur_phi + f["dphi"]
    theta = cur_theta + f["dtheta"]
    st = de.sin(theta)
    t_new = de.concat([st * de.cos(phi), st * de.sin(phi), de.cos(theta)],
                      axis=1) * d_new

    # q' = q_cur * dq is linear in dq with constant coefficients
    aw, ax, ay, az = (cur_q[:, i:i + 1] for i in range(4))
    bw, bx, by, bz = (f["dq"][:, i:i + 1] for i in range(4))
    q_new = de.concat([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=1)
    qhat = q_new / de.sqrt((q_new * q_new).sum(axis=1, keepdims=True) + 1e-12)
    R = _rotation_from_quat_graph(qhat)

    scaled = Tensor(pts) * (cur_s * f["ds"]).reshape((E, 1, 3))
    moved = de.matmul(scaled, de.swapaxes(R, 1, 2)) + t_new.reshape((E, 1, 3))
    total = de.abs_(moved - Tensor(targets)).sum()
    return total * (1.0 / n_loss) if normalize else total


def updated_poses_from_raw(raw_data: np.ndarray, poses: list) -> list:
    """Detached rollout: apply raw predictions to the current poses."""
    from .geometry import update_pose

    return [update_pose(p, raw_to_delta(raw_data[i]))
            for i, p in enumerate(poses)]


# ---------------------------------------------------------------------------
# epoch loop
# ---------------------------------------------------------------------------

@dataclass
class TrainScene:
    """One prepared training image: scene, network-input maps, detections."""

    scene: object
    maps: ChannelMaps
    detections: list


@dataclass
class ExampleCounter:
    """Exact 3:1 update/classifier interleave across the epoch."""

    updates: int = 0
    classifiers: int = 0

    def tick(self) -> bool:
        """Count one update example; True when a classifier example is due."""
        self.updates += 1
        if self.updates % 3 == 0:
            self.classifiers += 1
            return True
        return False


def _gt_for(det: Detection, scene) -> tuple[Pose, CadModel, SymmetryTag]:
    obj = scene.objects[det.object_id]
    return obj.pose, obj.model, obj.model.symmetry


def train_epoch(net: AlignNet, optimizer: Lamb, dataset: list,
                input_cfg: InputConfig, cfg: TrainConfig, seed: int,
                scale_range_for=None, log_rows: list | None = None,
                epoch_index: int = 0) -> dict:
    """One pass over prepared TrainScenes; returns aggregate metrics.

    ``scale_range_for(category)`` supplies the per-category init scale range
    (defaults to (0.75, 1.35) for every category).
    """
    if not dataset:
        raise ValueError("empty dataset")
    if scale_range_for is None:
        scale_range_for = lambda cat: (0.75, 1.35)
    counter = ExampleCounter()
    rows_per_block = input_cfg.rows_per_block
    n_mul = input_cfg.n_mul
    sums = {"l_align": 0.0, "l_cls": 0.0, "n_align": 0, "n_cls": 0, "steps": 0}
    t_start = time.monotonic()

    for batch_start in range(0, len(dataset), cfg.batch_images):
        images = dataset[batch_start:batch_start + cfg.batch_images]
        # per-image update example state
        state = []
        for img_idx, rec in enumerate(images):
            dets = rec.detections[:n_mul]  # desk scenes fit one batch
            if not dets:
                continue
            base = np.random.SeedSequence(
                [0x7E41, seed, epoch_index, batch_start + img_idx])
            img_seed = int(np.random.default_rng(base).integers(2**31))
            poses = []
            for d_idx, det in enumerate(dets):
                gt, model, sym = _gt_for(det, rec.scene)
                poses.append(sample_update_pose(
                    gt, det, rec.scene.camera, img_seed + 131 * d_idx,
                    scale_range_for(det.category), cfg,
                    tie_xy_scale=sym in (SymmetryTag.FOUR_FOLD,
                                         SymmetryTag.INFINITE)))
            state.append({"rec": rec, "dets": dets, "poses": poses,
                          "seed": img_seed,
                          "bbox_rows": [None] * len(dets)})
        if not state:
            continue

        for step in range(cfg.rollout_steps):
            upd_tensors, upd_meta = [], []
            cls_tensors, cls_meta = [], []
            for st_idx, s in enumerate(state):
                rec, dets = s["rec"], s["dets"]
                cam = rec.scene.camera
                block_seed = s["seed"] + 7919 * step
                arr = np.zeros((n_mul, rows_per_block, 13), dtype=np.float32)
                cls_arr = None
                for d_idx, det in enumerate(dets):
                    gt, model, sym = _gt_for(det, rec.scene)
                    if s["bbox_rows"][d_idx] is None:
                        s["bbox_rows"][d_idx] = sample_bbox_pixels(
                            rec.maps, cam, det, input_cfg.n_bbox, s["seed"] + d_idx)
                    block = _block_with_cached_bbox(
                        rec.maps, cam, det, model, s["poses"][d_idx], input_cfg,
                        block_seed + d_idx, d_idx, s["bbox_rows"][d_idx])
                    arr[d_idx] = block.rows
                    upd_meta.append((st_idx, d_idx, gt, model))
                    if counter.tick():
                        cpose, clabel = sample_classifier_pose(
                            gt, sym, block_seed + 31 * d_idx + 5,
                            tie_xy_scale=sym in (SymmetryTag.FOUR_FOLD,
                                                 SymmetryTag.INFINITE))
                        cblock = _block_with_cached_bbox(
                            rec.maps, cam, det, model, cpose, input_cfg,
                            block_seed + 31 * d_idx + 6, d_idx,
                            s["bbox_rows"][d_idx])
                        if cls_arr is None:
                            cls_arr = np.zeros_like(arr)
                        cls_arr[d_idx] = cblock.rows
                        cls_meta.append((len(cls_tensors), d_idx, clabel))
                upd_tensors.append(arr)
                if cls_arr is not None:
                    cls_tensors.append(cls_arr)

            n_upd_batches = len(upd_tensors)
            stacked_inputs = np.stack(upd_tensors + cls_tensors)
            raw = net.forward_raw(stacked_inputs)

            upd_rows = [m[0] * n_mul + m[1] for m in upd_meta]
            flat = raw.reshape((stacked_inputs.shape[0] * n_mul, -1))
            raw_upd = flat[np.array(upd_rows)] if upd_rows else None
            loss_terms = []
            if raw_upd is not None:
                poses = [state[m[0]]["poses"][m[1]] for m in upd_meta]
                gts = [m[2] for m in upd_meta]
                models = [m[3] for m in upd_meta]
                seeds = [state[m[0]]["seed"] + 997 * step + m[1] for m in upd_meta]
                l_align = align_loss_graph(raw_upd, poses, gts, models,
                                           cfg.n_loss, seeds,
                                           normalize=cfg.loss_normalize)
                loss_terms.append(l_align)
            if cls_meta:
                cls_rows = [(n_upd_batches + b) * n_mul + d for (b, d, _) in cls_meta]
                raw_cls = flat[np.array(cls_rows)]
                labels = np.array([m[2] for m in cls_meta], dtype=np.float32)
                l_cls = de.bce_loss(de.sigmoid(raw_cls[:, 10]), labels)
                loss_terms.append(l_cls)

            total = loss_terms[0] if len(loss_terms) == 1 else \
                loss_terms[0] + loss_terms[1]
            if not np.isfinite(total.data):
                raise TrainingDiverged(
                    f"non-finite loss at step {sums['steps']}")
            optimizer.zero_grad()
            de.backward(total)
            optimizer.step()

            # detached rollout to the next step's initial poses
            if raw_upd is not None:
                raw_d = raw_upd.data
                for row, m in enumerate(upd_meta):
                    st_idx, d_idx = m[0], m[1]
                    state[st_idx]["poses"][d_idx] = updated_poses_from_raw(
                        raw_d[row:row + 1], [state[st_idx]["poses"][d_idx]])[0]

            sums["steps"] += 1
            la = float(l_align.data) if raw_upd is not None else 0.0
            lc = float(l_cls.data) if cls_meta else 0.0
            sums["l_align"] += la
            sums["n_align"] += len(upd_meta)
            sums["l_cls"] += lc
            sums["n_cls"] += len(cls_meta)
            if log_rows is not None:
                log_rows.append({
                    "epoch": epoch_index, "step": sums["steps"],
                    "l_align": la / max(1, len(upd_meta)),
                    "l_cls": lc / max(1, len(cls_meta)),
                    "lr": cfg.lr,
                    "wallclock": time.monotonic() - t_start,
                })

    elapsed = time.monotonic() - t_start
    return {
        "l_align_mean": sums["l_align"] / max(1, sums["n_align"]),
        "l_cls_mean": sums["l_cls"] / max(1, sums["n_cls"]),
        "update_examples": counter.updates,
        "classifier_examples": counter.classifiers,
        "optimizer_steps": sums["steps"],
        "seconds": elapsed,
        "images_per_second": len(dataset) / elapsed if elapsed > 0 else 0.0,
    }


def _block_with_cached_bbox(maps, camera, det, model, pose, input_cfg, seed,
                            det_id, bbox_rows):
    """build_block but reusing precomputed bbox rows (pose-independent)."""
    from .sparse_input import InputBlock, encode_cad

    img_rows, cad_rows = encode_cad(model, pose, camera, maps, input_cfg.n_cad,
                                    seed, det.object_id)
    block = InputBlock(rows=np.concatenate([bbox_rows, img_rows, cad_rows]),
                       detection=det, current_pose=pose,
                       n_bbox=input_cfg.n_bbox, n_cad=input_cfg.n_cad)
    block.stamp_det_id(det_id, input_cfg.n_mul)
    return block
