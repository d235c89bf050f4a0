"""Evaluation: 3D NMS, per-scene and per-image accuracy, AP-mesh, calibration.

All metrics operate in camera coordinates (the desk setting is single-view,
so camera frame doubles as world frame). Mesh point clouds for the F-score
are rescaled isotropically so the GT-aligned model's longest oriented
bounding-box side equals 10 before distances are thresholded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    Pose,
    SymmetryTag,
    apply_pose,
    pose_is_correct,
    translation_vector,
)
from .synthscene import CadModel, ChannelMaps, rasterize
from .training import Thresholds


@dataclass
class EvalConfig:
    thresholds: Thresholds = field(default_factory=Thresholds)
    nms_radius: float = 0.3
    nms_by: str = "sigma"                # or "detector"
    visibility_min: float = 0.5
    visibility_depth_tol: float = 0.30
    rho: float = 0.5
    n_surface_samples: int = 2048
    surface_seed: int = 0


@dataclass
class GroundTruth:
    """One annotated object for evaluation."""

    category: str
    pose: Pose
    symmetry: SymmetryTag
    model: CadModel


def scene_ground_truths(scene) -> list:
    return [GroundTruth(category=o.category, pose=o.pose,
                        symmetry=o.model.symmetry, model=o.model)
            for o in scene.objects]


def _score(pred, by: str) -> float:
    return pred.sigma if by == "sigma" else pred.detector_confidence


# ---------------------------------------------------------------------------
# 3D NMS and per-scene accuracy
# ---------------------------------------------------------------------------

def nms_3d(preds: list, radius: float = 0.3, by: str = "sigma") -> list:
    """Greedy same-category suppression by 3D center distance."""
    ranked = sorted(preds, key=lambda p: -_score(p, by))
    kept = []
    for cand in ranked:
        center = translation_vector(cand.pose)
        clash = any(
            k.category == cand.category
            and np.linalg.norm(center - translation_vector(k.pose)) < radius
            for k in kept)
        if not clash:
            kept.append(cand)
    return kept


def per_scene_accuracy(preds: list, gts: list,
                       cfg: EvalConfig = EvalConfig()) -> dict:
    """Scan2CAD-style: greedy threshold matching, each GT used at most once."""
    t = cfg.thresholds
    matched_gt = set()
    correct_by_cat = {g.category: 0 for g in gts}
    total_by_cat = {}
    for g in gts:
        total_by_cat[g.category] = total_by_cat.get(g.category, 0) + 1
    n_correct = 0
    for pred in sorted(preds, key=lambda p: -_score(p, cfg.nms_by)):
        best, best_dist = None, np.inf
        for gi, g in enumerate(gts):
            if gi in matched_gt or g.category != pred.category:
                continue
            if not pose_is_correct(pred.pose, g.pose, g.symmetry,
                                   t.t_max, t.r_max, t.s_max):
                continue
            dist = float(np.linalg.norm(translation_vector(pred.pose)
                                        - translation_vector(g.pose)))
            if dist < best_dist:
                best, best_dist = gi, dist
        if best is not None:
            matched_gt.add(best)
            n_correct += 1
            correct_by_cat[gts[best].category] += 1

    per_category = {
        cat: {"correct": correct_by_cat.get(cat, 0), "total": tot,
              "accuracy": correct_by_cat.get(cat, 0) / tot}
        for cat, tot in sorted(total_by_cat.items())}
    n_gt = len(gts)
    accs = [v["accuracy"] for v in per_category.values()]
    return {
        "per_category": per_category,
        "instance_accuracy": n_correct / n_gt if n_gt else 0.0,
        "class_accuracy": float(np.mean(accs)) if accs else 0.0,
        "n_gt": n_gt,
        "n_pred": len(preds),
    }


# ---------------------------------------------------------------------------
# per-image association
# ---------------------------------------------------------------------------

def _projected_bbox(camera, pose: Pose, model: CadModel):
    pts = apply_pose(pose, model.vertices)
    z = pts[:, 2]
    if np.all(z <= 0):
        return None
    pts = pts[z > 0]
    u = camera.fx * pts[:, 0] / pts[:, 2] + camera.cx
    v = camera.fy * pts[:, 1] / pts[:, 2] + camera.cy
    return float(u.min()), float(v.min()), float(u.max()), float(v.max())


def _bbox_iou(a, b) -> float:
    if a is None or b is None:
        return 0.0
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    area = ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1])
            - inter)
    return inter / area if area > 0 else 0.0


def visible_gt_indices(scene, maps: ChannelMaps,
                       cfg: EvalConfig = EvalConfig()) -> list:
    """GTs whose center projects in view and that pass the depth-visibility test.

    A GT is visible when at least ``visibility_min`` of its rendered-alone
    pixels have depth within ``visibility_depth_tol`` of the scene depth.
    """
    cam = scene.camera
    out = []
    for idx, obj in enumerate(scene.objects):
        center = translation_vector(obj.pose)
        if center[2] <= 0:
            continue
        u = cam.fx * center[0] / center[2] + cam.cx
        v = cam.fy * center[1] / center[2] + cam.cy
        if not (0 <= u <= cam.width - 1 and 0 <= v <= cam.height - 1):
            continue
        alone = rasterize(scene, only_object=idx)
        pix = alone.depth > 0
        if not pix.any():
            continue
        close = np.abs(alone.depth[pix] - maps.depth[pix]) <= cfg.visibility_depth_tol
        if close.mean() >= cfg.visibility_min:
            out.append(idx)
    return out


def per_image_associate(preds: list, scene, maps: ChannelMaps,
                        cfg: EvalConfig = EvalConfig(),
                        visible: list | None = None) -> dict:
    """Match predictions to visible same-category GTs by max bbox IoU.

    Each GT is matched at most once; higher-confidence predictions win.
    Returns visible GT indices, (pred, gt index) matches and unmatched preds.
    ``visible`` short-circuits the (rendering-heavy) visibility test.
    """
    cam = scene.camera
    if visible is None:
        visible = visible_gt_indices(scene, maps, cfg)
    gt_boxes = {gi: _projected_bbox(cam, scene.objects[gi].pose,
                                    scene.objects[gi].model)
                for gi in visible}
    taken = set()
    matches, unmatched = [], []
    for pred in sorted(preds, key=lambda p: -_score(p, cfg.nms_by)):
        pbox = _projected_bbox(cam, pred.pose, prediction_model(pred, scene))
        best, best_iou = None, 0.0
        for gi in visible:
            if gi in taken or scene.objects[gi].category != pred.category:
                continue
            iou = _bbox_iou(pbox, gt_boxes[gi])
            if iou > best_iou:
                best, best_iou = gi, iou
        if best is None:
            unmatched.append(pred)
        else:
            taken.add(best)
            matches.append((pred, best, best_iou))
    return {"visible": visible, "matches": matches, "unmatched": unmatched}


def prediction_model(pred, scene) -> CadModel:
    """Model used to render a prediction (retrieval is GT-given)."""
    return scene.objects[pred.detection.object_id].model


def per_image_accuracy(preds: list, scene, maps: ChannelMaps,
                       cfg: EvalConfig = EvalConfig(),
                       visible: list | None = None) -> dict:
    """Fraction of visible GTs aligned correctly by their matched prediction."""
    t = cfg.thresholds
    assoc = per_image_associate(preds, scene, maps, cfg, visible=visible)
    correct_by_cat, total_by_cat = {}, {}
    for gi in assoc["visible"]:
        cat = scene.objects[gi].category
        total_by_cat[cat] = total_by_cat.get(cat, 0) + 1
    n_correct = 0
    for pred, gi, _ in assoc["matches"]:
        obj = scene.objects[gi]
        if pose_is_correct(pred.pose, obj.pose, obj.model.symmetry,
                           t.t_max, t.r_max, t.s_max):
            n_correct += 1
            correct_by_cat[obj.category] = correct_by_cat.get(obj.category, 0) + 1
    n_vis = len(assoc["visible"])
    return {
        "per_category": {cat: {"correct": correct_by_cat.get(cat, 0),
                               "total": tot,
                               "accuracy": correct_by_cat.get(cat, 0) / tot}
                         for cat, tot in sorted(total_by_cat.items())},
        "instance_accuracy": n_correct / n_vis if n_vis else 0.0,
        "n_visible_gt": n_vis,
        "n_matched": len(assoc["matches"]),
        "n_false_positive": len(assoc["unmatched"]),
    }


# ---------------------------------------------------------------------------
# F-score and AP-mesh
# ---------------------------------------------------------------------------

def _nn_dist(a: np.ndarray, b: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Per-point distance from a to its nearest neighbor in b."""
    out = np.empty(len(a))
    for s in range(0, len(a), chunk):
        d = np.linalg.norm(a[s:s + chunk, None, :] - b[None, :, :], axis=2)
        out[s:s + chunk] = d.min(axis=1)
    return out


def f_score(points_a: np.ndarray, points_b: np.ndarray, rho: float) -> float:
    """Harmonic mean of point-set precision and recall at distance rho."""
    if len(points_a) == 0 or len(points_b) == 0:
        raise ValueError("point sets must be non-empty")
    precision = float((_nn_dist(points_a, points_b) < rho).mean())
    recall = float((_nn_dist(points_b, points_a) < rho).mean())
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def surface_points(model: CadModel, pose: Pose, n: int, seed: int) -> np.ndarray:
    """Seeded area-uniform surface samples transformed by the pose."""
    from .synthscene import sample_surface

    rng = np.random.default_rng(np.random.SeedSequence([0xF5C0, seed]))
    pts, _ = sample_surface(model.vertices, model.faces,
                            model.face_corner_normals, n, rng)
    return apply_pose(pose, pts)


def gt_longest_side(gt: GroundTruth) -> float:
    """Longest side of the GT-aligned model's oriented bounding box."""
    side = float(np.max(gt.model.extent * gt.pose.s))
    if side <= 0:
        raise ValueError("degenerate GT bounding box")
    return side


AP_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))


def _average_precision(confidences, flags, n_gt) -> float:
    """All-point interpolated area under the precision-recall curve."""
    if n_gt == 0:
        return 0.0
    order = np.argsort(-np.asarray(confidences), kind="stable")
    tp = np.asarray(flags, dtype=float)[order]
    cum_tp = np.cumsum(tp)
    recall = cum_tp / n_gt
    precision = cum_tp / np.arange(1, len(tp) + 1)
    mrec = np.concatenate([[0.0], recall])
    mpre = np.concatenate([[1.0], precision])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))


def ap_mesh(per_image: list, cfg: EvalConfig = EvalConfig(),
            rho: float | None = None) -> dict:
    """AP50 and APmean from per-image association results.

    ``per_image`` is a list of dicts with keys scene, maps, preds and an
    optional precomputed "visible" list. Point clouds are rescaled so the
    GT's longest oriented bbox side equals 10; a matched prediction is a
    true positive at threshold t iff F^rho > t.
    """
    rho = cfg.rho if rho is None else rho
    records = {}   # category -> list of (confidence, f_value or None)
    n_gt = {}
    for item in per_image:
        scene, maps, preds = item["scene"], item["maps"], item["preds"]
        assoc = per_image_associate(preds, scene, maps, cfg,
                                    visible=item.get("visible"))
        gts = scene_ground_truths(scene)
        for gi in assoc["visible"]:
            cat = gts[gi].category
            n_gt[cat] = n_gt.get(cat, 0) + 1
        for pred, gi, _ in assoc["matches"]:
            gt = gts[gi]
            scale = 10.0 / gt_longest_side(gt)
            # same sampling seed on both sides: identical aligned models
            # score exactly F = 1 at any sample count
            pa = surface_points(prediction_model(pred, scene), pred.pose,
                                cfg.n_surface_samples, cfg.surface_seed) * scale
            pb = surface_points(gt.model, gt.pose, cfg.n_surface_samples,
                                cfg.surface_seed) * scale
            f = f_score(pa, pb, rho)
            records.setdefault(pred.category, []).append((_score(pred, cfg.nms_by), f))
        for pred in assoc["unmatched"]:
            records.setdefault(pred.category, []).append(
                (_score(pred, cfg.nms_by), None))

    return ap_from_records(records, n_gt, rho)


def ap_from_records(records: dict, n_gt: dict, rho: float) -> dict:
    """AP table from per-category (confidence, F or None-for-FP) records."""
    per_category = {}
    for cat in sorted(n_gt):
        recs = records.get(cat, [])
        confs = [c for c, _ in recs]
        aps = {}
        for t in AP_THRESHOLDS:
            flags = [(f is not None) and (f > t) for _, f in recs]
            aps[t] = _average_precision(confs, flags, n_gt[cat])
        per_category[cat] = {"ap50": aps[0.5],
                             "ap_mean": float(np.mean(list(aps.values()))),
                             "ap_by_threshold": aps,
                             "n_gt": n_gt[cat]}
    if per_category:
        ap50 = float(np.mean([v["ap50"] for v in per_category.values()]))
        ap_mean = float(np.mean([v["ap_mean"] for v in per_category.values()]))
    else:
        ap50 = ap_mean = 0.0
    return {"per_category": per_category, "ap50": ap50, "ap_mean": ap_mean,
            "rho": rho}


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------

def spearman(x, y) -> float:
    """Spearman rank correlation with average ranks for ties."""
    def ranks(v):
        v = np.asarray(v, dtype=float)
        order = np.argsort(v, kind="stable")
        r = np.empty(len(v))
        r[order] = np.arange(1, len(v) + 1)
        for val in np.unique(v):
            sel = v == val
            if sel.sum() > 1:
                r[sel] = r[sel].mean()
        return r

    rx, ry = ranks(x), ranks(y)
    sx, sy = rx.std(), ry.std()
    if sx == 0 or sy == 0:
        return 0.0
    rho = float(((rx - rx.mean()) * (ry - ry.mean())).mean() / (sx * sy))
    return float(np.clip(round(rho, 12), -1.0, 1.0))


def calibration_curve(pairs: list, n_bins: int = 10) -> dict:
    """Equal-count reliability bins over (sigma, correctness) pairs.

    Returns per-bin mean confidence and empirical accuracy plus the Spearman
    rank correlation between them. Bin count shrinks when samples are few.
    """
    if not pairs:
        raise ValueError("no predictions to calibrate")
    n_bins = min(n_bins, len(pairs))
    arr = np.asarray(sorted(pairs, key=lambda p: p[0]), dtype=float)
    bins = []
    for chunk in np.array_split(arr, n_bins):
        bins.append({"confidence": float(chunk[:, 0].mean()),
                     "accuracy": float(chunk[:, 1].mean()),
                     "count": int(len(chunk))})
    rho = spearman([b["confidence"] for b in bins],
                   [b["accuracy"] for b in bins]) if len(bins) > 1 else 1.0
    return {"bins": bins, "spearman": rho, "n": len(pairs)}


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve (rank statistic, ties averaged)."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("need both classes for ROC-AUC")
    greater = (pos[:, None] > neg[None, :]).sum()
    equal = (pos[:, None] == neg[None, :]).sum()
    return float((greater + 0.5 * equal) / (len(pos) * len(neg)))
