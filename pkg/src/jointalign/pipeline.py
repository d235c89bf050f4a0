"""Dataset materialization, training runs and evaluation reports."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from pathlib import Path

import numpy as np

from .align_net import AlignNet, make_optimizer
from .config import RunConfig
from .geometry import pose_is_correct
from .metrics import (
    ap_mesh,
    calibration_curve,
    nms_3d,
    per_image_accuracy,
    per_image_associate,
    per_scene_accuracy,
    roc_auc,
    scene_ground_truths,
    visible_gt_indices,
)
from .refine import (
    AlignmentPrediction,
    IdentityPredictor,
    OraclePredictor,
    RefineConfig,
    category_priors_from_config,
    refine_scene,
)
from .synthscene import (
    dataset_paths,
    detect_objects,
    load_channels,
    load_scene,
    perturb_channels,
    rasterize,
    sample_scene,
    save_channels,
    save_scene,
)
from .training import TrainScene, TrainingDiverged, train_epoch

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "step", "l_align", "l_cls", "lr", "wallclock")


# ---------------------------------------------------------------------------
# dataset generation and loading
# ---------------------------------------------------------------------------

def generate_dataset(cfg: RunConfig, out_dir, count: int, seed: int | None = None,
                     workers: int | None = None) -> dict:
    """Materialize scenes and clean channel renders plus a manifest."""
    out = Path(out_dir)
    (out / "scenes").mkdir(parents=True, exist_ok=True)
    (out / "channels").mkdir(parents=True, exist_ok=True)
    seed = cfg.seed if seed is None else seed
    workers = workers if workers is not None else cfg.workers

    def build_one(i):
        scene = sample_scene(cfg.scene, seed + i)
        maps = rasterize(scene)
        scene_path, chan_path = dataset_paths(out, i)
        save_scene(scene_path, scene)
        save_channels(chan_path, maps)

    if workers > 1 and count > 1:
        import multiprocessing as mp

        with mp.Pool(workers) as pool:
            pool.map(_GenTask(cfg, out, seed), range(count))
    else:
        for i in range(count):
            build_one(i)

    manifest = {
        "format_version": 1,
        "count": count,
        "seed": seed,
        "config_hash": cfg.config_hash(),
        "config": cfg.to_dict(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True,
                                                  indent=2))
    if count == 0:
        logger.warning("generated an empty dataset at %s", out)
    return manifest


class _GenTask:
    """Picklable per-scene generation task for worker pools."""

    def __init__(self, cfg, out, seed):
        self.cfg, self.out, self.seed = cfg, Path(out), seed

    def __call__(self, i):
        scene = sample_scene(self.cfg.scene, self.seed + i)
        maps = rasterize(scene)
        scene_path, chan_path = dataset_paths(self.out, i)
        save_scene(scene_path, scene)
        save_channels(chan_path, maps)


def load_manifest(data_dir) -> dict:
    return json.loads((Path(data_dir) / "manifest.json").read_text())


def prepare_scene(scene, clean_maps, cfg: RunConfig, index: int) -> TrainScene:
    """Detections from clean maps, then noise on the network-input channels."""
    detections = detect_objects(scene, clean_maps, cfg.detect,
                                seed=scene.seed)
    maps = perturb_channels(clean_maps, cfg.noise, seed=scene.seed + 77)
    return TrainScene(scene=scene, maps=maps, detections=detections)


class DiskDataset:
    """Lazy view over a materialized dataset directory.

    Detections are deterministic per scene, so they are memoized across
    epochs (the dominant preparation cost is their visibility renders).
    """

    def __init__(self, data_dir, cfg: RunConfig, limit: int | None = None,
                 offset: int = 0):
        self.dir = Path(data_dir)
        self.cfg = cfg
        total = load_manifest(data_dir)["count"]
        self.offset = offset
        self.count = max(0, min(total - offset, limit if limit is not None
                                else total))
        self._detections = {}

    def __len__(self):
        return self.count

    def _load(self, i: int) -> TrainScene:
        scene_path, chan_path = dataset_paths(self.dir, self.offset + i)
        scene = load_scene(scene_path)
        clean = load_channels(chan_path)
        if i not in self._detections:
            self._detections[i] = detect_objects(scene, clean, self.cfg.detect,
                                                 seed=scene.seed)
        maps = perturb_channels(clean, self.cfg.noise, seed=scene.seed + 77)
        return TrainScene(scene=scene, maps=maps,
                          detections=self._detections[i])

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return [self._load(i) for i in range(*idx.indices(self.count))]
        if idx < 0 or idx >= self.count:
            raise IndexError(idx)
        return self._load(idx)


class StreamDataset:
    """Regenerates scenes from seeds instead of reading them from disk."""

    def __init__(self, cfg: RunConfig, count: int, seed: int | None = None):
        self.cfg = cfg
        self.count = count
        self.seed = cfg.seed if seed is None else seed

    def __len__(self):
        return self.count

    def _load(self, i: int) -> TrainScene:
        scene = sample_scene(self.cfg.scene, self.seed + i)
        return prepare_scene(scene, rasterize(scene), self.cfg, i)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return [self._load(i) for i in range(*idx.indices(self.count))]
        if idx < 0 or idx >= self.count:
            raise IndexError(idx)
        return self._load(idx)


# ---------------------------------------------------------------------------
# training entry
# ---------------------------------------------------------------------------

def append_log_rows(path, rows):
    path = Path(path)
    new_file = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        if new_file:
            writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in LOG_COLUMNS})


def scale_range_lookup(cfg: RunConfig):
    return lambda category: cfg.scene.category_scale_range(category)


def run_training(cfg: RunConfig, dataset, out_checkpoint, log_path=None,
                 resume=None, epochs: int | None = None) -> dict:
    """Train for the configured epochs, checkpointing after each one."""
    out_checkpoint = Path(out_checkpoint)
    if resume:
        net, state = AlignNet.load(resume)
        optimizer = make_optimizer(net.params, lr=cfg.train.lr,
                                   algorithm=cfg.train.optimizer)
        if state is not None:
            optimizer.load_state(state)
        logger.info("resumed from %s at step %d", resume, optimizer.step_count)
    else:
        net = AlignNet(cfg.net, seed=cfg.seed)
        optimizer = make_optimizer(net.params, lr=cfg.train.lr,
                                   algorithm=cfg.train.optimizer)

    epochs = cfg.train.epochs if epochs is None else epochs
    summary = {"epochs": [], "steps": optimizer.step_count,
               "dataset_scenes": len(dataset), "config_hash": cfg.config_hash(),
               "net": cfg.net.to_json(),
               "input": {"n_bbox": cfg.input.n_bbox, "n_cad": cfg.input.n_cad,
                         "n_mul": cfg.input.n_mul},
               "config": cfg.to_dict(),
               "wallclock_seconds": 0.0}
    for epoch in range(epochs):
        rows = []
        try:
            metrics = train_epoch(net, optimizer, dataset, cfg.input,
                                  cfg.train, seed=cfg.seed,
                                  scale_range_for=scale_range_lookup(cfg),
                                  log_rows=rows, epoch_index=epoch)
        except TrainingDiverged:
            logger.exception("epoch %d diverged; last-good checkpoint kept",
                             epoch)
            raise
        finally:
            if log_path and rows:
                append_log_rows(log_path, rows)
        net.save(out_checkpoint, optimizer.state())
        summary["epochs"].append(metrics)
        summary["steps"] = optimizer.step_count
        summary["wallclock_seconds"] += metrics["seconds"]
        (out_checkpoint.parent / (out_checkpoint.name + ".summary.json")
         ).write_text(json.dumps(summary, indent=2, sort_keys=True))
        logger.info("epoch %d: l_align %.3f l_cls %.3f (%.1f img/s)",
                    epoch, metrics["l_align_mean"], metrics["l_cls_mean"],
                    metrics["images_per_second"])
    return summary


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _predictor_for(mode: str, net: AlignNet | None, gts: dict):
    if mode == "net":
        return net.forward
    if mode == "oracle":
        return OraclePredictor(gts)
    if mode == "identity":
        return IdentityPredictor()
    raise ValueError(f"unknown predictor mode '{mode}'")


def predictions_at_iteration(trace, dets, models, iteration: int) -> list:
    """Rebuild each detection's chosen-track prediction at a given iteration."""
    by_id = {d.object_id: d for d in dets}
    preds = []
    for oid, tracks in trace.tracks.items():
        rec = tracks[trace.chosen[oid]]
        det = by_id[oid]
        preds.append(AlignmentPrediction(
            detection=det, category=det.category, model_id=models[oid].id,
            pose=rec.poses[iteration], sigma=rec.sigma,
            detector_confidence=det.confidence))
    return preds


def run_evaluation(cfg: RunConfig, dataset, net: AlignNet | None = None,
                   mode: str = "net", max_scenes: int | None = None,
                   collect: list | None = None) -> dict:
    """Refine every scene and aggregate the full metric report."""
    n = len(dataset) if max_scenes is None else min(max_scenes, len(dataset))
    if n == 0:
        raise ValueError("no scenes to evaluate")
    priors = category_priors_from_config(cfg.scene)
    n_iters = cfg.refine.n_updates + 1

    scene_cat = {}      # per-scene protocol accumulators
    image_cat = {}
    iter_hits = np.zeros(n_iters)
    iter_total = 0.0
    sigma_pairs = []
    ap_inputs = []
    n_passes, pass_seconds = 0, 0.0
    n_skipped = 0

    for i in range(n):
        rec = dataset[i]
        scene, maps, dets = rec.scene, rec.maps, rec.detections
        models = {idx: o.model for idx, o in enumerate(scene.objects)}
        gts = {idx: o.pose for idx, o in enumerate(scene.objects)}
        predictor = _predictor_for(mode, net, gts)
        t0 = time.monotonic()
        preds, trace = refine_scene(predictor, maps, scene.camera, dets,
                                    models, cfg.input, priors,
                                    seed=cfg.seed + 31 * i, cfg=cfg.refine)
        pass_seconds += time.monotonic() - t0
        n_passes += trace.forward_passes
        n_skipped += len(trace.skipped)
        if collect is not None:
            collect.append({"scene": scene, "maps": maps, "preds": preds,
                            "trace": trace})

        kept = nms_3d(preds, cfg.eval.nms_radius, cfg.eval.nms_by)
        srep = per_scene_accuracy(kept, scene_ground_truths(scene), cfg.eval)
        for cat, rec_c in srep["per_category"].items():
            agg = scene_cat.setdefault(cat, [0, 0])
            agg[0] += rec_c["correct"]
            agg[1] += rec_c["total"]

        visible = visible_gt_indices(scene, maps, cfg.eval)
        irep = per_image_accuracy(preds, scene, maps, cfg.eval, visible=visible)
        for cat, rec_c in irep["per_category"].items():
            agg = image_cat.setdefault(cat, [0, 0])
            agg[0] += rec_c["correct"]
            agg[1] += rec_c["total"]

        # accuracy vs refinement iteration for the sigma-chosen track
        for k in range(n_iters):
            preds_k = predictions_at_iteration(trace, dets, models, k)
            rep_k = per_image_accuracy(preds_k, scene, maps, cfg.eval,
                                       visible=visible)
            iter_hits[k] += rep_k["instance_accuracy"] * rep_k["n_visible_gt"]
        iter_total += irep["n_visible_gt"]

        # sigma calibration pairs: prediction correct iff its associated GT
        # is aligned within thresholds
        assoc = per_image_associate(preds, scene, maps, cfg.eval,
                                    visible=visible)
        matched = {id(p): gi for p, gi, _ in assoc["matches"]}
        t = cfg.eval.thresholds
        for p in preds:
            gi = matched.get(id(p))
            ok = gi is not None and pose_is_correct(
                p.pose, scene.objects[gi].pose,
                scene.objects[gi].model.symmetry, t.t_max, t.r_max, t.s_max)
            sigma_pairs.append((p.sigma, float(ok)))

        ap_inputs.append({"scene": scene, "maps": maps, "preds": preds,
                          "visible": visible})

    ap = ap_mesh(ap_inputs, cfg.eval)
    calib = calibration_curve(sigma_pairs, n_bins=10) if sigma_pairs else None
    labels = [int(c) for _, c in sigma_pairs]
    auc = None
    if labels and 0 < sum(labels) < len(labels):
        auc = roc_auc([s for s, _ in sigma_pairs], labels)

    def table(agg):
        total_c = sum(v[0] for v in agg.values())
        total_n = sum(v[1] for v in agg.values())
        return {
            "per_category": {cat: {"correct": v[0], "total": v[1],
                                   "accuracy": v[0] / v[1] if v[1] else 0.0}
                             for cat, v in sorted(agg.items())},
            "instance_accuracy": total_c / total_n if total_n else 0.0,
            "class_accuracy": float(np.mean(
                [v[0] / v[1] for v in agg.values() if v[1]])) if agg else 0.0,
        }

    return {
        "n_scenes": n,
        "mode": mode,
        "per_scene": table(scene_cat),
        "per_image": table(image_cat),
        "accuracy_by_iteration": [float(h / iter_total) if iter_total else 0.0
                                  for h in iter_hits],
        "ap_mesh": ap,
        "calibration": calib,
        "roc_auc": auc,
        "skipped_detections": n_skipped,
        "timing": {
            "forward_passes": n_passes,
            "total_seconds": pass_seconds,
            "ms_per_pass": 1000.0 * pass_seconds / n_passes if n_passes else 0.0,
        },
    }


def classifier_examples_probe(cfg: RunConfig, net: AlignNet, dataset,
                              per_object: int, seed: int,
                              max_scenes: int | None = None) -> list:
    """(sigma, label) pairs for region-sampled poses on held-out scenes."""
    from .sparse_input import assemble_batch, build_block
    from .training import sample_classifier_pose
    from .geometry import SymmetryTag

    n = len(dataset) if max_scenes is None else min(max_scenes, len(dataset))
    pairs = []
    for i in range(n):
        rec = dataset[i]
        scene, maps = rec.scene, rec.maps
        for j in range(per_object):
            blocks, labels = [], []
            for det in rec.detections[:cfg.input.n_mul]:
                obj = scene.objects[det.object_id]
                sym = obj.model.symmetry
                pose, label = sample_classifier_pose(
                    obj.pose, sym, seed + 997 * i + 31 * j + det.object_id,
                    tie_xy_scale=sym in (SymmetryTag.FOUR_FOLD,
                                         SymmetryTag.INFINITE))
                blocks.append(build_block(maps, scene.camera, det, obj.model,
                                          pose, cfg.input,
                                          seed=seed + 13 * i + j,
                                          det_id=len(blocks)))
                labels.append(label)
            if not blocks:
                continue
            for batch in assemble_batch(blocks, cfg.input.n_mul):
                deltas = net.forward(batch)
                for delta, label in zip(deltas, labels):
                    pairs.append((delta.sigma, label))
    return pairs


def write_report(report: dict, out_dir):
    """report.json plus plot-ready CSV tables."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=2,
                                                sort_keys=True))
    with open(out / "per_category.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["protocol", "category", "correct", "total", "accuracy"])
        for proto in ("per_scene", "per_image"):
            for cat, rec in report[proto]["per_category"].items():
                writer.writerow([proto, cat, rec["correct"], rec["total"],
                                 f"{rec['accuracy']:.6f}"])
            writer.writerow([proto, "ALL(instance)", "", "",
                             f"{report[proto]['instance_accuracy']:.6f}"])
            writer.writerow([proto, "ALL(class-mean)", "", "",
                             f"{report[proto]['class_accuracy']:.6f}"])
    with open(out / "accuracy_by_iteration.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "instance_accuracy"])
        for k, acc in enumerate(report["accuracy_by_iteration"]):
            writer.writerow([k, f"{acc:.6f}"])
    if report.get("calibration"):
        with open(out / "calibration_bins.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bin", "confidence", "accuracy", "count"])
            for b_idx, b in enumerate(report["calibration"]["bins"]):
                writer.writerow([b_idx, f"{b['confidence']:.6f}",
                                 f"{b['accuracy']:.6f}", b["count"]])
    return out / "report.json"
