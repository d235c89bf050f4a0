"""Loss functions, pose samplers and the rollout epoch loop."""

import math

import numpy as np
import pytest

import jointalign.diff_engine as de
import jointalign.training as tr
from jointalign.align_net import AlignNet, NetConfig, make_optimizer, raw_to_delta
from jointalign.diff_engine import Tensor, grad_check
from jointalign.geometry import (
    CANONICAL_UP,
    Pose,
    SymmetryTag,
    apply_pose,
    pose_from_translation,
    quat_from_axis_angle,
    quat_multiply,
    rotation_error_deg,
    translation_vector,
    update_pose,
)
from jointalign.sparse_input import InputConfig
from jointalign.synthscene import (
    DetectConfig,
    Detection,
    SceneConfig,
    detect_objects,
    make_primitive_model,
    rasterize,
    sample_scene,
)
from jointalign.training import (
    DEFAULT_REGIONS,
    TrainConfig,
    TrainScene,
    align_loss,
    align_loss_graph,
    classifier_loss,
    draw_rotation_offset,
    label_pose,
    sample_classifier_pose,
    sample_update_pose,
    train_epoch,
)
from conftest import cube_object, make_camera, make_scene


def demo_pose(d=2.5, phi=0.2, theta=0.4, q=(1, 0, 0, 0), s=(1, 1, 1)):
    return Pose(d=d, phi=phi, theta=theta, q=np.array(q, dtype=float),
                s=np.array(s, dtype=float))


@pytest.fixture(scope="module")
def chair():
    return make_primitive_model("box-chair", None, seed=1, n_samples=1200)


class TestAlignLoss:
    def test_zero_at_gt(self, chair):
        gt = demo_pose()
        assert align_loss(gt, gt, chair, 500, seed=0) == 0.0

    def test_constant_translation_offset(self, chair):
        gt = demo_pose()
        t = translation_vector(gt) + np.array([0.1, 0, 0])
        pred = pose_from_translation(t, gt.q, gt.s)
        total = align_loss(pred, gt, chair, 1000, seed=1)
        assert total == pytest.approx(0.1 * 1000, rel=1e-6)

    def test_scale_doubled_on_x_matches_point_sum(self):
        cube = cube_object().model
        gt = Pose(d=3.0, phi=0.0, theta=0.0, q=np.array([1.0, 0, 0, 0]),
                  s=np.array([1.0, 1, 1]))
        pred = Pose(d=3.0, phi=0.0, theta=0.0, q=np.array([1.0, 0, 0, 0]),
                    s=np.array([2.0, 1, 1]))
        pts = tr.loss_points(cube, 600, seed=2)
        expected = np.abs(pts[:, 0]).sum()  # brute-force per-point |dx|
        assert align_loss(pred, gt, cube, 600, seed=2) == pytest.approx(
            expected, rel=1e-9)

    def test_symmetric_in_roles(self, chair):
        a, b = demo_pose(), demo_pose(d=2.8, phi=0.5, theta=0.6)
        assert align_loss(a, b, chair, 300, seed=3) == pytest.approx(
            align_loss(b, a, chair, 300, seed=3), rel=1e-12)

    def test_positive_under_perturbation(self, chair):
        gt = demo_pose()
        for field, pose in [
            ("d", demo_pose(d=2.5 + 1e-6)),
            ("phi", demo_pose(phi=0.2 + 1e-6)),
            ("q", demo_pose(q=quat_from_axis_angle([0, 0, 1], 1e-6))),
            ("s", demo_pose(s=(1 + 1e-6, 1, 1))),
        ]:
            assert align_loss(pose, gt, chair, 400, seed=4) > 0, field

    def test_deterministic_per_seed(self, chair):
        a = demo_pose()
        b = demo_pose(q=quat_from_axis_angle([0, 0, 1], 0.5))
        assert align_loss(a, b, chair, 200, 7) == align_loss(a, b, chair, 200, 7)
        assert align_loss(a, b, chair, 200, 7) != align_loss(a, b, chair, 200, 8)


class TestClassifierLoss:
    def test_half_confidence(self):
        assert classifier_loss(0.5, 1) == pytest.approx(math.log(2.0), rel=1e-12)

    def test_confident_correct(self):
        assert classifier_loss(1.0 - 1e-9, 1) < 1e-6

    def test_wrong_confident(self):
        assert classifier_loss(0.9, 0) == pytest.approx(-math.log(0.1), rel=1e-9)

    def test_clamped(self):
        assert np.isfinite(classifier_loss(0.0, 1))
        assert np.isfinite(classifier_loss(1.0, 0))


class TestLabelPose:
    def test_gt_is_correct(self):
        gt = demo_pose()
        assert label_pose(gt, gt, SymmetryTag.NONE) == 1

    def test_rotation_violation(self):
        gt = demo_pose()
        off = demo_pose(q=quat_from_axis_angle([0, 1, 0], math.radians(25)))
        assert label_pose(off, gt, SymmetryTag.NONE) == 0

    def test_four_fold_symmetry(self):
        gt = demo_pose()
        off = demo_pose(q=quat_multiply(gt.q, quat_from_axis_angle(
            CANONICAL_UP, math.pi / 2)))
        assert label_pose(off, gt, SymmetryTag.FOUR_FOLD) == 1
        assert label_pose(off, gt, SymmetryTag.NONE) == 0


class TestSampleUpdatePose:
    def _det(self, bbox=(30.0, 20.0, 80.0, 60.0)):
        return Detection(bbox=bbox, category="box-chair", object_id=0,
                         gt_visible_fraction=1.0)

    def test_degenerate_bbox_fixes_direction(self):
        cam = make_camera()
        gt = demo_pose()
        det = self._det(bbox=(50.0, 40.0, 50.0, 40.0))
        from jointalign.geometry import pixel_bearing

        bearing = pixel_bearing(cam, 50, 40)
        for seed in range(5):
            p = sample_update_pose(gt, det, cam, seed)
            t = translation_vector(p)
            assert np.linalg.norm(np.cross(t / np.linalg.norm(t), bearing)) < 1e-9
            assert 1.0 <= t[2] <= 5.0

    def test_azimuth_offset_uniform(self):
        rng = np.random.default_rng(0)
        draws = np.array([draw_rotation_offset(rng, 10.0, 45.0, 20.0)[1]
                          for _ in range(10_000)])
        draws = np.degrees(draws)
        assert abs(draws.mean()) < 3 * 45 / math.sqrt(3 * 10_000)
        hist, _ = np.histogram(draws, bins=10, range=(-45, 45))
        sigma = math.sqrt(10_000 * 0.1 * 0.9)
        assert np.all(np.abs(hist - 1000) < 3 * sigma)
        assert draws.min() >= -45 and draws.max() <= 45

    def test_rotation_offset_within_bounds(self):
        cam = make_camera()
        gt = demo_pose()
        det = self._det()
        for seed in range(50):
            p = sample_update_pose(gt, det, cam, seed)
            # combined Euler offsets within (10, 45, 20) degrees stay under 55
            assert rotation_error_deg(p.q, gt.q) < 55.0

    def test_seed_determinism(self):
        cam = make_camera()
        gt = demo_pose()
        det = self._det()
        a = sample_update_pose(gt, det, cam, 7)
        b = sample_update_pose(gt, det, cam, 7)
        assert a.d == b.d and np.array_equal(a.q, b.q)

    def test_scale_range_respected(self):
        cam = make_camera()
        gt = demo_pose()
        det = self._det()
        for seed in range(30):
            p = sample_update_pose(gt, det, cam, seed, scale_range=(0.9, 1.1))
            assert np.all(p.s >= 0.9) and np.all(p.s <= 1.1)


class TestSampleClassifierPose:
    def test_region1_produces_both_labels(self):
        gt = demo_pose()
        region1 = (DEFAULT_REGIONS[0],)
        labels = [sample_classifier_pose(gt, SymmetryTag.NONE, seed,
                                         regions=region1)[1]
                  for seed in range(10_000)]
        assert 0 < sum(labels) < 10_000

    def test_discrete_180_wrong_for_asymmetric(self):
        gt = demo_pose()
        off = quat_multiply(gt.q, quat_from_axis_angle(CANONICAL_UP, math.pi))
        flipped = demo_pose(q=off)
        assert label_pose(flipped, gt, SymmetryTag.NONE) == 0
        assert label_pose(flipped, gt, SymmetryTag.TWO_FOLD) == 1

    def test_discrete_90_vanishes_for_four_fold(self):
        gt = demo_pose()
        q = quat_multiply(quat_multiply(gt.q, quat_from_axis_angle(
            [1, 0, 0], math.radians(3))), quat_from_axis_angle(
            CANONICAL_UP, math.pi / 2))
        near = pose_from_translation(translation_vector(gt) + 0.05, q,
                                     gt.s * 1.05)
        assert label_pose(near, gt, SymmetryTag.FOUR_FOLD) == 1

    def test_label_distribution_balanced(self):
        gt = demo_pose()
        labels = np.array([sample_classifier_pose(gt, SymmetryTag.NONE, s)[1]
                           for s in range(20_000)])
        assert labels.mean() > 0.20
        assert labels.mean() < 0.80

    def test_determinism(self):
        gt = demo_pose()
        a = sample_classifier_pose(gt, SymmetryTag.NONE, 5)
        b = sample_classifier_pose(gt, SymmetryTag.NONE, 5)
        assert a[1] == b[1] and a[0].d == b[0].d


class TestAlignLossGraph:
    def _setup(self, n_examples=4, dtype=np.float64):
        rng = np.random.default_rng(11)
        model = cube_object().model
        poses, gts = [], []
        for _ in range(n_examples):
            poses.append(demo_pose(d=rng.uniform(2, 4), phi=rng.uniform(-1, 1),
                                   theta=rng.uniform(0.1, 0.8),
                                   s=rng.uniform(0.8, 1.2, 3)))
            gts.append(demo_pose(d=rng.uniform(2, 4), phi=rng.uniform(-1, 1),
                                 theta=rng.uniform(0.1, 0.8),
                                 q=quat_from_axis_angle([0, 0, 1],
                                                        rng.uniform(-1, 1)),
                                 s=rng.uniform(0.8, 1.2, 3)))
        raw = rng.normal(scale=0.5, size=(n_examples, 11)).astype(dtype)
        return raw, poses, gts, [model] * n_examples, list(range(n_examples))

    def test_matches_numpy_path(self):
        raw, poses, gts, models, seeds = self._setup()
        graph_val = float(align_loss_graph(Tensor(raw), poses, gts, models,
                                           128, seeds).data)
        expected = 0.0
        for i in range(len(poses)):
            newp = update_pose(poses[i], raw_to_delta(raw[i]))
            expected += align_loss(newp, gts[i], models[i], 128, seeds[i])
        assert graph_val == pytest.approx(expected, rel=1e-6)

    def test_zero_raw_distance_only(self):
        # identity update: loss equals the initial pose discrepancy
        raw, poses, gts, models, seeds = self._setup()
        raw = np.zeros_like(raw)
        graph_val = float(align_loss_graph(Tensor(raw), poses, gts, models,
                                           64, seeds).data)
        expected = sum(align_loss(p, g, m, 64, s)
                       for p, g, m, s in zip(poses, gts, models, seeds))
        assert graph_val == pytest.approx(expected, rel=1e-6)

    def test_gradient(self):
        raw, poses, gts, models, seeds = self._setup(n_examples=2)
        err = grad_check(
            lambda t: align_loss_graph(t, poses, gts, models, 32, seeds),
            raw, eps=1e-5)
        assert err < 1e-4

    def test_normalized_mode(self):
        raw, poses, gts, models, seeds = self._setup()
        a = float(align_loss_graph(Tensor(raw), poses, gts, models, 64,
                                   seeds).data)
        b = float(align_loss_graph(Tensor(raw), poses, gts, models, 64, seeds,
                                   normalize=True).data)
        assert a == pytest.approx(b * 64, rel=1e-6)


def build_dataset(n_scenes, seed0=0, count_range=(1, 3)):
    scenes = []
    for s in range(n_scenes):
        scene = sample_scene(SceneConfig(count_range=count_range), seed0 + s)
        maps = rasterize(scene)
        dets = detect_objects(scene, maps, DetectConfig(), seed=seed0 + s)
        scenes.append(TrainScene(scene=scene, maps=maps, detections=dets))
    return scenes


ICFG = InputConfig(n_bbox=40, n_cad=30, n_mul=3)


class TestTrainEpoch:
    def test_counts_and_ratio(self):
        net = AlignNet(NetConfig(n_mul=3, n_latent=4, c_latent=16), seed=0)
        opt = make_optimizer(net.params, lr=1e-3)
        dataset = build_dataset(6)
        cfg = TrainConfig(batch_images=3, n_loss=64)
        m = train_epoch(net, opt, dataset, ICFG, cfg, seed=0)
        n_det = sum(len(r.detections) for r in dataset)
        assert m["update_examples"] == 3 * n_det
        assert m["classifier_examples"] == m["update_examples"] // 3
        assert m["optimizer_steps"] == 3 * 2  # 3 rollout steps x 2 image batches

    def test_oracle_init_zero_align_loss_first_step(self, monkeypatch):
        net = AlignNet(NetConfig(n_mul=3, n_latent=4, c_latent=16), seed=1)
        opt = make_optimizer(net.params, lr=1e-12)
        dataset = build_dataset(1, count_range=(1, 1))
        monkeypatch.setattr(
            tr, "sample_update_pose",
            lambda gt, det, cam, seed, *a, **kw: gt.copy())
        rows = []
        train_epoch(net, opt, dataset, ICFG, TrainConfig(batch_images=1,
                                                         n_loss=64),
                    seed=0, log_rows=rows)
        # untrained net predicts the identity update from the GT pose
        assert rows[0]["l_align"] == pytest.approx(0.0, abs=1e-5)

    def test_empty_dataset_rejected(self):
        net = AlignNet(NetConfig(n_mul=3, n_latent=4, c_latent=16), seed=2)
        opt = make_optimizer(net.params, lr=1e-3)
        with pytest.raises(ValueError):
            train_epoch(net, opt, [], ICFG, TrainConfig(), seed=0)

    def test_nonfinite_loss_aborts(self):
        net = AlignNet(NetConfig(n_mul=3, n_latent=4, c_latent=16), seed=3)
        net.params["embed.w"].data[0, 0] = np.nan
        opt = make_optimizer(net.params, lr=1e-3)
        dataset = build_dataset(1)
        with pytest.raises(tr.TrainingDiverged):
            train_epoch(net, opt, dataset, ICFG, TrainConfig(batch_images=1),
                        seed=0)

    def test_determinism(self):
        results = []
        for _ in range(2):
            net = AlignNet(NetConfig(n_mul=3, n_latent=4, c_latent=16), seed=4)
            opt = make_optimizer(net.params, lr=1e-3)
            dataset = build_dataset(2)
            m = train_epoch(net, opt, dataset, ICFG,
                            TrainConfig(batch_images=2, n_loss=32), seed=5)
            results.append((m["l_align_mean"], m["l_cls_mean"],
                            net.params["embed.w"].data.copy()))
        assert results[0][0] == results[1][0]
        assert results[0][1] == results[1][1]
        np.testing.assert_array_equal(results[0][2], results[1][2])

    def test_loss_decreases_on_tiny_problem(self):
        net = AlignNet(NetConfig(n_mul=3, n_latent=8, c_latent=32), seed=5)
        opt = make_optimizer(net.params, lr=1e-3)
        dataset = build_dataset(4, count_range=(1, 2))
        cfg = TrainConfig(batch_images=4, n_loss=64)
        first = train_epoch(net, opt, dataset, ICFG, cfg, seed=0)
        for _ in range(6):
            last = train_epoch(net, opt, dataset, ICFG, cfg, seed=0)
        assert last["l_align_mean"] < first["l_align_mean"]
