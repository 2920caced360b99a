import math

import numpy as np
import pytest

from iminer.config import MiningConfig
from iminer.geometry import Box
from iminer.metrics import evaluate_detections
from iminer.offline import detect_image
from iminer.online import ParameterVector
from iminer.toy.benchmark import (
    background_confusion,
    evaluate_model,
    run_benchmark,
)
from iminer.toy.learner import (
    FEATURE_GAIN,
    ToyLearner,
    apply_deltas,
    box_deltas,
    head_losses,
    run_training,
)
from iminer.toy.world import WorldInfeasibleError, generate_world


def worlds_equal(a, b):
    if (a.class_means != b.class_means).any() or (a.ssl_projection != b.ssl_projection).any():
        return False
    for sa, sb in zip(
        (*a.base_scenes, *a.shot_scenes, *a.test_scenes),
        (*b.base_scenes, *b.shot_scenes, *b.test_scenes),
    ):
        if sa.image_id != sb.image_id or sa.split != sb.split:
            return False
        if (sa.bg_latent != sb.bg_latent).any() or (sa.bg_texture != sb.bg_texture).any():
            return False
        for oa, ob in zip(sa.objects, sb.objects):
            if oa.box != ob.box or oa.label != ob.label or oa.annotated != ob.annotated:
                return False
            if (oa.latent != ob.latent).any() or (oa.det_feature != ob.det_feature).any():
                return False
    for key in a.ssl_fmaps:
        if (a.ssl_fmaps[key].data != b.ssl_fmaps[key].data).any():
            return False
    return True


class TestGenerateWorld:
    def test_same_seed_bit_identical(self, tiny_cfg):
        assert worlds_equal(generate_world(tiny_cfg), generate_world(tiny_cfg))

    def test_different_seed_differs(self, tiny_cfg, tiny_world):
        other = generate_world(tiny_cfg.replace(seed=1))
        assert not worlds_equal(tiny_world, other)

    def test_zero_co_occurrence_no_implicit(self, tiny_cfg):
        world = generate_world(tiny_cfg.replace(co_occurrence=0.0, seed=2))
        assert all(not s.implicit_objects for s in world.base_scenes)

    def test_implicit_exactly_novel_in_base(self, tiny_world):
        novel = set(tiny_world.novel_classes)
        for scene in tiny_world.base_scenes:
            for obj in scene.objects:
                assert obj.annotated == (obj.label not in novel)
        for scene in (*tiny_world.shot_scenes, *tiny_world.test_scenes):
            assert all(o.annotated for o in scene.objects)

    @pytest.mark.parametrize("seed", [1, 2, 3])
    def test_implicit_count_in_binomial_interval(self, seed):
        cfg = MiningConfig(seed=seed)
        world = generate_world(cfg)
        n_slots = sum(len(s.objects) for s in world.base_scenes)
        observed = sum(len(s.implicit_objects) for s in world.base_scenes)
        lo, hi = _binomial_interval(n_slots, cfg.co_occurrence, 0.99)
        assert lo <= observed <= hi

    def test_infeasible_config_raises(self):
        bad = MiningConfig(n_base_scenes=3, n_test_scenes=2, min_objects=1, max_objects=1)
        with pytest.raises(WorldInfeasibleError):
            generate_world(bad)

    def test_shot_counts(self, tiny_world, tiny_cfg):
        assert len(tiny_world.shot_scenes) == tiny_cfg.shots * tiny_cfg.n_novel_classes
        assert len(tiny_world.shots()) == len(tiny_world.shot_scenes)

    def test_world_save_load_round_trip(self, tiny_world, tmp_path):
        from iminer.toy.io import load_world, save_world

        save_world(tiny_world, tmp_path / "w")
        loaded = load_world(tmp_path / "w")
        assert worlds_equal(tiny_world, loaded)
        assert loaded.config == tiny_world.config


def _binomial_interval(n, p, coverage):
    """Exact equal-tail binomial interval via log-space pmf accumulation."""
    log_pmf = [
        math.lgamma(n + 1)
        - math.lgamma(k + 1)
        - math.lgamma(n - k + 1)
        + k * math.log(p)
        + (n - k) * math.log1p(-p)
        for k in range(n + 1)
    ]
    pmf = np.exp(log_pmf)
    cdf = np.cumsum(pmf)
    tail = (1.0 - coverage) / 2.0
    lo = int(np.searchsorted(cdf, tail))
    hi = int(np.searchsorted(cdf, 1.0 - tail))
    return lo, hi


class TestToyDetector:
    def test_all_zero_weights_uniform_scores(self, tiny_world, tiny_cfg):
        learner = ToyLearner(tiny_world.n_classes, tiny_world.latent_dim, tiny_cfg)
        detector = learner.as_detector()
        scene = tiny_world.base_scenes[0]
        for ps in detector.score(scene, detector.propose(scene)):
            expected = 1.0 / (tiny_world.n_classes + 1)
            np.testing.assert_allclose(ps.class_scores, expected, atol=1e-12)

    def test_scores_sum_to_one_with_background(self, tiny_world, tiny_initial):
        detector = tiny_initial.as_detector()
        for _, scene in tiny_world.test_pairs()[:5]:
            for ps in detector.score(scene, detector.propose(scene)):
                bg = 1.0 - float(np.sum(ps.class_scores))
                assert -1e-9 <= bg <= 1.0
                total = float(np.sum(ps.class_scores)) + bg
                assert total == pytest.approx(1.0, abs=1e-9)

    def test_proposals_deterministic(self, tiny_world, tiny_initial):
        detector = tiny_initial.as_detector()
        scene = tiny_world.base_scenes[3]
        assert detector.propose(scene) == detector.propose(scene)

    def test_oracle_weights_perfect_base_ap(self):
        cfg = MiningConfig(
            seed=11,
            n_base_scenes=120,
            n_test_scenes=30,
            min_objects=1,
            max_objects=1,
            co_occurrence=0.0,
            feature_noise=0.0,
            det_noise=0.0,
            ssl_noise=0.0,
            ssl_cell_noise=0.0,
            bg_texture_noise=0.0,
            proposal_jitter=0.0,
            augment_noise=0.0,
        )
        world = generate_world(cfg)
        learner = ToyLearner(world.n_classes, world.latent_dim, cfg)
        lam = 40.0
        d = world.latent_dim
        rows = []
        for c in range(world.n_classes):
            direction = np.concatenate([world.class_means[c], np.zeros(4)])
            rows.append(lam / FEATURE_GAIN**2 * (learner.extractor @ direction))
        rows.append(lam / FEATURE_GAIN**2 * (learner.extractor @ np.concatenate([world.bg_direction, np.zeros(4)])))
        learner.w_cls = np.hstack([np.array(rows), np.zeros((world.n_classes + 1, 1))])

        report = evaluate_model(learner, None, world, cfg)
        dets = {}
        detector = learner.as_detector()
        for image_id, scene in world.test_pairs():
            dets[image_id] = [c.scored_box for c in detect_image(detector, image_id, scene, cfg.nms_iou)]
        gts = world.gts_by_image(world.test_scenes)
        full = evaluate_detections(dets, gts, world.base_classes, iou_thresholds=(0.5,))
        present = [c for c in world.base_classes if full.n_gt_per_class[c] > 0]
        assert present
        for c in present:
            assert full.per_threshold[0.5][c] == pytest.approx(1.0)

    def test_regressed_boxes_stay_valid(self, tiny_world, tiny_initial, tiny_cfg):
        detector = tiny_initial.as_detector()
        for _, scene in tiny_world.base_pairs()[:10]:
            for ps in detector.score(scene, detector.propose(scene)):
                assert 0.0 <= ps.box.x1 < ps.box.x2 <= tiny_cfg.extent
                assert 0.0 <= ps.box.y1 < ps.box.y2 <= tiny_cfg.extent
                assert 0.0 <= ps.predicted_iou <= 1.0


class TestDeltas:
    def test_round_trip(self):
        # Targets drawn near the source so the offsets stay inside the
        # production clip range.
        rng = np.random.default_rng(3)
        for _ in range(100):
            x1, y1 = rng.uniform(100, 140, 2)
            w, h = rng.uniform(5, 30, 2)
            src = Box(x1, y1, x1 + w, y1 + h)
            cx = (src.x1 + src.x2) / 2 + rng.uniform(-1.5, 1.5) * w
            cy = (src.y1 + src.y2) / 2 + rng.uniform(-1.5, 1.5) * h
            w2 = w * np.exp(rng.uniform(-1, 1))
            h2 = h * np.exp(rng.uniform(-1, 1))
            dst = Box(cx - w2 / 2, cy - h2 / 2, cx + w2 / 2, cy + h2 / 2)
            rec = apply_deltas(src, box_deltas(src, dst), extent=1000.0)
            for a, b in zip(rec.as_tuple(), dst.as_tuple()):
                assert a == pytest.approx(b, abs=1e-9)

    def test_extreme_offsets_clipped(self):
        src = Box(10, 10, 20, 20)
        out = apply_deltas(src, np.array([100.0, 0.0, 0.0, 0.0]), extent=100.0)
        assert out.x2 <= 100.0  # clamped inside the scene

    def test_zero_deltas_identity(self):
        src = Box(10, 10, 30, 40)
        assert apply_deltas(src, np.zeros(4), extent=100.0) == src


def random_batch(rng, n, d, n_classes):
    aug = np.hstack([rng.standard_normal((n, d)), np.ones((n, 1))])
    labels = rng.integers(0, n_classes + 1, n)
    reg_t = rng.standard_normal((n, 4)) * 0.5
    iou_t = rng.uniform(0, 1, n)
    pos = rng.random(n) < 0.5
    return aug, labels, reg_t, iou_t, pos


class TestGradients:
    def test_finite_difference_check(self):
        rng = np.random.default_rng(19)
        d, n_classes = 10, 4
        for _ in range(5):
            aug, labels, reg_t, iou_t, pos = random_batch(rng, 12, d, n_classes)
            if not pos.any():
                pos[0] = True
            w_cls = rng.standard_normal((n_classes + 1, d + 1)) * 0.3
            w_reg = rng.standard_normal((4, d + 1)) * 0.3
            w_iou = rng.standard_normal((1, d + 1)) * 0.3
            _, _, _, g_cls, g_reg, g_iou = head_losses(
                w_cls, w_reg, w_iou, aug, labels, reg_t, iou_t, pos
            )
            h = 1e-6
            for w, grad, pick in (
                (w_cls, g_cls, 0),
                (w_reg, g_reg, 1),
                (w_iou, g_iou, 2),
            ):
                flat = w.ravel()
                for idx in rng.choice(flat.size, size=min(20, flat.size), replace=False):
                    orig = flat[idx]
                    flat[idx] = orig + h
                    up = head_losses(w_cls, w_reg, w_iou, aug, labels, reg_t, iou_t, pos)[pick]
                    flat[idx] = orig - h
                    down = head_losses(w_cls, w_reg, w_iou, aug, labels, reg_t, iou_t, pos)[pick]
                    flat[idx] = orig
                    numeric = (up - down) / (2 * h)
                    analytic = grad.ravel()[idx]
                    scale = max(abs(numeric), abs(analytic), 1e-8)
                    assert abs(numeric - analytic) / scale <= 1e-4


class TestTrainStep:
    def test_empty_batch_no_change(self, tiny_world, tiny_cfg):
        learner = ToyLearner(tiny_world.n_classes, tiny_world.latent_dim, tiny_cfg)
        before = learner.get_params().values.copy()
        lb = learner.train_step([], {}, beta=0.5, lr=0.02, rng=np.random.default_rng(0))
        assert lb.l_cls == lb.l_reg == lb.l_iou == 0.0
        np.testing.assert_array_equal(learner.get_params().values, before)

    def test_perfect_predictions_near_zero_losses(self):
        cfg = MiningConfig(
            seed=11,
            n_base_scenes=120,
            n_test_scenes=5,
            min_objects=1,
            max_objects=1,
            co_occurrence=0.0,
            feature_noise=0.0,
            det_noise=0.0,
            bg_texture_noise=0.0,
            proposal_jitter=0.0,
            augment_noise=0.0,
            n_background_boxes=0,
        )
        world = generate_world(cfg)
        learner = ToyLearner(world.n_classes, world.latent_dim, cfg)
        lam = 60.0
        rows = []
        for c in range(world.n_classes):
            rows.append(lam / FEATURE_GAIN**2 * (learner.extractor @ np.concatenate([world.class_means[c], np.zeros(4)])))
        rows.append(lam / FEATURE_GAIN**2 * (learner.extractor @ np.concatenate([world.bg_direction, np.zeros(4)])))
        learner.w_cls = np.hstack([np.array(rows), np.zeros((world.n_classes + 1, 1))])
        # IoU head bias large: with zero jitter every positive realizes IoU 1.
        learner.w_iou = np.zeros((1, learner.latent_dim + 5))
        learner.w_iou[0, -1] = 20.0

        feats, labels, reg_t, iou_t, pos = learner._assemble_batch(
            world.base_pairs()[:8], {}, None
        )
        aug = np.hstack([feats, np.ones((feats.shape[0], 1))])
        l_cls, l_reg, l_iou, *_ = head_losses(
            learner.w_cls, learner.w_reg, learner.w_iou, aug, labels, reg_t, iou_t, pos
        )
        assert l_cls <= 1e-6
        assert l_reg == 0.0
        assert l_iou <= 1e-6

    def test_parameter_round_trip(self, tiny_world, tiny_cfg):
        learner = ToyLearner(tiny_world.n_classes, tiny_world.latent_dim, tiny_cfg)
        rng = np.random.default_rng(1)
        learner.w_cls = rng.standard_normal(learner.w_cls.shape)
        learner.w_reg = rng.standard_normal(learner.w_reg.shape)
        learner.w_iou = rng.standard_normal(learner.w_iou.shape)
        params = learner.get_params()
        other = ToyLearner(tiny_world.n_classes, tiny_world.latent_dim, tiny_cfg)
        other.set_params(params)
        np.testing.assert_array_equal(other.w_cls, learner.w_cls)
        np.testing.assert_array_equal(other.w_reg, learner.w_reg)
        np.testing.assert_array_equal(other.w_iou, learner.w_iou)
        np.testing.assert_array_equal(other.get_params().values, params.values)

    def test_wrong_length_params_rejected(self, tiny_world, tiny_cfg):
        learner = ToyLearner(tiny_world.n_classes, tiny_world.latent_dim, tiny_cfg)
        with pytest.raises(ValueError, match="length"):
            learner.set_params(ParameterVector(values=np.zeros(3)))


class TestBasePhaseConfusion:
    def test_implicit_objects_confused_more_than_base(self, tiny_world, tiny_cfg):
        learner = ToyLearner(tiny_world.n_classes, tiny_world.latent_dim, tiny_cfg)
        rng = np.random.default_rng(np.random.SeedSequence([tiny_cfg.seed, 2000]))
        run_training(
            learner, tiny_world.base_pairs(), tiny_cfg.base_iters,
            tiny_cfg.learning_rate, 0.0, rng,
        )
        implicit_rate, base_rate = background_confusion(learner, tiny_world)
        assert implicit_rate > base_rate


class TestBenchmarkDeterminism:
    def test_byte_identical_reports(self):
        cfg = MiningConfig(
            seed=1,
            n_base_scenes=40,
            n_test_scenes=10,
            base_iters=150,
            shot_iters=80,
            online_iters=80,
            finetune_iters=20,
        )
        assert run_benchmark(cfg).to_json() == run_benchmark(cfg).to_json()
