import numpy as np
import pytest

from iminer.geometry import Box, ScoredBox
from iminer.metrics import (
    average_precision,
    evaluate_detections,
    match_detections,
    pool_tp_count,
)
from iminer.offline import CandidateInstance, CandidatePool

from oracles import match_reference, random_box, random_scored_boxes


def det(box, score, label=0):
    return ScoredBox(box=box, score=score, label=label)


class TestMatchDetections:
    def test_single_exact_match(self):
        gt = [(Box(0, 0, 10, 10), 0)]
        out = match_detections([det(Box(0, 0, 10, 10), 0.9)], gt, 0.5)
        assert out[0].is_tp and out[0].gt_index == 0

    def test_two_dets_one_gt(self):
        gt = [(Box(0, 0, 10, 10), 0)]
        dets = [det(Box(0, 0, 10, 10), 0.6), det(Box(1, 1, 10, 10), 0.9)]
        out = match_detections(dets, gt, 0.5)
        assert not out[0].is_tp and out[1].is_tp

    def test_class_must_match(self):
        gt = [(Box(0, 0, 10, 10), 1)]
        out = match_detections([det(Box(0, 0, 10, 10), 0.9, label=0)], gt, 0.5)
        assert not out[0].is_tp

    def test_prefers_highest_iou(self):
        gts = [(Box(0, 0, 10, 10), 0), (Box(2, 0, 12, 10), 0)]
        out = match_detections([det(Box(1.6, 0, 11.6, 10), 0.9)], gts, 0.5)
        assert out[0].gt_index == 1

    def test_matches_bruteforce(self):
        rng = np.random.default_rng(31)
        for _ in range(200):
            dets = random_scored_boxes(rng, int(rng.integers(0, 20)), n_labels=2)
            gts = [
                (random_box(rng), int(rng.integers(0, 2)))
                for _ in range(int(rng.integers(0, 20)))
            ]
            got = [m.is_tp for m in match_detections(dets, gts, 0.5)]
            assert got == match_reference(dets, gts, 0.5)

    def test_each_gt_matched_once(self):
        rng = np.random.default_rng(37)
        for _ in range(50):
            dets = random_scored_boxes(rng, 15, n_labels=2)
            gts = [(random_box(rng), int(rng.integers(0, 2))) for _ in range(8)]
            matched = [
                m.gt_index for m in match_detections(dets, gts, 0.3) if m.gt_index is not None
            ]
            assert len(matched) == len(set(matched))


class TestAveragePrecision:
    def test_all_tp_full_coverage(self):
        assert average_precision([True, True, True], n_gt=3) == pytest.approx(1.0)

    def test_zero_tp(self):
        assert average_precision([False, False], n_gt=4) == 0.0

    def test_hand_curve(self):
        # ranked (TP, FP, TP) with two ground truths
        assert average_precision([True, False, True], n_gt=2) == pytest.approx(5 / 6)

    def test_eleven_point_hand_curve(self):
        ap11 = average_precision([True, False, True], n_gt=2, eleven_point=True)
        assert ap11 == pytest.approx((6 * 1.0 + 5 * (2 / 3)) / 11)

    def test_no_gt_no_dets_excluded(self):
        assert average_precision([], n_gt=0) is None

    def test_no_gt_with_dets_scores_zero(self):
        assert average_precision([False], n_gt=0) == 0.0

    def test_bounded(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            n = int(rng.integers(1, 30))
            flags = [bool(rng.random() < 0.4) for _ in range(n)]
            n_gt = max(sum(flags), int(rng.integers(1, 20)))
            ap = average_precision(flags, n_gt)
            assert 0.0 <= ap <= 1.0


def _random_eval_case(rng, n_images=4):
    dets = {}
    gts = {}
    for i in range(n_images):
        dets[i] = random_scored_boxes(rng, int(rng.integers(0, 10)), n_labels=3)
        gts[i] = [(random_box(rng), int(rng.integers(0, 3))) for _ in range(int(rng.integers(0, 6)))]
    return dets, gts


class TestEvaluateDetections:
    def test_rank_only_score_dependence(self):
        rng = np.random.default_rng(41)
        for _ in range(20):
            dets, gts = _random_eval_case(rng)
            report = evaluate_detections(dets, gts, [0, 1, 2], iou_thresholds=(0.5,))
            squashed = {
                i: [ScoredBox(box=d.box, score=d.score**3, label=d.label) for d in v]
                for i, v in dets.items()
            }
            report2 = evaluate_detections(squashed, gts, [0, 1, 2], iou_thresholds=(0.5,))
            assert report.nap50 == pytest.approx(report2.nap50, abs=1e-12)

    def test_absent_class_excluded_from_mean(self):
        dets = {0: [det(Box(0, 0, 10, 10), 0.9, label=0)]}
        gts = {0: [(Box(0, 0, 10, 10), 0)]}
        report = evaluate_detections(dets, gts, [0, 7], iou_thresholds=(0.5,))
        assert report.per_threshold[0.5][7] is None
        assert report.nap50 == pytest.approx(1.0)

    def test_json_round_trip_is_valid(self):
        import json

        dets = {0: [det(Box(0, 0, 10, 10), 0.9, label=0)]}
        gts = {0: [(Box(0, 0, 10, 10), 0)]}
        report = evaluate_detections(dets, gts, [0])
        payload = json.loads(report.to_json())
        assert payload["nap50"] == pytest.approx(1.0)
        assert "0.5" in payload["per_threshold"]


def make_pool(instances_by_class):
    return CandidatePool(
        instances={
            c: [
                CandidateInstance(
                    image_id=img, det_index=i, box=b, label=c, raw_score=s
                )
                for i, (img, b, s) in enumerate(members)
            ]
            for c, members in instances_by_class.items()
        },
        stats={},
    )


class TestPoolTpCount:
    def test_empty_pool(self):
        pool = make_pool({1: []})
        assert pool_tp_count(pool, {}) == {1: (0, 0)}

    def test_exact_planted_instances(self):
        gt_box = Box(10, 10, 30, 30)
        pool = make_pool({1: [(0, gt_box, 0.9)]})
        counts = pool_tp_count(pool, {0: [(gt_box, 1)]})
        assert counts == {1: (1, 0)}

    def test_jittered_below_threshold_is_fp(self):
        gt_box = Box(0, 0, 10, 10)
        shifted = Box(3.8, 0, 13.8, 10)  # IoU ~ 0.449
        from iminer.geometry import iou

        assert iou(gt_box, shifted) < 0.5
        pool = make_pool({1: [(0, shifted, 0.9)]})
        assert pool_tp_count(pool, {0: [(gt_box, 1)]}) == {1: (0, 1)}

    def test_wrong_class_is_fp(self):
        gt_box = Box(0, 0, 10, 10)
        pool = make_pool({1: [(0, gt_box, 0.9)]})
        assert pool_tp_count(pool, {0: [(gt_box, 2)]}) == {1: (0, 1)}
