import numpy as np
import pytest

from mrfdet.anchors import Box
from mrfdet.eval_metrics import (DEFAULT_AREA_RANGES, EvalConfig, EvalReport,
                                 ap_by_area, average_precision,
                                 coco_style_summary, evaluate_detections,
                                 greedy_match)
from mrfdet.tensor_core import ShapeError


class TestGreedyMatch:
    def test_simple_tp_fp(self):
        gts = [Box(0, 0, 10, 10)]
        dets = [Box(0, 0, 10, 10, 0, 0.9), Box(50, 50, 60, 60, 0, 0.8)]
        flags, matched = greedy_match(dets, gts, 0.5)
        assert flags == [True, False]
        assert matched == [True]

    def test_duplicate_detection_is_fp(self):
        gts = [Box(0, 0, 10, 10)]
        dets = [Box(0, 0, 10, 10, 0, 0.9), Box(0.5, 0, 10.5, 10, 0, 0.8)]
        flags, _ = greedy_match(dets, gts, 0.5)
        assert flags == [True, False]

    def test_higher_score_claims_first(self):
        gts = [Box(0, 0, 10, 10)]
        dets = [Box(0.5, 0, 10.5, 10, 0, 0.3), Box(0, 0, 10, 10, 0, 0.9)]
        flags, _ = greedy_match(dets, gts, 0.5)
        # flags come back in descending score order: 0.9 first.
        assert flags == [True, False]

    def test_strictly_above_threshold(self):
        # IoU exactly at the threshold does not match.
        gts = [Box(0, 0, 10, 10)]
        dets = [Box(0, 0, 10, 5, 0, 0.9)]  # IoU exactly 0.5
        flags, matched = greedy_match(dets, gts, 0.5)
        assert flags == [False] and matched == [False]

    def test_ignored_gts_absorb_detections(self):
        ignore = [Box(0, 0, 10, 10)]
        dets = [Box(0, 0, 10, 10, 0, 0.9), Box(50, 50, 60, 60, 0, 0.8)]
        flags, _ = greedy_match(dets, [], 0.5, ignore_gts=ignore)
        assert flags == [None, False]

    def test_real_gt_preferred_over_ignore(self):
        gts = [Box(0, 0, 10, 10)]
        ignore = [Box(0, 0, 10, 10)]
        flags, matched = greedy_match([Box(0, 0, 10, 10, 0, 0.9)], gts, 0.5, ignore)
        assert flags == [True] and matched == [True]


class TestAveragePrecision:
    def test_perfect_detector(self):
        assert average_precision([True, True], 2, "eleven_point") == pytest.approx(1.0)
        assert average_precision([True, True], 2, "all_point") == pytest.approx(1.0)

    def test_all_false(self):
        assert average_precision([False, False], 3, "all_point") == 0.0
        assert average_precision([False], 3, "eleven_point") == 0.0

    def test_tp_fp_tp_all_point(self):
        # precision (1, 1/2, 2/3) at recall (1/2, 1/2, 1): envelope gives
        # 0.5 * 1 + 0.5 * 2/3 = 5/6.
        ap = average_precision([True, False, True], 2, "all_point")
        assert ap == pytest.approx(5 / 6)

    def test_tp_fp_tp_eleven_point(self):
        # 6 recall points up to 0.5 see precision 1, the other 5 see 2/3.
        ap = average_precision([True, False, True], 2, "eleven_point")
        assert ap == pytest.approx((6 * 1.0 + 5 * (2 / 3)) / 11)

    def test_missed_gts_cap_recall(self):
        # One TP against 2 gts: all-point AP is bounded by recall 0.5.
        assert average_precision([True], 2, "all_point") == pytest.approx(0.5)

    def test_no_gts_no_dets_excluded(self):
        assert average_precision([], 0, "all_point") is None

    def test_no_gts_with_dets_zero(self):
        assert average_precision([False, False], 0, "all_point") == 0.0

    def test_no_dets_with_gts_zero(self):
        assert average_precision([], 4, "eleven_point") == 0.0

    def test_monotone_in_prepended_tp(self):
        base = [True, False, False, True]
        better = [True] + base
        for interp in ("eleven_point", "all_point"):
            assert (average_precision(better, 3, interp)
                    >= average_precision(base, 3, interp))


def two_image_fixture():
    gts = {
        "a": [Box(0, 0, 10, 10, 1), Box(20, 20, 40, 40, 2)],
        "b": [Box(5, 5, 15, 15, 1)],
    }
    dets = {
        "a": [Box(0, 0, 10, 10, 1, 0.9),       # TP class 1
              Box(21, 21, 41, 41, 2, 0.8),     # TP class 2
              Box(50, 50, 60, 60, 1, 0.7)],    # FP class 1
        "b": [Box(5, 5, 15, 15, 1, 0.6)],      # TP class 1
    }
    return dets, gts


class TestEvaluateDetections:
    def test_counts(self):
        dets, gts = two_image_fixture()
        rep = evaluate_detections(dets, gts, EvalConfig())
        assert rep.tp == 3 and rep.fp == 1 and rep.missed == 0

    def test_per_class_ap(self):
        dets, gts = two_image_fixture()
        rep = evaluate_detections(dets, gts, EvalConfig(interpolation="all_point"))
        # Class 1: [TP at 0.9, FP at 0.7, TP at 0.6] against 2 gts -> 5/6.
        assert rep.per_class_ap[1] == pytest.approx(5 / 6)
        assert rep.per_class_ap[2] == pytest.approx(1.0)
        assert rep.map == pytest.approx((5 / 6 + 1.0) / 2)

    def test_detection_only_class_scores_zero(self):
        dets = {"a": [Box(0, 0, 10, 10, 3, 0.9)]}
        gts = {"a": [Box(0, 0, 10, 10, 1)]}
        rep = evaluate_detections(dets, gts, EvalConfig())
        assert rep.per_class_ap[3] == 0.0
        assert rep.per_class_ap[1] == 0.0

    def test_area_bands_ignore_semantics(self):
        # A gt of area 400 (small band) and one of 1600 (medium band).
        gts = {"a": [Box(0, 0, 20, 20, 1), Box(30, 0, 70, 40, 1)]}
        dets = {"a": [Box(0, 0, 20, 20, 1, 0.9), Box(30, 0, 70, 40, 1, 0.8)]}
        bands = ap_by_area(dets, gts, EvalConfig(interpolation="all_point"))
        # In the S band the medium gt is ignored, so its matching detection
        # is dropped rather than counted as an FP.
        assert bands["S"] == pytest.approx(1.0)
        assert bands["M"] == pytest.approx(1.0)
        assert bands["L"] is None

    def test_out_of_band_fp_still_counts(self):
        gts = {"a": [Box(0, 0, 20, 20, 1)]}
        dets = {"a": [Box(0, 0, 20, 20, 1, 0.9), Box(40, 40, 60, 60, 1, 0.8)]}
        bands = ap_by_area(dets, gts, EvalConfig(interpolation="all_point"))
        # The stray detection overlaps no gt at all: an FP even in band S.
        assert bands["S"] == pytest.approx(1.0)  # FP ranks after the TP

    def test_global_score_ordering_across_images(self):
        gts = {"a": [Box(0, 0, 10, 10, 1)], "b": [Box(0, 0, 10, 10, 1)]}
        dets = {"a": [Box(50, 50, 60, 60, 1, 0.9)],  # highest-scoring is an FP
                "b": [Box(0, 0, 10, 10, 1, 0.5)]}
        rep = evaluate_detections(dets, gts, EvalConfig(interpolation="all_point"))
        # Sequence is [FP, TP] against 2 gts: AP = 0.5 * 0.5 = 0.25.
        assert rep.per_class_ap[1] == pytest.approx(0.25)

    def test_format_table(self):
        dets, gts = two_image_fixture()
        rep = evaluate_detections(dets, gts, EvalConfig())
        text = rep.format_table()
        assert text.splitlines()[0] == "class  AP"
        assert "mAP" in text and "TP=3" in text

    def test_config_validation(self):
        with pytest.raises(ShapeError):
            EvalConfig(iou_threshold=1.5)
        with pytest.raises(ShapeError):
            EvalConfig(interpolation="trapezoid")
        with pytest.raises(ShapeError):
            EvalConfig(area_ranges=(("A", 0.0, 10.0), ("B", 5.0, 20.0)))


class TestCocoSummary:
    def test_perfect_detector_all_ones(self):
        gts = {"a": [Box(0, 0, 20, 20, 1)]}
        dets = {"a": [Box(0, 0, 20, 20, 1, 0.99)]}
        text = coco_style_summary(dets, gts)
        assert "AP@0.5        1.0000" in text
        assert "AP@0.75       1.0000" in text
        assert "AP@[0.5:0.95] 1.0000" in text

    def test_loose_detection_fails_high_thresholds(self):
        gts = {"a": [Box(0, 0, 20, 20, 1)]}
        dets = {"a": [Box(3, 3, 23, 23, 1, 0.99)]}  # IoU ~ 0.57
        text = coco_style_summary(dets, gts)
        assert "AP@0.5        1.0000" in text
        assert "AP@0.75       0.0000" in text
