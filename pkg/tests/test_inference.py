import numpy as np
import pytest

from mrfdet.dataset import DatasetSpec, synth_dataset
from mrfdet.detector_net import BackboneSpec, Toggles, build_network
from mrfdet.gradcheck import COMPOSED_TOL, PRIMITIVE_TOL, run_suite
from mrfdet.inference import (collect_detections, detect_image,
                              evaluate_detector)


@pytest.fixture(scope="module")
def small_det():
    return build_network(BackboneSpec(32, (8, 8, 8, 8)), 3,
                         Toggles(mrf=False, extra_level=True, seg_mode="off"),
                         seed=1, dtype=np.float32)


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    d = tmp_path_factory.mktemp("infdata")
    synth_dataset(DatasetSpec(image_size=32, num_images=4, small_side=(8, 16),
                              large_side=(18, 24), seed=11), d)
    return d


class TestDetectImage:
    def test_outputs_are_valid_boxes(self, small_det):
        img = np.random.default_rng(0).random((3, 32, 32))
        dets = detect_image(small_det, img)
        for d in dets:
            assert 0 <= d.xmin < d.xmax <= 32
            assert 0 <= d.ymin < d.ymax <= 32
            assert d.class_id in (1, 2, 3)
            assert 0 < d.score <= 1.0

    def test_sorted_by_score(self, small_det):
        img = np.random.default_rng(1).random((3, 32, 32))
        dets = detect_image(small_det, img)
        scores = [d.score for d in dets]
        assert scores == sorted(scores, reverse=True)

    def test_max_keep_respected(self, small_det):
        img = np.random.default_rng(2).random((3, 32, 32))
        assert len(detect_image(small_det, img, max_keep=5)) <= 5

    def test_high_threshold_prunes(self, small_det):
        img = np.random.default_rng(3).random((3, 32, 32))
        loose = detect_image(small_det, img, score_threshold=0.01)
        tight = detect_image(small_det, img, score_threshold=0.9)
        assert len(tight) <= len(loose)

    def test_deterministic(self, small_det):
        img = np.random.default_rng(4).random((3, 32, 32))
        a = detect_image(small_det, img)
        b = detect_image(small_det, img)
        assert [(d.xmin, d.score, d.class_id) for d in a] == \
               [(d.xmin, d.score, d.class_id) for d in b]


class TestEvaluateDetector:
    def test_untrained_scores_low(self, small_det, small_data):
        report = evaluate_detector(small_det, small_data)
        assert 0.0 <= report.map < 0.5  # untrained: essentially noise

    def test_same_model_same_report(self, small_det, small_data):
        a = evaluate_detector(small_det, small_data)
        b = evaluate_detector(small_det, small_data)
        assert a.per_class_ap == b.per_class_ap
        assert a.map == b.map and a.tp == b.tp and a.fp == b.fp

    def test_collect_keys_match_dataset(self, small_det, small_data):
        dets, gts = collect_detections(small_det, small_data)
        assert set(dets) == set(gts)
        assert len(gts) == 4


class TestGradcheckSuite:
    def test_tensor_module(self):
        for name, err, tol in run_suite(("tensor",)):
            assert err < tol, f"{name}: {err} >= {tol}"

    def test_loss_module(self):
        for name, err, tol in run_suite(("loss",)):
            assert err < tol, f"{name}: {err} >= {tol}"

    def test_mrf_module(self):
        for name, err, tol in run_suite(("mrf",)):
            assert err < tol, f"{name}: {err} >= {tol}"

    def test_net_module(self):
        for name, err, tol in run_suite(("net",)):
            assert err < tol, f"{name}: {err} >= {tol}"

    def test_tolerances(self):
        assert PRIMITIVE_TOL == 1e-5
        assert COMPOSED_TOL == 1e-4

    def test_suite_covers_required_primitives(self):
        names = [n for n, _, _ in run_suite(("tensor", "loss"))]
        text = " ".join(names)
        for needle in ("conv", "transposed", "relu", "softmax", "conf_loss",
                       "loc_loss", "seg_loss", "total_loss"):
            assert needle in text, needle
