import json
import math

import numpy as np
import pytest

from oracles import brute_metrics
from sceneflow import synth
from sceneflow.core import BoxTrack, GeometryError, RigidTransform, ScenePair
from sceneflow.evaluation import (CSV_HEADER, ClassStats, MetricsReport, PointClass,
                                  accuracy_masks, classify_points, compute_metrics, diagnostics,
                                  dynamic_fraction, evaluate_pair, expected_correspondences,
                                  generate_flow_labels, gt_chamfer_violation,
                                  resample_dynamic_ratio)


def moving_box_pair(speed=5.0, delta_t=0.1):
    """One tracked box moving along x; ego at rest."""
    rng = np.random.default_rng(0)
    inside = rng.uniform(-0.5, 0.5, size=(20, 3))
    outside = rng.uniform(-0.5, 0.5, size=(10, 3)) + [10.0, 0.0, 0.0]
    cloud = np.vstack([inside, outside])
    box0 = BoxTrack("car", [0, 0, 0], [2, 2, 2])
    box1 = BoxTrack("car", [speed * delta_t, 0, 0], [2, 2, 2], frame_index=1)
    return ScenePair(cloud, cloud, delta_t=delta_t, ego_motion=RigidTransform.identity(),
                     tracks_t=[box0], tracks_t_delta=[box1])


class TestLabels:
    def test_box_and_ego(self):
        pair = moving_box_pair()
        flow, valid = generate_flow_labels(pair)
        assert valid.all()
        assert np.allclose(flow[:20], [0.5, 0.0, 0.0])
        assert not flow[20:].any()

    def test_unmatched_track_invalid(self):
        pair = moving_box_pair().replace(tracks_t_delta=[])
        _, valid = generate_flow_labels(pair)
        assert not valid[:20].any() and valid[20:].all()

    def test_rotating_box(self):
        cloud = np.array([[1.0, 0.0, 0.0]])
        R = RigidTransform.from_yaw(np.pi / 2).rotation
        pair = ScenePair(cloud, cloud, ego_motion=RigidTransform.identity(),
                         tracks_t=[BoxTrack("a", [0, 0, 0], [4, 4, 4])],
                         tracks_t_delta=[BoxTrack("a", [0, 0, 0], [4, 4, 4], R)])
        flow, _ = generate_flow_labels(pair)
        assert np.allclose(flow, [[-1.0, 1.0, 0.0]])

    def test_first_track_wins(self):
        cloud = np.zeros((1, 3))
        a0, a1 = BoxTrack("a", [0, 0, 0], [2, 2, 2]), BoxTrack("a", [1, 0, 0], [2, 2, 2])
        b0, b1 = BoxTrack("b", [0, 0, 0], [2, 2, 2]), BoxTrack("b", [0, 1, 0], [2, 2, 2])
        pair = ScenePair(cloud, cloud, ego_motion=RigidTransform.identity(),
                         tracks_t=[a0, b0], tracks_t_delta=[b1, a1])
        assert np.allclose(generate_flow_labels(pair)[0], [[1.0, 0.0, 0.0]])

    def test_requires_ego(self):
        with pytest.raises(GeometryError):
            generate_flow_labels(moving_box_pair().replace(ego_motion=None))

    def test_synthetic_labels_match_gt(self):
        pair = synth.generate(synth.flat_scene(0))
        flow, valid = generate_flow_labels(pair)
        assert valid.all()
        assert np.abs(flow - pair.gt_flow).max() < 1e-9


class TestClassify:
    def test_classes(self):
        pair = moving_box_pair()
        labels, valid = generate_flow_labels(pair)
        classes = classify_points(pair, labels, valid=valid)
        assert (classes[:20] == PointClass.DYNAMIC_FG).all()
        assert (classes[20:] == PointClass.STATIC_BG).all()

    def test_slow_box_is_static_fg(self):
        pair = moving_box_pair(speed=0.4)
        classes = classify_points(pair, generate_flow_labels(pair)[0])
        assert (classes[:20] == PointClass.STATIC_FG).all()

    def test_threshold_inclusive(self):
        # binary-exact step so the speed is exactly 0.5
        pair = moving_box_pair(speed=0.5, delta_t=0.125)
        classes = classify_points(pair, generate_flow_labels(pair)[0], threshold_speed=0.5)
        assert (classes[:20] == PointClass.DYNAMIC_FG).all()

    def test_unlabeled(self):
        pair = moving_box_pair().replace(tracks_t_delta=[])
        labels, valid = generate_flow_labels(pair)
        classes = classify_points(pair, labels, valid=valid)
        assert (classes[:20] == PointClass.UNLABELED).all()


class TestMetrics:
    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        n = 400
        gt = rng.normal(size=(n, 3)) * rng.choice([0.0, 0.05, 1.0], size=(n, 1))
        pred = gt + rng.normal(size=(n, 3)) * rng.choice([0.01, 0.08, 0.5], size=(n, 1))
        classes = rng.integers(-1, 3, size=n)
        valid = rng.uniform(size=n) < 0.9
        report = compute_metrics(pred, gt, classes, valid)
        ref = brute_metrics(pred, gt, classes, valid)
        for key, want in ref.items():
            s = report.classes[key]
            assert s.count == want["count"]
            assert abs(s.epe - want["epe"]) <= 1e-12
            assert abs(s.acc_relax - want["accr"]) <= 1e-12
            assert abs(s.acc_strict - want["accs"]) <= 1e-12

    def test_perfect_prediction(self):
        pair = moving_box_pair()
        labels, _ = generate_flow_labels(pair)
        report = evaluate_pair(pair, labels)
        assert report.avg3 == 0.0
        assert report.classes["dyn_fg"].acc_strict == 1.0

    def test_zero_gt_relative_branch_skipped(self):
        ok = accuracy_masks(np.array([[0.2, 0, 0]]), np.zeros((1, 3)), 0.1, 0.1)
        assert not ok[0]

    def test_strict_thresholds(self):
        gt = np.array([[1.0, 0, 0], [1.0, 0, 0]])
        pred = gt + [[0.049, 0, 0], [0.05, 0, 0]]
        assert accuracy_masks(pred, gt, 0.05, 0.05).tolist() == [True, False]

    def test_absent_class(self):
        report = compute_metrics(np.zeros((2, 3)), np.ones((2, 3)), [2, 2])
        assert report.absent == ["dyn_fg", "stat_fg"]
        assert report.avg3 == pytest.approx(math.sqrt(3))
        data = json.loads(report.to_json())
        assert data["epe"]["dyn_fg"] is None and data["counts"]["stat_bg"] == 2

    def test_merge_pools_points(self):
        rng = np.random.default_rng(2)
        gt, pred = rng.normal(size=(60, 3)), rng.normal(size=(60, 3))
        classes = rng.integers(0, 3, size=60)
        whole = compute_metrics(pred, gt, classes)
        parts = MetricsReport.merge([compute_metrics(pred[:25], gt[:25], classes[:25]),
                                     compute_metrics(pred[25:], gt[25:], classes[25:])])
        for key in whole.classes:
            assert parts.classes[key].epe == pytest.approx(whole.classes[key].epe, abs=1e-12)

    def test_class_stats_add(self):
        s = ClassStats(1, 2.0, 1, 0) + ClassStats(3, 1.0, 2, 2)
        assert (s.count, s.epe, s.acc_relax) == (4, 0.75, 0.75)
        assert math.isnan(ClassStats().epe)

    def test_csv_row(self):
        report = compute_metrics(np.zeros((1, 3)), np.zeros((1, 3)), [0])
        row = report.csv_row("s")
        assert len(row.split(",")) == len(CSV_HEADER.split(","))
        assert row.startswith("s,0.000000")

    def test_shape_checks(self):
        with pytest.raises(ValueError):
            compute_metrics(np.zeros((2, 3)), np.zeros((2, 3)), [0])
        with pytest.raises(ValueError):
            compute_metrics(np.zeros((1, 3)), np.zeros((2, 3)), [0, 0])


class TestExpectedCorrespondences:
    def test_reference_value(self):
        assert expected_correspondences(90000, 8192) == pytest.approx(745.65, abs=0.01)

    def test_full_sampling(self):
        assert expected_correspondences(100, 100) == 100

    def test_domain(self):
        with pytest.raises(ValueError):
            expected_correspondences(10, 11)
        with pytest.raises(ValueError):
            expected_correspondences(0, 0)

    def test_monte_carlo(self):
        rng = np.random.default_rng(3)
        hits = [len(np.intersect1d(rng.choice(1000, 100, replace=False),
                                   rng.choice(1000, 100, replace=False))) for _ in range(2000)]
        assert np.mean(hits) == pytest.approx(expected_correspondences(1000, 100), rel=0.05)


class TestViolation:
    def test_correlated_zero(self):
        pair = synth.generate(synth.flat_scene(1, mode="correlated"))
        assert gt_chamfer_violation(pair) == pytest.approx(0.0, abs=1e-9)

    def test_independent_positive(self):
        assert gt_chamfer_violation(synth.generate(synth.flat_scene(1))) > 0.01

    def test_needs_gt(self):
        with pytest.raises(GeometryError):
            gt_chamfer_violation(ScenePair(np.ones((1, 3)), np.ones((1, 3))))


class TestResample:
    def test_ratio_and_size(self):
        pair = synth.generate(synth.flat_scene(2))
        out = resample_dynamic_ratio(pair, 0.3, 600, seed=1)
        assert len(out.cloud_t) == len(out.cloud_t_delta) == 600
        assert dynamic_fraction(out) == pytest.approx(0.3, abs=0.01)

    def test_zero_ratio(self):
        pair = synth.generate(synth.flat_scene(2))
        assert dynamic_fraction(resample_dynamic_ratio(pair, 0.0, 500)) == 0.0

    def test_domain(self):
        pair = synth.generate(synth.flat_scene(2))
        with pytest.raises(ValueError):
            resample_dynamic_ratio(pair, 1.5, 10)


def test_diagnostics_report():
    pairs = [synth.generate(synth.flat_scene(s)) for s in range(2)]
    report = diagnostics(pairs)
    assert len(report["scenes"]) == 2
    assert sum(report["dynamic_ratio_histogram"]["counts"]) == 2
    assert report["expected_correspondences"][0]["expected"] == pytest.approx(745.65, abs=0.01)
    json.dumps(report)
