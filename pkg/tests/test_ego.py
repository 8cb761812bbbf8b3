import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from oracles import random_rotation
from sceneflow import synth
from sceneflow.core import GeometryError, RigidTransform, ScenePair
from sceneflow.ego import (IcpConfig, IcpEgoMotion, estimate_ego_motion, geman_mcclure_weights,
                           icp, motion_compensate, relative_error, voxel_downsample)


def box_cloud(rng, n=3000):
    """Points on three orthogonal planes: well constrained for ICP."""
    u = rng.uniform(-10, 10, size=(n, 2))
    k = n // 3
    floor = np.column_stack([u[:k], np.zeros(k)])
    wall_x = np.column_stack([np.full(k, 8.0), u[k:2 * k, 0], u[k:2 * k, 1] / 4 + 2.5])
    wall_y = np.column_stack([u[2 * k:, 0], np.full(n - 2 * k, -7.0), u[2 * k:, 1] / 4 + 2.5])
    return np.vstack([floor, wall_x, wall_y])


class TestVoxel:
    def test_centroids(self):
        pts = np.array([[0.1, 0.1, 0.1], [0.3, 0.3, 0.3], [1.2, 0.0, 0.0]])
        out = voxel_downsample(pts, 1.0)
        assert np.allclose(out, [[0.2, 0.2, 0.2], [1.2, 0.0, 0.0]])

    def test_empty(self):
        assert voxel_downsample(np.zeros((0, 3)), 0.5).shape == (0, 3)


def test_geman_mcclure_weights():
    w = geman_mcclure_weights(np.array([0.0, 0.1, 1.0]), 0.1)
    assert w[0] == 1.0 and w[1] == pytest.approx(0.25)
    assert np.all(np.diff(w) < 0)


class TestIcpConfig:
    def test_schedule(self):
        cfg = IcpConfig(cutoff=1.0, initial_cutoff=4.0, cutoff_decay=0.5)
        assert [cfg.cutoff_at(i) for i in range(4)] == [4.0, 2.0, 1.0, 1.0]

    def test_rejects_bad(self):
        with pytest.raises(ValueError):
            IcpConfig(cutoff=2.0, initial_cutoff=1.0)
        with pytest.raises(ValueError):
            IcpConfig(voxel_size=0.0)


class TestIcp:
    def test_identity_pair(self):
        cloud = box_cloud(np.random.default_rng(0))
        T = icp(cloud, cloud).transform
        assert np.allclose(T.as_matrix(), np.eye(4), atol=1e-9)

    def test_recovers_small_motion(self):
        rng = np.random.default_rng(1)
        cloud = box_cloud(rng)
        truth = RigidTransform.from_yaw(np.deg2rad(3), [0.5, -0.3, 0.0])
        target = truth.apply(cloud)
        t_err, r_err = relative_error(icp(cloud, target).transform, truth)
        assert t_err < 0.05 and np.degrees(r_err) < 0.5

    def test_synthetic_scene(self):
        pair = synth.generate(synth.flat_scene(0))
        t_err, r_err = relative_error(estimate_ego_motion(pair), pair.ego_motion)
        assert t_err < 0.05 and np.degrees(r_err) < 0.5

    def test_histories(self):
        pair = synth.generate(synth.flat_scene(1))
        result = icp(pair.cloud_t, pair.cloud_t_delta, IcpConfig(max_iters=10))
        assert result.iterations == 10 == len(result.residuals) == len(result.inlier_counts)

    def test_too_few_correspondences(self):
        a = np.random.default_rng(2).normal(size=(20, 3))
        with pytest.raises(GeometryError):
            icp(a, a + 100.0)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            icp(np.zeros((0, 3)), np.ones((4, 3)))


class TestMotionCompensate:
    def test_prefers_provided(self):
        pair = synth.generate(synth.flat_scene(2))
        moved, T, source = motion_compensate(pair)
        assert source == "provided" and T is pair.ego_motion
        assert np.allclose(moved, pair.ego_motion.apply(pair.cloud_t))

    def test_falls_back_to_icp(self):
        pair = synth.generate(synth.flat_scene(2)).replace(ego_motion=None)
        _, _, source = motion_compensate(pair)
        assert source == "icp"

    def test_forced_icp(self):
        pair = synth.generate(synth.flat_scene(2))
        assert motion_compensate(pair, use_provided=False)[2] == "icp"


def test_relative_error_zero():
    T = RigidTransform(random_rotation(np.random.default_rng(3)), [1.0, 2.0, 3.0])
    t_err, r_err = relative_error(T, T)
    assert t_err == 0.0 and r_err == pytest.approx(0.0, abs=1e-7)


class TestEstimator:
    def test_params_round_trip(self):
        est = IcpEgoMotion(max_iters=7)
        assert clone(est).get_params()["max_iters"] == 7

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            IcpEgoMotion().transform(np.zeros((1, 3)))

    def test_fit_transform(self):
        rng = np.random.default_rng(4)
        cloud = box_cloud(rng)
        truth = RigidTransform.from_yaw(0.02, [0.2, 0.1, 0.0])
        est = IcpEgoMotion().fit(cloud, truth.apply(cloud))
        assert np.abs(est.transform(cloud) - truth.apply(cloud)).max() < 0.05
        assert est.n_iter_ >= 1


def test_scene_pair_without_ego():
    pair = ScenePair(np.zeros((3, 3)), np.zeros((3, 3)))
    assert pair.ego_motion is None
