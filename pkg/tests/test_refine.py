import numpy as np
import pytest
from sklearn.base import clone

from oracles import random_rotation
from sceneflow.core import GeometryError, RigidTransform
from sceneflow.refine import (PiecewiseRigidRefiner, RefineConfig, kabsch, ransac_rigid,
                              refine_flow)


def rand_T(rng, scale=1.0):
    return RigidTransform(random_rotation(rng), rng.normal(size=3) * scale)


class TestKabsch:
    def test_exact_recovery(self):
        rng = np.random.default_rng(0)
        P = rng.normal(size=(30, 3)) * 3
        T = rand_T(rng, 5)
        U = kabsch(P, T.apply(P))
        assert np.allclose(U.rotation, T.rotation, atol=1e-12)
        assert np.allclose(U.translation, T.translation, atol=1e-12)

    def test_no_reflection(self):
        P = np.random.default_rng(1).normal(size=(10, 3))
        Q = P * [1.0, 1.0, -1.0]
        assert np.linalg.det(kabsch(P, Q).rotation) == pytest.approx(1.0)

    def test_planar_points(self):
        rng = np.random.default_rng(2)
        P = np.column_stack([rng.normal(size=(20, 2)), np.zeros(20)])
        T = RigidTransform.from_yaw(0.4, [1.0, 2.0, 0.0])
        assert np.allclose(kabsch(P, T.apply(P)).as_matrix(), T.as_matrix(), atol=1e-12)

    def test_weights_ignore_outlier(self):
        rng = np.random.default_rng(3)
        P = rng.normal(size=(20, 3))
        T = rand_T(rng)
        Q = T.apply(P)
        Q[0] += 10.0
        w = np.ones(20)
        w[0] = 0.0
        assert np.allclose(kabsch(P, Q, w).as_matrix(), T.as_matrix(), atol=1e-12)

    def test_degenerate(self):
        line = np.outer(np.arange(5.0), [1.0, 2.0, 3.0])
        with pytest.raises(GeometryError):
            kabsch(line, line)
        with pytest.raises(GeometryError):
            kabsch(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_bad_weights(self):
        P = np.random.default_rng(4).normal(size=(5, 3))
        with pytest.raises(ValueError):
            kabsch(P, P, -np.ones(5))


class TestRansac:
    def test_outliers(self):
        rng = np.random.default_rng(5)
        P = rng.uniform(-2, 2, size=(200, 3))
        T = RigidTransform.from_yaw(0.05, [1.0, 0.2, 0.0])
        F = T.apply(P) - P
        bad = rng.choice(200, 80, replace=False)
        F[bad] += rng.uniform(-3, 3, size=(80, 3))
        fit = ransac_rigid(P, F)
        assert np.allclose(fit.transform.as_matrix(), T.as_matrix(), atol=1e-3)
        assert fit.cluster_size == 200 and fit.inlier_count >= 120

    def test_deterministic_per_cluster(self):
        rng = np.random.default_rng(6)
        P, F = rng.normal(size=(50, 3)), rng.normal(size=(50, 3))
        a = ransac_rigid(P, F, cluster_id=3).transform.as_matrix()
        b = ransac_rigid(P, F, cluster_id=3).transform.as_matrix()
        assert np.array_equal(a, b)

    def test_too_small(self):
        with pytest.raises(GeometryError):
            ransac_rigid(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_all_collinear(self):
        P = np.outer(np.arange(10.0), [1.0, 0.0, 0.0])
        with pytest.raises(GeometryError):
            ransac_rigid(P, np.zeros_like(P), RefineConfig(ransac_iters=5))


class TestRefineFlow:
    def two_objects(self):
        rng = np.random.default_rng(7)
        a = rng.uniform(-0.5, 0.5, size=(60, 3))
        b = rng.uniform(-0.5, 0.5, size=(60, 3)) + [5.0, 0, 0]
        far = np.array([[20.0, 20.0, 0.0]])
        cloud = np.vstack([a, b, far])
        T = RigidTransform.from_yaw(0.02, [0.8, 0.0, 0.0])
        flow = np.zeros_like(cloud)
        flow[:60] = T.apply(a) - a + rng.normal(0, 0.02, size=(60, 3))
        flow[60:120] = rng.normal(0, 0.01, size=(60, 3))
        flow[120] = [1.0, 1.0, 1.0]
        return cloud, flow, T

    def test_rigid_and_static(self):
        cloud, flow, T = self.two_objects()
        out, clusters, fits = refine_flow(cloud, flow, return_details=True)
        assert clusters.n_clusters == 2
        assert np.abs(out[:60] - (T.apply(cloud[:60]) - cloud[:60])).max() < 0.05
        member = clusters.labels[60:120] >= 0
        assert member.sum() > 50 and not out[60:120][member].any()
        assert [f.snapped for f in fits] == [False, True]

    def test_noise_keeps_flow(self):
        cloud, flow, _ = self.two_objects()
        assert np.array_equal(refine_flow(cloud, flow)[120], flow[120])

    def test_bad_config(self):
        with pytest.raises(ValueError):
            RefineConfig(dbscan_eps=0.0)


class TestEstimator:
    def test_clone(self):
        assert clone(PiecewiseRigidRefiner(dbscan_eps=0.8)).get_params()["dbscan_eps"] == 0.8

    def test_fit_transform(self):
        cloud, flow, _ = TestRefineFlow().two_objects()
        est = PiecewiseRigidRefiner()
        out = est.fit_transform(cloud, flow)
        assert np.array_equal(out, est.transform(cloud))
        assert est.labels_.shape == (len(cloud),)

    def test_transform_other_cloud(self):
        cloud, flow, _ = TestRefineFlow().two_objects()
        est = PiecewiseRigidRefiner().fit(cloud, flow)
        with pytest.raises(ValueError):
            est.transform(cloud[:-1])
