import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from oracles import brute_chamfer, central_diff
from sceneflow.core import RigidTransform
from sceneflow.flow import (FlowNets, FlowOptConfig, NeuralFlowPrior, chamfer_with_grad,
                            compose_total_flow, objective, optimize_flow, truncated_chamfer)

SMALL = dict(hidden_layers=2, hidden_width=16)


class TestChamfer:
    def test_identical_is_zero(self):
        a = np.random.default_rng(0).normal(size=(50, 3))
        assert truncated_chamfer(a, a) == 0.0

    def test_symmetric(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(30, 3)), rng.normal(size=(40, 3))
        assert truncated_chamfer(a, b) == pytest.approx(truncated_chamfer(b, a), abs=1e-12)

    def test_non_negative_and_bounded(self):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=(30, 3)), rng.normal(size=(40, 3)) + 100.0
        value = truncated_chamfer(a, b, tau=2.0)
        assert value == pytest.approx(2 * 4.0)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(30, 3)), rng.normal(size=(40, 3))
        assert truncated_chamfer(a[::-1], b[rng.permutation(40)]) == pytest.approx(
            truncated_chamfer(a, b), abs=1e-12)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(4)
        a, b = rng.normal(size=(25, 3)) * 2, rng.normal(size=(35, 3)) * 2
        assert truncated_chamfer(a, b, 1.5) == pytest.approx(brute_chamfer(a, b, 1.5), abs=1e-12)

    def test_gradient_fd(self):
        rng = np.random.default_rng(5)
        a, b = rng.normal(size=(20, 3)), rng.normal(size=(25, 3))
        _, g = chamfer_with_grad(a, b, 1.0)
        num = central_diff(lambda x: truncated_chamfer(x, b, 1.0), a, h=1e-7)
        assert np.allclose(g, num, atol=1e-5)

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            truncated_chamfer(np.zeros((0, 3)), np.zeros((2, 3)))


class TestConfig:
    def test_widths(self):
        assert FlowOptConfig().widths == (3,) + (128,) * 8 + (3,)

    @pytest.mark.parametrize("kw", [dict(patience=0), dict(tau=0.0), dict(max_iters=0),
                                    dict(input_scale=0.0)])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            FlowOptConfig(**kw)


def test_objective_gradient_fd():
    cfg = FlowOptConfig(output_scale=0.1, seed=2, **SMALL)
    nets = FlowNets.initialize(cfg)
    rng = np.random.default_rng(6)
    src, tgt = rng.normal(size=(15, 3)), rng.normal(size=(15, 3)) + 0.2
    _, _, g_fw, g_bw = objective(nets, src, tgt, 1.0)
    flat_fw = nets.forward.get_flat()
    coords = rng.choice(flat_fw.size, 30, replace=False)

    def value(theta):
        probe = FlowNets(nets.forward.copy(), nets.backward, nets.input_scale)
        probe.forward.set_flat(theta)
        return objective(probe, src, tgt, 1.0)[0]

    analytic = np.concatenate([g.ravel() for g in g_fw])[coords]
    numeric = []
    for c in coords:
        tp, tm = flat_fw.copy(), flat_fw.copy()
        tp[c] += 1e-6
        tm[c] -= 1e-6
        numeric.append((value(tp) - value(tm)) / 2e-6)
    numeric = np.array(numeric)
    assert np.abs(analytic - numeric).max() <= 1e-4 * np.abs(numeric).max()
    assert len(g_bw) == len(nets.backward.params)


class TestOptimize:
    def test_translation_recovered(self):
        rng = np.random.default_rng(7)
        src = rng.uniform(-2, 2, size=(200, 3))
        tgt = src + [0.3, -0.1, 0.0]
        cfg = FlowOptConfig(lr=0.01, max_iters=400, input_scale=0.5, **SMALL)
        flow = optimize_flow(src, tgt, cfg)
        assert np.abs(flow - [0.3, -0.1, 0.0]).mean() < 0.03

    def test_history_non_increasing_best(self):
        rng = np.random.default_rng(8)
        src = rng.normal(size=(60, 3))
        res = optimize_flow(src, src + 0.1, FlowOptConfig(max_iters=50, **SMALL),
                            return_result=True)
        assert res.iterations == len(res.loss_history) == 50
        assert all(b <= a for a, b in zip(res.best_history, res.best_history[1:]))
        assert res.best_loss == min(res.loss_history)

    def test_patience_stops(self):
        src = np.random.default_rng(9).normal(size=(20, 3))
        res = optimize_flow(src, src, FlowOptConfig(patience=3, max_iters=1000, **SMALL),
                            return_result=True)
        # zero-initialized output: the first loss is already optimal
        assert res.iterations == 4 and res.best_loss == 0.0

    def test_deterministic(self):
        rng = np.random.default_rng(10)
        src, tgt = rng.normal(size=(50, 3)), rng.normal(size=(50, 3))
        cfg = FlowOptConfig(max_iters=20, **SMALL)
        assert np.array_equal(optimize_flow(src, tgt, cfg), optimize_flow(src, tgt, cfg))

    def test_nets_reproduce_best_flow(self):
        rng = np.random.default_rng(11)
        src = rng.normal(size=(40, 3))
        res = optimize_flow(src, src + 0.2, FlowOptConfig(max_iters=30, **SMALL),
                            return_result=True)
        assert np.allclose(res.nets.forward_flow(src), res.flow, atol=1e-12)


def test_compose_total_flow():
    pts = np.array([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]])
    T = RigidTransform(np.eye(3), [1.0, 0.0, 0.0])
    out = compose_total_flow(pts, T, np.array([[0.0, 0.5, 0.0], [0.0, 0.0, 0.0]]))
    assert np.allclose(out, [[1.0, 0.5, 0.0], [1.0, 0.0, 0.0]])


class TestEstimator:
    def test_clone(self):
        assert clone(NeuralFlowPrior(patience=5)).get_params()["patience"] == 5

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            NeuralFlowPrior().predict(np.zeros((1, 3)))

    def test_fit_predict(self):
        rng = np.random.default_rng(12)
        src = rng.normal(size=(40, 3))
        est = NeuralFlowPrior(max_iters=10, **SMALL).fit(src, src + 0.1)
        assert est.n_iter_ == 10
        assert np.allclose(est.predict(src), est.flow_, atol=1e-12)
        assert est.predict(np.zeros((0, 3))).shape == (0, 3)
