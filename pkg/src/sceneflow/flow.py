"""Test-time scene-flow optimization with forward/backward coordinate networks.

The objective is a truncated symmetric chamfer between the forward-deformed
source and the target, plus a cycle term pulling the backward-deformed
result back onto the source.  Nearest-neighbour assignments are recomputed
every iteration and treated as constant for the gradient.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .core import check_flow, check_points
from .spatial import NeighborIndex
from .tinynet import AdamState, TinyNet, adam_step, init

log = logging.getLogger(__name__)


@dataclass
class FlowOptConfig:
    lr: float = 0.004
    patience: int = 100
    max_iters: int = 5000
    tau: float = 2.0
    min_delta: float = 1e-6
    hidden_layers: int = 8
    hidden_width: int = 128
    output_scale: float = 0.0
    # coordinates are multiplied by this before entering the networks
    input_scale: float = 1.0 / 35.0
    seed: int = 0

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.input_scale > 0:
            raise ValueError("input_scale must be positive")

    @property
    def widths(self):
        return (3,) + (self.hidden_width,) * self.hidden_layers + (3,)


def _one_sided(a, b_index, tau):
    """Mean truncated squared NN distance from ``a`` into the indexed set."""
    nn, d = b_index.query(a)
    d2 = d * d
    active = d2 < tau * tau
    loss = np.where(active, d2, tau * tau).mean()
    return loss, nn, active


def truncated_chamfer(a, b, tau=2.0):
    """Truncated symmetric chamfer: both directed means of min(d^2, tau^2)."""
    a = check_points(a, name="a", allow_empty=False)
    b = check_points(b, name="b", allow_empty=False)
    la, _, _ = _one_sided(a, NeighborIndex(b), tau)
    lb, _, _ = _one_sided(b, NeighborIndex(a), tau)
    return float(la + lb)


def chamfer_with_grad(a, b, tau, b_index=None):
    """Truncated chamfer value and its gradient w.r.t. ``a`` (NN held fixed)."""
    if b_index is None:
        b_index = NeighborIndex(b)
    b = b_index.points
    la, nn_ab, act_a = _one_sided(a, b_index, tau)
    lb, nn_ba, act_b = _one_sided(b, NeighborIndex(a), tau)
    grad = np.zeros_like(a)
    grad[act_a] = 2.0 * (a[act_a] - b[nn_ab[act_a]]) / len(a)
    contrib = -2.0 * (b[act_b] - a[nn_ba[act_b]]) / len(b)
    np.add.at(grad, nn_ba[act_b], contrib)
    return float(la + lb), grad


@dataclass
class FlowNets:
    """Forward and backward flow networks on coordinates scaled by ``input_scale``."""

    forward: TinyNet
    backward: TinyNet
    input_scale: float = 1.0

    @classmethod
    def initialize(cls, cfg):
        return cls(init(cfg.widths, seed=[cfg.seed, 0], output_scale=cfg.output_scale),
                   init(cfg.widths, seed=[cfg.seed, 1], output_scale=cfg.output_scale),
                   cfg.input_scale)

    def forward_flow(self, points):
        return self.forward.forward(np.asarray(points, dtype=np.float64) * self.input_scale)

    def backward_flow(self, points):
        return self.backward.forward(np.asarray(points, dtype=np.float64) * self.input_scale)


def objective(nets, source, target, tau, source_index=None, target_index=None):
    """Value of the two-term objective and gradients for both networks."""
    s = nets.input_scale
    fwd, c_fwd = nets.forward.forward(source * s, return_cache=True)
    deformed = source + fwd
    l1, g1 = chamfer_with_grad(deformed, target, tau, target_index)
    bwd, c_bwd = nets.backward.forward(deformed * s, return_cache=True)
    cycled = deformed + bwd
    l2, g2 = chamfer_with_grad(cycled, source, tau, source_index)
    grads_bw, g_in = nets.backward.backward(c_bwd, g2, need_input_grad=True)
    g_deformed = g1 + g2 + s * g_in
    grads_fw, _ = nets.forward.backward(c_fwd, g_deformed)
    return l1 + l2, fwd, grads_fw, grads_bw


@dataclass
class FlowResult:
    flow: np.ndarray
    best_loss: float
    iterations: int
    loss_history: list = field(default_factory=list)
    best_history: list = field(default_factory=list)
    nets: FlowNets | None = None


def optimize_flow(source, target, cfg=None, return_result=False):
    """Fit forward/backward flow networks to one pair; return source flow.

    Full-batch Adam without weight decay.  Stops once the best loss has not
    improved by more than ``cfg.min_delta`` for ``cfg.patience`` iterations.
    The returned flow is the forward prediction at the best iterate.
    """
    cfg = cfg or FlowOptConfig()
    source = check_points(source, name="source", allow_empty=False)
    target = check_points(target, name="target", allow_empty=False)
    nets = FlowNets.initialize(cfg)
    opt_fw = AdamState.for_net(nets.forward, lr=cfg.lr)
    opt_bw = AdamState.for_net(nets.backward, lr=cfg.lr)
    src_index, tgt_index = NeighborIndex(source), NeighborIndex(target)

    best_loss, best_flow, best_params, since_best = np.inf, None, None, 0
    history, best_history = [], []
    it = 0
    for it in range(1, cfg.max_iters + 1):
        loss, flow, g_fw, g_bw = objective(nets, source, target, cfg.tau, src_index, tgt_index)
        if not np.isfinite(loss):
            raise FloatingPointError(
                f"non-finite flow loss at iteration {it} (last best {best_loss:.6g})")
        history.append(loss)
        if loss < best_loss - cfg.min_delta:
            best_loss, best_flow, since_best = loss, flow.copy(), 0
            if return_result:
                best_params = (nets.forward.copy(), nets.backward.copy())
        else:
            since_best += 1
        best_history.append(best_loss)
        if since_best >= cfg.patience:
            break
        adam_step(nets.forward, opt_fw, g_fw)
        adam_step(nets.backward, opt_bw, g_bw)
    log.debug("flow optimization stopped after %d iterations, best loss %.6g", it, best_loss)
    if not return_result:
        return best_flow
    return FlowResult(flow=best_flow, best_loss=float(best_loss), iterations=it,
                      loss_history=history, best_history=best_history,
                      nets=FlowNets(*best_params, cfg.input_scale))


def compose_total_flow(original, T, residual):
    """Total flow of the original points: ``(T p + residual) - p``."""
    original = check_points(original, name="original")
    residual = check_flow(residual, len(original), name="residual")
    return T.apply(original) + residual - original


class NeuralFlowPrior(BaseEstimator):
    """Estimator wrapper: ``fit(source, target)`` then ``predict(points)``.

    ``predict`` evaluates the fitted forward network at arbitrary points,
    so it can extrapolate flow to points excluded from the fit.
    """

    def __init__(self, lr=0.004, patience=100, max_iters=5000, tau=2.0,
                 min_delta=1e-6, hidden_layers=8, hidden_width=128,
                 output_scale=0.0, input_scale=1.0 / 35.0, seed=0):
        self.lr = lr
        self.patience = patience
        self.max_iters = max_iters
        self.tau = tau
        self.min_delta = min_delta
        self.hidden_layers = hidden_layers
        self.hidden_width = hidden_width
        self.output_scale = output_scale
        self.input_scale = input_scale
        self.seed = seed

    def _config(self):
        return FlowOptConfig(**self.get_params())

    def fit(self, X, y):
        result = optimize_flow(X, y, self._config(), return_result=True)
        self.nets_ = result.nets
        self.flow_ = result.flow
        self.best_loss_ = result.best_loss
        self.n_iter_ = result.iterations
        return self

    def predict(self, X):
        if not hasattr(self, "nets_"):
            from sklearn.exceptions import NotFittedError
            raise NotFittedError("NeuralFlowPrior is not fitted")
        X = check_points(X, name="X")
        if len(X) == 0:
            return np.zeros((0, 3))
        return self.nets_.forward_flow(X)

    def fit_predict(self, X, y):
        return self.fit(X, y).flow_
