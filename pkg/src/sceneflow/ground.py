"""Ground removal with a coordinate-network height map.

A small ReLU network ``f(x, y)`` is fit to the cloud under a one-sided loss:
points below the surface are penalised quadratically, points above it with a
Huber penalty so tall objects barely pull the surface up.  Points less than
``threshold`` above the fitted surface are ground.

By default the fit sees only the lowest point of each ``cell_size`` xy cell.
Object bodies occlude the ground beneath them, so without this filter every
body point pushes the unobserved surface up towards the body.  Cells that
hold no ground at all (inside a body's footprint) are then dropped by a slope
test: a cell minimum is rejected when it rises above a nearby minimum more
steeply than ``max_slope`` allows.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, TransformerMixin

from .core import check_points
from .tinynet import AdamState, TinyNet, adam_step, init

GROUND_THRESHOLD = 0.3
HUBER_DELTA = 0.05
CELL_SIZE = 1.0
MAX_SLOPE = 0.25
SLOPE_MARGIN = 0.1
SLOPE_RADIUS = 3.0


def height_loss(h, z, delta=HUBER_DELTA):
    """Per-point one-sided loss of predicted ground ``h`` for a point at ``z``."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    h = np.asarray(h, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    r = z - h
    huber = np.where(r <= delta, 0.5 * r * r, delta * (r - 0.5 * delta))
    out = np.where(z < h, r * r, huber)
    return out if out.ndim else float(out)


def height_loss_grad(h, z, delta=HUBER_DELTA):
    """Derivative of :func:`height_loss` with respect to ``h``."""
    r = z - h
    return np.where(z < h, -2.0 * r, -np.minimum(r, delta))


@dataclass
class HeightNet:
    """Fitted height map ``h = offset + net((xy - center) * scale)``."""

    net: TinyNet
    center: np.ndarray
    scale: float
    offset: float
    delta: float = HUBER_DELTA
    loss: float = np.nan

    def predict(self, xy):
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        return self.offset + self.net.forward((xy - self.center) * self.scale)[:, 0]

    def shifted(self, dz):
        """The same surface moved up by ``dz``."""
        return HeightNet(self.net, self.center, self.scale, self.offset + dz, self.delta,
                         self.loss)


def lowest_per_cell(cloud, cell_size):
    """Indices of the lowest point in each occupied ``cell_size`` xy cell.

    Ties on z go to the lower index; the result is sorted ascending.
    """
    cloud = check_points(cloud, name="cloud")
    if not cell_size > 0:
        raise ValueError("cell_size must be positive")
    if len(cloud) == 0:
        return np.zeros(0, dtype=np.intp)
    keys = np.floor(cloud[:, :2] / cell_size).astype(np.int64)
    order = np.lexsort((np.arange(len(cloud)), cloud[:, 2], keys[:, 1], keys[:, 0]))
    k = keys[order]
    first = np.ones(len(k), dtype=bool)
    first[1:] = np.any(k[1:] != k[:-1], axis=1)
    return np.sort(order[first])


def slope_filter(points, max_slope=MAX_SLOPE, margin=SLOPE_MARGIN, radius=SLOPE_RADIUS):
    """Mask of points not rising above any neighbour within ``radius`` by more
    than ``margin + max_slope * horizontal distance``."""
    points = check_points(points, name="points")
    keep = np.ones(len(points), dtype=bool)
    if len(points) < 2:
        return keep
    xy, z = points[:, :2], points[:, 2]
    for i, nb in enumerate(cKDTree(xy).query_ball_point(xy, radius)):
        nb = np.asarray(nb)
        dist = np.linalg.norm(xy[nb] - xy[i], axis=1)
        keep[i] = not np.any(z[i] - z[nb] > margin + max_slope * dist)
    return keep


def fit_height_map(cloud, seed=0, lr=0.004, iterations=1000, delta=HUBER_DELTA,
                   hidden=(64, 64, 64), scale=1.0 / 35.0, offset_quantile=0.1,
                   cell_size=CELL_SIZE, max_slope=MAX_SLOPE):
    """Full-batch Adam fit of the height network to ``cloud``.

    Inputs are centred on the cloud's xy centroid and scaled by ``scale``;
    the output is added to a constant offset (the ``offset_quantile`` of z)
    so the network starts on a plausible ground level.  ``cell_size=None``
    fits every point instead of the per-cell minima; ``max_slope=None``
    skips the slope test on the minima.
    """
    cloud = check_points(cloud, name="cloud", allow_empty=False)
    if cell_size is not None:
        cloud = cloud[lowest_per_cell(cloud, cell_size)]
        if max_slope is not None:
            cloud = cloud[slope_filter(cloud, max_slope)]
    xy, z = cloud[:, :2], cloud[:, 2]
    center = xy.mean(axis=0)
    offset = float(np.quantile(z, offset_quantile))
    net = init((2,) + tuple(hidden) + (1,), seed=seed, output_scale=0.0)
    inputs = (xy - center) * scale
    state = AdamState.for_net(net, lr=lr)
    n = len(z)
    loss = np.nan
    for _ in range(iterations):
        out, cache = net.forward(inputs, return_cache=True)
        h = offset + out[:, 0]
        loss = float(height_loss(h, z, delta).mean())
        grad_h = height_loss_grad(h, z, delta) / n
        grads, _ = net.backward(cache, grad_h[:, None])
        adam_step(net, state, grads)
    hn = HeightNet(net, center, scale, offset, delta)
    hn.loss = float(height_loss(hn.predict(xy), z, delta).mean()) if iterations else loss
    return hn


def segment_ground(cloud, height_net, threshold=GROUND_THRESHOLD):
    """Boolean mask, True where the point is less than ``threshold`` above ground."""
    cloud = check_points(cloud, name="cloud")
    if len(cloud) == 0:
        return np.zeros(0, dtype=bool)
    return cloud[:, 2] - height_net.predict(cloud[:, :2]) < threshold


def remove_ground(cloud, seed=0, threshold=GROUND_THRESHOLD, **fit_kw):
    """Fit, segment and drop ground; returns ``(non_ground, mask, height_net)``."""
    cloud = check_points(cloud, name="cloud", allow_empty=False)
    hn = fit_height_map(cloud, seed=seed, **fit_kw)
    mask = segment_ground(cloud, hn, threshold)
    return cloud[~mask], mask, hn


class HeightMapGroundSegmenter(BaseEstimator, TransformerMixin):
    """``fit`` a height map; ``predict`` the ground mask; ``transform`` drops ground."""

    def __init__(self, threshold=GROUND_THRESHOLD, delta=HUBER_DELTA, lr=0.004,
                 iterations=1000, hidden=(64, 64, 64), cell_size=CELL_SIZE,
                 max_slope=MAX_SLOPE, seed=0):
        self.threshold = threshold
        self.delta = delta
        self.lr = lr
        self.iterations = iterations
        self.hidden = hidden
        self.cell_size = cell_size
        self.max_slope = max_slope
        self.seed = seed

    def fit(self, X, y=None):
        self.height_net_ = fit_height_map(X, seed=self.seed, lr=self.lr,
                                          iterations=self.iterations, delta=self.delta,
                                          hidden=self.hidden, cell_size=self.cell_size,
                                          max_slope=self.max_slope)
        return self

    def _check_fitted(self):
        if not hasattr(self, "height_net_"):
            from sklearn.exceptions import NotFittedError
            raise NotFittedError("HeightMapGroundSegmenter is not fitted")

    def predict(self, X):
        self._check_fitted()
        return segment_ground(X, self.height_net_, self.threshold)

    def transform(self, X):
        X = check_points(X)
        return X[~self.predict(X)]

    def ground_height(self, xy):
        self._check_fitted()
        return self.height_net_.predict(xy)
