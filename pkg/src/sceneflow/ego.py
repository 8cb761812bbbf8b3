"""Ego-motion compensation: provided odometry, or point-to-point ICP."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .core import GeometryError, RigidTransform, apply_transform, check_points, compose
from .refine import kabsch
from .spatial import NeighborIndex


@dataclass
class IcpConfig:
    max_iters: int = 50
    cutoff: float = 1.0
    tolerance: float = 1e-6
    voxel_size: float = 0.5
    # correspondence cutoff of the first iteration, shrunk geometrically to
    # ``cutoff``; equal to ``cutoff`` disables the coarse-to-fine schedule
    initial_cutoff: float = 4.0
    cutoff_decay: float = 0.7
    # Geman-McClure kernel scale of the robust refinement phase
    kernel_scale: float = 0.1

    def __post_init__(self):
        for name in ("max_iters", "cutoff", "tolerance", "voxel_size", "initial_cutoff",
                     "cutoff_decay", "kernel_scale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.initial_cutoff < self.cutoff:
            raise ValueError("initial_cutoff must be >= cutoff")

    def cutoff_at(self, iteration):
        return max(self.cutoff, self.initial_cutoff * self.cutoff_decay ** iteration)


def geman_mcclure_weights(residuals, scale):
    s2 = scale * scale
    return (s2 / (s2 + residuals * residuals)) ** 2


def voxel_downsample(points, voxel_size):
    """Centroid of the points in each occupied voxel, ordered by voxel key."""
    points = check_points(points)
    if len(points) == 0:
        return points
    keys = np.floor(points / voxel_size).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, points)
    return sums / counts[:, None]


@dataclass
class IcpResult:
    transform: RigidTransform
    iterations: int
    converged: bool
    residuals: list = field(default_factory=list)
    inlier_counts: list = field(default_factory=list)


def icp(source, target, cfg=None, init=None):
    """Align ``source`` onto ``target``; returns an :class:`IcpResult`.

    Each iteration matches every source point to its nearest target point,
    drops pairs farther than the current cutoff and solves the rigid fit of
    the survivors in closed form.  The cutoff shrinks geometrically from
    ``initial_cutoff`` to ``cutoff``; after convergence there, a second phase
    re-weights correspondences with a Geman-McClure kernel so that residual
    dynamic-object matches stop biasing the fit.
    """
    cfg = cfg or IcpConfig()
    src = voxel_downsample(check_points(source, allow_empty=False, name="source"), cfg.voxel_size)
    tgt = voxel_downsample(check_points(target, allow_empty=False, name="target"), cfg.voxel_size)
    index = NeighborIndex(tgt)
    T = init or RigidTransform.identity()
    residuals, inliers = [], []
    converged = robust = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        cutoff = cfg.cutoff if robust else cfg.cutoff_at(it - 1)
        moved = T.apply(src)
        nn, d = index.query(moved)
        keep = d <= cutoff
        if keep.sum() < 3:
            raise GeometryError(f"only {int(keep.sum())} ICP correspondences within cutoff")
        residuals.append(float(d[keep].mean()))
        inliers.append(int(keep.sum()))
        w = geman_mcclure_weights(d[keep], cfg.kernel_scale) if robust else None
        T_new = kabsch(src[keep], tgt[nn[keep]], weights=w)
        dR = np.abs(T_new.rotation - T.rotation).max()
        dt = np.abs(T_new.translation - T.translation).max()
        T = T_new
        if max(dR, dt) < cfg.tolerance and cutoff == cfg.cutoff:
            if robust:
                converged = True
                break
            robust = True
    return IcpResult(T, it, converged, residuals, inliers)


def estimate_ego_motion(pair, cfg=None):
    """Transform mapping ``pair.cloud_t`` into ``pair.cloud_t_delta``'s frame."""
    return icp(pair.cloud_t, pair.cloud_t_delta, cfg).transform


def motion_compensate(pair, cfg=None, use_provided=True):
    """Express ``cloud_t`` in the frame of ``cloud_t_delta``.

    Returns ``(compensated_cloud, transform, source)`` where ``source`` is
    ``"provided"`` or ``"icp"``.
    """
    if use_provided and pair.ego_motion is not None:
        T, source = pair.ego_motion, "provided"
    else:
        T, source = estimate_ego_motion(pair, cfg), "icp"
    return apply_transform(pair.cloud_t, T), T, source


class IcpEgoMotion(BaseEstimator, TransformerMixin):
    """``fit(source, target)`` estimates the transform; ``transform`` applies it."""

    def __init__(self, max_iters=50, cutoff=1.0, tolerance=1e-6, voxel_size=0.5,
                 initial_cutoff=4.0, cutoff_decay=0.7, kernel_scale=0.1):
        self.max_iters = max_iters
        self.cutoff = cutoff
        self.tolerance = tolerance
        self.voxel_size = voxel_size
        self.initial_cutoff = initial_cutoff
        self.cutoff_decay = cutoff_decay
        self.kernel_scale = kernel_scale

    def fit(self, X, y):
        result = icp(X, y, IcpConfig(**self.get_params()))
        self.transform_ = result.transform
        self.n_iter_ = result.iterations
        self.converged_ = result.converged
        self.residuals_ = result.residuals
        return self

    def transform(self, X):
        if not hasattr(self, "transform_"):
            from sklearn.exceptions import NotFittedError
            raise NotFittedError("IcpEgoMotion is not fitted")
        return apply_transform(X, self.transform_)


def relative_error(estimate, truth):
    """(translation error in m, rotation error in rad) of ``estimate`` vs ``truth``."""
    delta = compose(estimate, truth.inverse())
    return float(np.linalg.norm(estimate.translation - truth.translation)), delta.rotation_angle()
