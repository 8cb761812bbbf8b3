"""Piecewise-rigid flow refinement: DBSCAN clusters, RANSAC + Kabsch per cluster."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .core import GeometryError, RigidTransform, check_flow, check_points
from .spatial import dbscan

# relative scale below which a centered point set counts as collinear
_DEGENERATE_RTOL = 1e-9


@dataclass
class RefineConfig:
    ransac_iters: int = 250
    inlier_threshold: float = 0.2
    dbscan_eps: float = 0.4
    dbscan_min_points: int = 10
    static_speed: float = 0.5
    delta_t: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("ransac_iters", "inlier_threshold", "dbscan_eps",
                     "dbscan_min_points", "static_speed", "delta_t"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class ClusterRigidFit:
    cluster_id: int
    transform: RigidTransform
    inlier_count: int
    cluster_size: int
    snapped: bool = False


def _is_degenerate(centered, scale):
    s = np.linalg.svd(centered, compute_uv=False)
    return s.size < 2 or s[1] <= _DEGENERATE_RTOL * max(scale, 1.0)


def kabsch(points, targets, weights=None):
    """Least-squares proper rigid transform mapping ``points`` onto ``targets``.

    Optional non-negative ``weights`` give the weighted least-squares fit.
    """
    P = check_points(points, name="points")
    Q = check_points(targets, name="targets")
    if P.shape != Q.shape or len(P) < 3:
        raise GeometryError("kabsch needs >= 3 corresponding point pairs")
    if weights is None:
        w = np.full(len(P), 1.0 / len(P))
    else:
        w = np.asarray(weights, dtype=np.float64).reshape(-1)
        if w.shape != (len(P),) or np.any(w < 0) or not w.sum() > 0:
            raise ValueError("weights must be non-negative with a positive sum")
        w = w / w.sum()
    p_bar, q_bar = w @ P, w @ Q
    Pc, Qc = P - p_bar, Q - q_bar
    if _is_degenerate(Pc[w > 0], np.abs(P).max()):
        raise GeometryError("degenerate (collinear or coincident) configuration")
    H = (Pc * w[:, None]).T @ Qc
    U, _, Vt = np.linalg.svd(H)
    V = Vt.T
    d = np.sign(np.linalg.det(V @ U.T))
    R = V @ np.diag([1.0, 1.0, d]) @ U.T
    return RigidTransform(R, q_bar - R @ p_bar)


def _kabsch_batch(P, Q):
    """Kabsch over a stack of (k, m, 3) correspondence sets; returns (R, t)."""
    p_bar, q_bar = P.mean(axis=1, keepdims=True), Q.mean(axis=1, keepdims=True)
    H = np.swapaxes(P - p_bar, 1, 2) @ (Q - q_bar)
    U, _, Vt = np.linalg.svd(H)
    V = np.swapaxes(Vt, 1, 2)
    Ut = np.swapaxes(U, 1, 2)
    d = np.sign(np.linalg.det(V @ Ut))
    D = np.zeros_like(H)
    D[:, 0, 0] = D[:, 1, 1] = 1.0
    D[:, 2, 2] = d
    R = V @ D @ Ut
    t = q_bar[:, 0] - np.einsum("kij,kj->ki", R, p_bar[:, 0])
    return R, t


def ransac_rigid(points, flows, cfg=None, rng=None, cluster_id=0):
    """Robust rigid fit to ``points -> points + flows`` from 3-point samples.

    Hypotheses are scored by the number of points whose rigid flow is within
    ``cfg.inlier_threshold`` of the given flow; the best (first on ties) is
    refit on its inlier set.
    """
    cfg = cfg or RefineConfig()
    P = check_points(points, name="points")
    F = check_flow(flows, len(P), name="flows")
    n = len(P)
    if n < 3:
        raise GeometryError("a cluster needs at least 3 points")
    if rng is None:
        rng = np.random.default_rng([cfg.seed, cluster_id])
    Q = P + F
    scale = np.abs(P).max()

    samples = []
    attempts = 0
    while len(samples) < cfg.ransac_iters:
        if attempts >= 10 * cfg.ransac_iters:
            raise GeometryError(f"no non-degenerate sample in {attempts} attempts")
        attempts += 1
        idx = rng.choice(n, size=3, replace=False)
        sub = P[idx]
        if _is_degenerate(sub - sub.mean(axis=0), scale):
            continue
        samples.append(idx)
    samples = np.asarray(samples)

    R, t = _kabsch_batch(P[samples], Q[samples])
    rigid = np.einsum("kij,nj->kni", R, P) + t[:, None, :]
    err = np.linalg.norm(rigid - Q[None], axis=2)
    counts = (err < cfg.inlier_threshold).sum(axis=1)
    best = int(np.argmax(counts))
    inliers = np.flatnonzero(err[best] < cfg.inlier_threshold)
    if len(inliers) >= 3:
        try:
            T = kabsch(P[inliers], Q[inliers])
        except GeometryError:
            T = RigidTransform(R[best], t[best])
    else:
        T = RigidTransform(R[best], t[best])
    return ClusterRigidFit(cluster_id=cluster_id, transform=T,
                           inlier_count=int(counts[best]), cluster_size=n)


def refine_flow(cloud, flow, cfg=None, return_details=False):
    """Replace each cluster's flow by its robust rigid fit.

    Clusters whose fitted translation speed is below ``cfg.static_speed``
    get zero flow.  Noise points keep their input flow.
    """
    cfg = cfg or RefineConfig()
    cloud = check_points(cloud, name="cloud")
    flow = check_flow(flow, len(cloud), name="flow")
    clusters = dbscan(cloud, cfg.dbscan_eps, cfg.dbscan_min_points)
    out = flow.copy()
    fits = []
    for cid in range(clusters.n_clusters):
        members = clusters.members(cid)
        if len(members) < 3:
            continue
        fit = ransac_rigid(cloud[members], flow[members], cfg, cluster_id=cid)
        if np.linalg.norm(fit.transform.translation) / cfg.delta_t < cfg.static_speed:
            fit = ClusterRigidFit(cid, RigidTransform.identity(), fit.inlier_count,
                                  fit.cluster_size, snapped=True)
            out[members] = 0.0
        else:
            out[members] = fit.transform.apply(cloud[members]) - cloud[members]
        fits.append(fit)
    if return_details:
        return out, clusters, fits
    return out


class PiecewiseRigidRefiner(BaseEstimator, TransformerMixin):
    """``fit(cloud, flow)`` clusters and fits; ``transform`` returns refined flow."""

    def __init__(self, ransac_iters=250, inlier_threshold=0.2, dbscan_eps=0.4,
                 dbscan_min_points=10, static_speed=0.5, delta_t=0.1, seed=0):
        self.ransac_iters = ransac_iters
        self.inlier_threshold = inlier_threshold
        self.dbscan_eps = dbscan_eps
        self.dbscan_min_points = dbscan_min_points
        self.static_speed = static_speed
        self.delta_t = delta_t
        self.seed = seed

    def fit(self, X, flow):
        cfg = RefineConfig(**self.get_params())
        self.flow_, self.clusters_, self.fits_ = refine_flow(X, flow, cfg, return_details=True)
        self.labels_ = self.clusters_.labels
        self._fit_cloud = check_points(X)
        return self

    def transform(self, X):
        X = check_points(X)
        if not hasattr(self, "flow_") or X.shape != self._fit_cloud.shape \
                or not np.array_equal(X, self._fit_cloud):
            raise ValueError("transform expects the cloud passed to fit")
        return self.flow_

    def fit_transform(self, X, flow):
        return self.fit(X, flow).flow_
