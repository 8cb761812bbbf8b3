"""Flow labels from box tracks, stratified metrics and dataset diagnostics."""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np

from .core import GeometryError, RigidTransform, ScenePair, check_flow, check_points, compose
from .spatial import NeighborIndex

DYNAMIC_SPEED = 0.5


class PointClass(enum.IntEnum):
    UNLABELED = -1
    DYNAMIC_FG = 0
    STATIC_FG = 1
    STATIC_BG = 2


CLASS_KEYS = {PointClass.DYNAMIC_FG: "dyn_fg", PointClass.STATIC_FG: "stat_fg",
              PointClass.STATIC_BG: "stat_bg"}


def _require_ego(pair):
    if pair.ego_motion is None:
        raise GeometryError(f"scene {pair.name!r} has no ego motion")
    return pair.ego_motion


def _box_motion(track_t, track_t1):
    """Rigid transform carrying points in the frame-t box to the frame-(t+delta) box."""
    try:
        return compose(track_t1.pose, track_t.pose.inverse())
    except GeometryError as exc:
        raise GeometryError(f"malformed track {track_t.track_id!r}: {exc}") from exc


def _box_membership(points, tracks):
    """Index of the first track containing each point, -1 where none does."""
    owner = np.full(len(points), -1, dtype=np.intp)
    for k, track in enumerate(tracks):
        inside = track.contains(points) & (owner < 0)
        owner[inside] = k
    return owner


def generate_flow_labels(pair):
    """GT flow from tracks and ego pose, plus a validity mask.

    Points inside a frame-t box follow that box's rigid motion; points in no
    box follow the ego motion; points in a box whose track has no frame-t+delta
    match are invalid.  A point inside several boxes takes the first track.
    """
    E = _require_ego(pair)
    cloud = pair.cloud_t
    flow = E.apply(cloud) - cloud
    valid = np.ones(len(cloud), dtype=bool)
    next_by_id = {t.track_id: t for t in pair.tracks_t_delta}
    owner = _box_membership(cloud, pair.tracks_t)
    for k, track in enumerate(pair.tracks_t):
        members = owner == k
        if not members.any():
            continue
        match = next_by_id.get(track.track_id)
        if match is None:
            valid[members] = False
            continue
        p = cloud[members]
        flow[members] = _box_motion(track, match).apply(p) - p
    return flow, valid


def classify_points(pair, labels, threshold_speed=DYNAMIC_SPEED, valid=None):
    """Per-point :class:`PointClass` codes (int8 array)."""
    E = _require_ego(pair)
    cloud = pair.cloud_t
    labels = check_flow(labels, len(cloud), name="labels")
    ego_flow = E.apply(cloud) - cloud
    speed = np.linalg.norm(labels - ego_flow, axis=1) / pair.delta_t
    foreground = _box_membership(cloud, pair.tracks_t) >= 0
    out = np.full(len(cloud), PointClass.STATIC_BG, dtype=np.int8)
    out[foreground] = PointClass.STATIC_FG
    out[foreground & (speed >= threshold_speed)] = PointClass.DYNAMIC_FG
    if valid is not None:
        out[~np.asarray(valid, dtype=bool)] = PointClass.UNLABELED
    return out


@dataclass
class ClassStats:
    """Additive per-class sums; merge by adding, then read the means."""

    count: int = 0
    epe_sum: float = 0.0
    accr: int = 0
    accs: int = 0

    def __add__(self, other):
        return ClassStats(self.count + other.count, self.epe_sum + other.epe_sum,
                          self.accr + other.accr, self.accs + other.accs)

    def _mean(self, value):
        return value / self.count if self.count else float("nan")

    @property
    def epe(self):
        return self._mean(self.epe_sum)

    @property
    def acc_relax(self):
        return self._mean(self.accr)

    @property
    def acc_strict(self):
        return self._mean(self.accs)


@dataclass
class MetricsReport:
    """Per-class EPE and accuracies.

    Reports for several scenes combine with :meth:`merge`, which sums the
    per-class totals so the result equals the metrics of the pooled points.
    """

    classes: dict = field(default_factory=lambda: {k: ClassStats() for k in CLASS_KEYS.values()})

    @classmethod
    def merge(cls, reports):
        out = cls()
        for report in reports:
            for key in CLASS_KEYS.values():
                out.classes[key] = out.classes[key] + report.classes[key]
        return out

    @property
    def absent(self):
        return [k for k, s in self.classes.items() if s.count == 0]

    @property
    def avg3(self):
        """Mean of the class EPEs, skipping classes without points."""
        present = [s.epe for s in self.classes.values() if s.count]
        return float(np.mean(present)) if present else float("nan")

    def epe(self, key):
        return self.classes[key].epe

    def to_dict(self):
        dyn = self.classes["dyn_fg"]
        return {
            "epe": {"avg3": self.avg3, **{k: s.epe for k, s in self.classes.items()}},
            "accr_dyn_fg": dyn.acc_relax,
            "accs_dyn_fg": dyn.acc_strict,
            "accr": {k: s.acc_relax for k, s in self.classes.items()},
            "accs": {k: s.acc_strict for k, s in self.classes.items()},
            "counts": {k: s.count for k, s in self.classes.items()},
            "absent": self.absent,
        }

    def to_json(self, **kw):
        # NaN for absent classes becomes null
        def clean(obj):
            if isinstance(obj, dict):
                return {k: clean(v) for k, v in obj.items()}
            if isinstance(obj, float) and not np.isfinite(obj):
                return None
            return obj
        return json.dumps(clean(self.to_dict()), **kw)

    def csv_row(self, name=""):
        d = self.to_dict()
        vals = [d["epe"]["avg3"], d["epe"]["dyn_fg"], d["epe"]["stat_fg"], d["epe"]["stat_bg"],
                d["accr_dyn_fg"], d["accs_dyn_fg"]]
        counts = [d["counts"][k] for k in ("dyn_fg", "stat_fg", "stat_bg")]
        return ",".join([name] + [f"{v:.6f}" for v in vals] + [str(c) for c in counts])


CSV_HEADER = "scene,epe_avg3,epe_dyn_fg,epe_stat_fg,epe_stat_bg,accr_dyn_fg,accs_dyn_fg," \
             "n_dyn_fg,n_stat_fg,n_stat_bg"


def accuracy_masks(pred, gt, abs_threshold, rel_threshold):
    """Points with EPE below ``abs_threshold`` or relative EPE below ``rel_threshold``.

    The relative branch is skipped where the GT flow is exactly zero.
    """
    err = np.linalg.norm(pred - gt, axis=1)
    norm = np.linalg.norm(gt, axis=1)
    rel = np.zeros_like(err, dtype=bool)
    nz = norm > 0
    rel[nz] = err[nz] / norm[nz] < rel_threshold
    return (err < abs_threshold) | rel


def compute_metrics(pred, gt, classes, valid=None):
    """Stratified EPE / AccR / AccS over valid points; returns a :class:`MetricsReport`."""
    gt = check_points(gt, name="gt")
    pred = check_flow(pred, len(gt), name="pred")
    classes = np.asarray(classes).reshape(-1)
    if classes.shape != (len(gt),):
        raise ValueError("classes must have one entry per point")
    keep = classes != PointClass.UNLABELED
    if valid is not None:
        valid = np.asarray(valid, dtype=bool).reshape(-1)
        if valid.shape != (len(gt),):
            raise ValueError("valid must have one entry per point")
        keep &= valid
    err = np.linalg.norm(pred - gt, axis=1)
    relax = accuracy_masks(pred, gt, 0.1, 0.1)
    strict = accuracy_masks(pred, gt, 0.05, 0.05)
    report = MetricsReport()
    for code, key in CLASS_KEYS.items():
        m = keep & (classes == code)
        report.classes[key] = ClassStats(int(m.sum()), float(err[m].sum()),
                                         int(relax[m].sum()), int(strict[m].sum()))
    return report


def evaluate_pair(pair, pred, threshold_speed=DYNAMIC_SPEED):
    """Label, classify and score ``pred`` for one scene pair."""
    labels, valid = generate_flow_labels(pair)
    classes = classify_points(pair, labels, threshold_speed, valid)
    return compute_metrics(pred, labels, classes, valid)


def expected_correspondences(total, sampled):
    """Expected number of points sampled in both of two independent draws."""
    if not total > 0 or not 0 <= sampled <= total:
        raise ValueError("need total > 0 and 0 <= sampled <= total")
    return sampled * sampled / total


def gt_chamfer_violation(pair):
    """Chamfer distance in meters between ``cloud_t + gt_flow`` and ``cloud_t_delta``.

    The sum of the two directed mean nearest-neighbour distances; zero when
    the GT flow maps the first cloud exactly onto the second.
    """
    if pair.gt_flow is None:
        raise GeometryError(f"scene {pair.name!r} has no GT flow")
    moved = check_points(pair.cloud_t + pair.gt_flow, allow_empty=False, name="moved")
    target = check_points(pair.cloud_t_delta, allow_empty=False, name="cloud_t_delta")
    _, d_ab = NeighborIndex(target).query(moved)
    _, d_ba = NeighborIndex(moved).query(target)
    return float(d_ab.mean() + d_ba.mean())


def _dynamic_track_ids(pair, threshold_speed):
    E = _require_ego(pair)
    next_by_id = {t.track_id: t for t in pair.tracks_t_delta}
    ids = set()
    for track in pair.tracks_t:
        match = next_by_id.get(track.track_id)
        if match is None:
            continue
        c = track.center[None]
        d = _box_motion(track, match).apply(c) - E.apply(c)
        if np.linalg.norm(d) / pair.delta_t >= threshold_speed:
            ids.add(track.track_id)
    return ids


def dynamic_fraction(pair, threshold_speed=DYNAMIC_SPEED):
    """Fraction of valid frame-t points that are dynamic foreground."""
    labels, valid = generate_flow_labels(pair)
    classes = classify_points(pair, labels, threshold_speed, valid)
    n = int(valid.sum())
    return float((classes == PointClass.DYNAMIC_FG).sum() / n) if n else float("nan")


def _pick(rng, dyn_idx, stat_idx, ratio, total):
    n_dyn = int(round(ratio * total))
    n_stat = total - n_dyn
    if n_dyn > len(dyn_idx) or n_stat > len(stat_idx):
        raise ValueError(f"need {n_dyn} dynamic and {n_stat} static points, have "
                         f"{len(dyn_idx)} and {len(stat_idx)}")
    chosen = np.concatenate([rng.choice(dyn_idx, n_dyn, replace=False),
                             rng.choice(stat_idx, n_stat, replace=False)])
    return np.sort(chosen)


def resample_dynamic_ratio(pair, ratio, total, seed=0, threshold_speed=DYNAMIC_SPEED):
    """Subsample both frames to ``total`` points with the given dynamic fraction.

    Frame-t classes come from the GT labels; invalid points are dropped.  In
    frame t+delta a point is dynamic when it lies in the box of a track that
    moves at least ``threshold_speed`` relative to the ego motion.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("ratio must lie in [0, 1]")
    if total < 1:
        raise ValueError("total must be positive")
    rng = np.random.default_rng(seed)
    labels, valid = generate_flow_labels(pair)
    classes = classify_points(pair, labels, threshold_speed, valid)
    dyn0 = np.flatnonzero(classes == PointClass.DYNAMIC_FG)
    stat0 = np.flatnonzero(valid & (classes != PointClass.DYNAMIC_FG))
    idx0 = _pick(rng, dyn0, stat0, ratio, total)

    moving = _dynamic_track_ids(pair, threshold_speed)
    boxes = [t for t in pair.tracks_t_delta if t.track_id in moving]
    in_dyn = _box_membership(pair.cloud_t_delta, boxes) >= 0
    idx1 = _pick(rng, np.flatnonzero(in_dyn), np.flatnonzero(~in_dyn), ratio, total)

    gt = pair.gt_flow[idx0] if pair.gt_flow is not None else None
    return pair.replace(cloud_t=pair.cloud_t[idx0], cloud_t_delta=pair.cloud_t_delta[idx1],
                        gt_flow=gt)


def diagnostics(pairs, queries=((90000, 8192),), threshold_speed=DYNAMIC_SPEED,
                bins=np.linspace(0.0, 1.0, 11)):
    """JSON-ready diagnostics over scene pairs."""
    per_scene, ratios = [], []
    for pair in pairs:
        ratio = dynamic_fraction(pair, threshold_speed)
        ratios.append(ratio)
        per_scene.append({"name": pair.name, "gt_chamfer_violation": gt_chamfer_violation(pair),
                          "dynamic_fraction": ratio, "points": [len(pair.cloud_t),
                                                                len(pair.cloud_t_delta)]})
    hist, edges = np.histogram(np.nan_to_num(ratios, nan=0.0), bins=bins)
    return {
        "scenes": per_scene,
        "dynamic_ratio_histogram": {"edges": edges.tolist(), "counts": hist.tolist()},
        "expected_correspondences": [
            {"total": int(t), "sampled": int(s), "expected": expected_correspondences(t, s)}
            for t, s in queries],
    }


__all__ = ["PointClass", "ClassStats", "MetricsReport", "generate_flow_labels",
           "classify_points", "compute_metrics", "evaluate_pair", "expected_correspondences",
           "gt_chamfer_violation", "dynamic_fraction", "resample_dynamic_ratio",
           "diagnostics", "accuracy_masks", "CSV_HEADER", "DYNAMIC_SPEED", "RigidTransform",
           "ScenePair"]
