"""Deterministic synthetic scene pairs with exact ground truth.

Scenes are sensor-centred (sensor at the origin, ground ``sensor_height``
below it).  Surfaces are sampled uniformly by area: a jittered ground grid
plus the sensor-facing faces of boxes.  Static structures are untracked;
parked and moving vehicles carry box tracks.  Vehicle boxes span from the
ground up, but only the body above ``clearance`` is sampled.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .core import BoxTrack, RigidTransform, ScenePair, compose, yaw_matrix


class SceneSpecError(ValueError):
    pass


@dataclass(frozen=True)
class ObjectSpec:
    """A box; ``speed``/``yaw_rate`` are zero for parked vehicles.

    ``center_xy`` is in frame-t coordinates; the base sits on the ground.
    ``visible_fraction_t1`` < 1 hides the rear of the object in frame t+delta
    (occlusion), only in independent sampling mode.
    """

    center_xy: tuple
    dimensions: tuple = (4.5, 1.9, 1.5)
    yaw: float = 0.0
    speed: float = 0.0
    heading: float | None = None
    yaw_rate: float = 0.0
    clearance: float = 0.45
    tracked: bool = True
    points: int | None = None
    visible_fraction_t1: float = 1.0

    def motion(self, base_z, delta_t):
        """Rigid motion over ``delta_t`` in frame-t coordinates."""
        heading = self.yaw if self.heading is None else self.heading
        step = self.speed * delta_t * np.array([np.cos(heading), np.sin(heading), 0.0])
        c = np.array([self.center_xy[0], self.center_xy[1], base_z])
        R = yaw_matrix(self.yaw_rate * delta_t)
        # rotate about the box centre, then translate
        return RigidTransform(R, c - R @ c + step)


@dataclass(frozen=True)
class SceneSpec:
    # piecewise-linear ground along ``ground_axis``: knots (coordinate, height);
    # a repeated coordinate encodes a step
    ground_profile: tuple = ((-100.0, 0.0), (100.0, 0.0))
    ground_axis: int = 1
    sensor_height: float = 1.8
    extent: float = 30.0
    ground_points: int = 800
    structures: tuple = ()
    vehicles: tuple = ()
    static_points: int = 300
    dynamic_points: int = 200
    parked_points: int = 100
    ego_yaw: float = 0.0
    ego_translation: tuple = (0.0, 0.0, 0.0)
    noise_std: float = 0.01
    mode: str = "independent"
    density_scale: float = 1.0
    delta_t: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("independent", "correlated"):
            raise SceneSpecError(f"unknown sampling mode {self.mode!r}")
        if not self.delta_t > 0 or not self.extent > 0 or self.density_scale <= 0:
            raise SceneSpecError("delta_t, extent and density_scale must be positive")
        if min(self.ground_points, self.static_points, self.dynamic_points,
               self.parked_points) < 0:
            raise SceneSpecError("point budgets must be non-negative")
        xs = [k[0] for k in self.ground_profile]
        if len(xs) < 2 or any(b < a for a, b in zip(xs, xs[1:])):
            raise SceneSpecError("ground profile knots must be non-decreasing")

    @property
    def ego_motion(self):
        return RigidTransform.from_yaw(self.ego_yaw, self.ego_translation)

    def moving(self):
        return [v for v in self.vehicles if v.speed != 0 or v.yaw_rate != 0]

    def parked(self):
        return [v for v in self.vehicles if v.speed == 0 and v.yaw_rate == 0]


def ground_height(spec, x, y):
    """Ground z at (x, y) in frame-t coordinates."""
    coord = np.asarray(x if spec.ground_axis == 0 else y, dtype=np.float64)
    knots = np.asarray(spec.ground_profile, dtype=np.float64)
    xs, hs = knots[:, 0], knots[:, 1]
    j = np.clip(np.searchsorted(xs, coord, side="right"), 1, len(xs) - 1)
    x0, x1, h0, h1 = xs[j - 1], xs[j], hs[j - 1], hs[j]
    span = np.where(x1 > x0, x1 - x0, 1.0)
    w = np.clip((coord - x0) / span, 0.0, 1.0)
    return -spec.sensor_height + h0 + w * (h1 - h0)


# annotated boxes enclose the noisy surface samples with this much slack (m)
TRACK_MARGIN = 0.1


def _box_frame(obj, spec):
    """(center, rotation, sampled-body dims, tracked dims) in frame t."""
    cx, cy = obj.center_xy
    base = float(ground_height(spec, cx, cy))
    L, W, H = obj.dimensions
    R = yaw_matrix(obj.yaw)
    body_center = np.array([cx, cy, base + obj.clearance + H / 2.0])
    m = TRACK_MARGIN
    track_dims = np.array([L + 2 * m, W + 2 * m, H + obj.clearance + m])
    track_center = np.array([cx, cy, base + (H + obj.clearance + m) / 2.0])
    return body_center, R, np.array([L, W, H]), track_center, track_dims, base


_FACES = [(0, 1.0), (0, -1.0), (1, 1.0), (1, -1.0), (2, 1.0)]  # no bottom face


def _visible_faces(center, R, dims):
    faces = []
    for axis, sign in _FACES:
        n = sign * R[:, axis]
        fc = center + n * dims[axis] / 2.0
        if n @ (-fc) > 0:
            other = [a for a in range(3) if a != axis]
            faces.append((axis, sign, dims[other[0]] * dims[other[1]]))
    return faces


def _sample_box(rng, center, R, dims, n, keep_front=1.0):
    """``n`` points uniform by area over the sensor-facing faces."""
    faces = _visible_faces(center, R, dims)
    if n == 0 or not faces:
        return np.zeros((0, 3))
    areas = np.array([f[2] for f in faces])
    which = rng.choice(len(faces), size=n, p=areas / areas.sum())
    local = rng.uniform(-0.5, 0.5, size=(n, 3)) * dims
    for k, (axis, sign, _) in enumerate(faces):
        local[which == k, axis] = sign * dims[axis] / 2.0
    if keep_front < 1.0:
        # drop the rear (negative local x) part of the body
        cut = dims[0] / 2.0 - keep_front * dims[0]
        local = local[local[:, 0] >= cut]
    return local @ R.T + center


def _split(total, weights):
    weights = np.asarray(weights, dtype=np.float64)
    if total == 0 or len(weights) == 0:
        return [0] * len(weights)
    raw = total * weights / weights.sum()
    counts = np.floor(raw).astype(int)
    rem = total - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:rem]] += 1
    return counts.tolist()


def _scaled(n, spec):
    return int(round(n * spec.density_scale))


def _budgets(spec, objects, total):
    explicit = [o.points for o in objects]
    free = _scaled(total - sum(p for p in explicit if p is not None), spec)
    weights = [o.dimensions[0] * o.dimensions[2] for o in objects if o.points is None]
    auto = iter(_split(max(free, 0), weights))
    return [_scaled(p, spec) if p is not None else next(auto) for p in explicit]


def _sample_ground(rng, spec, n, footprints):
    """Jittered-grid ground samples outside vehicle/structure footprints."""
    if n == 0:
        return np.zeros((0, 3))
    pts = np.zeros((0, 2))
    factor = 1.3
    while len(pts) < n:
        side = int(np.ceil(np.sqrt(n * factor)))
        cell = 2 * spec.extent / side
        gx, gy = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
        xy = np.stack([gx.ravel(), gy.ravel()], 1) * cell - spec.extent
        xy = xy + rng.uniform(0, cell, size=xy.shape)
        ok = np.ones(len(xy), dtype=bool)
        for c, R, dims in footprints:
            local = (xy - c[:2]) @ R[:2, :2]
            ok &= ~np.all(np.abs(local) <= dims[:2] / 2.0 + 0.2, axis=1)
        pts = xy[ok]
        factor *= 1.5
    pts = pts[np.sort(rng.choice(len(pts), size=n, replace=False))]
    return np.column_stack([pts, ground_height(spec, pts[:, 0], pts[:, 1])])


def _sample_frame(rng, spec, objects, budgets, footprints, frame):
    """Sample every surface once; returns per-group point arrays in frame t."""
    ground = _sample_ground(rng, spec, _scaled(spec.ground_points, spec), footprints)
    groups = []
    for obj, n in zip(objects, budgets):
        center, R, dims, *_ = _box_frame(obj, spec)
        keep = obj.visible_fraction_t1 if frame == 1 else 1.0
        groups.append(_sample_box(rng, center, R, dims, n, keep_front=keep))
    return ground, groups


def generate(spec):
    """Generate a :class:`ScenePair` with GT flow, tracks and ego pose."""
    rng = np.random.default_rng(spec.seed)
    objects = list(spec.structures) + list(spec.parked()) + list(spec.moving())
    budgets = (_budgets(spec, spec.structures, spec.static_points)
               + _budgets(spec, spec.parked(), spec.parked_points)
               + _budgets(spec, spec.moving(), spec.dynamic_points))
    footprints = []
    for obj in objects:
        _, R, _, tc, td, _ = _box_frame(obj, spec)
        footprints.append((tc, R, td))
    E = spec.ego_motion
    motions = []
    for obj in objects:
        base = _box_frame(obj, spec)[5]
        motions.append(obj.motion(base, spec.delta_t))

    ground, groups = _sample_frame(rng, spec, objects, budgets, footprints, 0)
    clean_t = [ground] + groups
    noisy_t = [p + rng.normal(0.0, spec.noise_std, p.shape) for p in clean_t]
    cloud_t = np.concatenate(noisy_t)
    world_next = [RigidTransform.identity()] + motions
    gt = np.concatenate([compose(E, M).apply(p) - p for p, M in zip(noisy_t, world_next)])

    if spec.mode == "correlated":
        cloud_t1 = (cloud_t + gt)[rng.permutation(len(cloud_t))]
    else:
        ground1, groups1 = _sample_frame(rng, spec, objects, budgets, footprints, 1)
        parts = []
        for p, M in zip([ground1] + groups1, world_next):
            p = p + rng.normal(0.0, spec.noise_std, p.shape)
            parts.append(compose(E, M).apply(p))
        cloud_t1 = np.concatenate(parts)

    tracks_t, tracks_t1 = [], []
    for k, (obj, M) in enumerate(zip(objects, motions)):
        if not obj.tracked:
            continue
        _, R, _, tc, td, _ = _box_frame(obj, spec)
        pose1 = compose(compose(E, M), RigidTransform(R, tc))
        tracks_t.append(BoxTrack(f"obj-{k}", tc, td, R, frame_index=0))
        tracks_t1.append(BoxTrack(f"obj-{k}", pose1.translation, td, pose1.rotation,
                                  frame_index=1))
    return ScenePair(cloud_t=cloud_t, cloud_t_delta=cloud_t1, delta_t=spec.delta_t,
                     ego_motion=E, tracks_t=tracks_t, tracks_t_delta=tracks_t1,
                     gt_flow=gt, name=f"synth-{spec.seed}")


def dynamic_ratio(spec):
    """Fraction of frame-t points on moving objects, by construction."""
    n_dyn = sum(_budgets(spec, spec.moving(), spec.dynamic_points))
    total = (_scaled(spec.ground_points, spec) + n_dyn
             + sum(_budgets(spec, spec.structures, spec.static_points))
             + sum(_budgets(spec, spec.parked(), spec.parked_points)))
    return n_dyn / total if total else 0.0


# ---------------------------------------------------------------- presets

def random_ego(rng, max_translation=1.0, max_yaw_deg=5.0):
    """Planar ego motion with bounded translation norm and yaw."""
    r = max_translation * np.sqrt(rng.uniform())
    a = rng.uniform(-np.pi, np.pi)
    yaw = np.deg2rad(rng.uniform(-max_yaw_deg, max_yaw_deg))
    return yaw, (r * np.cos(a), r * np.sin(a), 0.0)


def _free_position(rng, placed, radius, r_min, r_max, y_band=None):
    for _ in range(1000):
        if y_band is None:
            rho = rng.uniform(r_min, r_max)
            phi = rng.uniform(-np.pi, np.pi)
            xy = np.array([rho * np.cos(phi), rho * np.sin(phi)])
        else:
            xy = np.array([rng.uniform(-r_max, r_max), rng.uniform(*y_band)])
            if np.hypot(*xy) < r_min:
                continue
        if all(np.hypot(*(xy - q)) > radius + s for q, s in placed):
            placed.append((xy, radius))
            return tuple(xy)
    raise SceneSpecError("could not place object without overlap")


def random_structures(rng, count, placed, r_min=8.0, r_max=26.0, y_band=None,
                      size=((1.5, 6.0), (1.0, 4.0), (2.5, 6.0))):
    out = []
    for _ in range(count):
        dims = tuple(rng.uniform(lo, hi) for lo, hi in size)
        xy = _free_position(rng, placed, 0.5 * np.hypot(dims[0], dims[1]) + 1.5,
                            r_min, r_max, y_band)
        out.append(ObjectSpec(center_xy=xy, dimensions=dims, yaw=rng.uniform(-np.pi, np.pi),
                              clearance=0.0, tracked=False))
    return tuple(out)


def random_vehicles(rng, count, placed, speed_range=(0.0, 0.0), r_min=5.0, r_max=20.0,
                    y_band=None, yaw_rate_max=0.0, heading=None):
    out = []
    for _ in range(count):
        dims = (rng.uniform(3.8, 5.0), rng.uniform(1.7, 2.0), rng.uniform(1.3, 1.7))
        xy = _free_position(rng, placed, 0.5 * np.hypot(dims[0], dims[1]) + 0.75,
                            r_min, r_max, y_band)
        yaw = rng.uniform(-np.pi, np.pi) if heading is None else heading + rng.normal(0, 0.05)
        out.append(ObjectSpec(center_xy=xy, dimensions=dims, yaw=yaw,
                              speed=rng.uniform(*speed_range),
                              yaw_rate=rng.uniform(-yaw_rate_max, yaw_rate_max),
                              clearance=rng.uniform(0.4, 0.5)))
    return tuple(out)


def flat_scene(seed=0, n_structures=4, n_parked=1, n_moving=2, speed_range=(3.0, 12.0),
               ego=True, **overrides):
    """Flat ground with random structures, parked and moving vehicles."""
    rng = np.random.default_rng([seed, 11])
    placed = [(np.zeros(2), 3.0)]
    vehicles = (random_vehicles(rng, n_moving, placed, speed_range, yaw_rate_max=0.3)
                + random_vehicles(rng, n_parked, placed))
    structures = random_structures(rng, n_structures, placed)
    yaw, t = random_ego(rng) if ego else (0.0, (0.0, 0.0, 0.0))
    spec = SceneSpec(structures=structures, vehicles=vehicles, ego_yaw=yaw,
                     ego_translation=t, seed=seed)
    return replace(spec, **overrides)


def compact_scene(seed=0, n_moving=2, speed_range=(3.0, 15.0), **overrides):
    """Small dense scene: two moving vehicles, one parked, three structures.

    Sized so that a full flow optimization stays cheap while objects carry
    enough points for clustering.
    """
    rng = np.random.default_rng([seed, 16])
    placed = [(np.zeros(2), 3.0)]
    vehicles = (random_vehicles(rng, n_moving, placed, speed_range, r_min=5.0, r_max=12.0,
                                yaw_rate_max=0.3)
                + random_vehicles(rng, 1, placed, r_min=5.0, r_max=12.0))
    structures = random_structures(rng, 3, placed, r_min=8.0, r_max=14.0,
                                   size=((1.0, 3.0), (0.6, 2.0), (1.5, 3.0)))
    yaw, t = random_ego(rng)
    spec = SceneSpec(structures=structures, vehicles=vehicles, ego_yaw=yaw, ego_translation=t,
                     extent=16.0, ground_points=2500, static_points=120, parked_points=60,
                     dynamic_points=400, seed=seed)
    return replace(spec, **overrides)


STEP_PROFILE = ((-100.0, 0.15), (-4.0, 0.15), (-4.0, 0.0), (4.0, 0.0), (4.0, 0.15),
                (100.0, 0.15))


def stepped_scene(seed=0, n_structures=4, n_moving=3, speed_range=(3.0, 12.0), **overrides):
    """Road at 0 m between sidewalks raised 0.15 m; traffic on the road."""
    rng = np.random.default_rng([seed, 12])
    placed = [(np.zeros(2), 3.0)]
    road = random_vehicles(rng, n_moving, placed, speed_range, r_min=4.0, r_max=24.0,
                           y_band=(-2.2, 2.2), heading=0.0)
    road = tuple(replace(v, heading=v.yaw if rng.uniform() < 0.5 else v.yaw + np.pi)
                 for v in road)
    walk = random_vehicles(rng, 2, placed, r_min=4.0, r_max=20.0, y_band=(7.0, 10.0))
    structures = random_structures(rng, n_structures, placed, y_band=(12.0, 22.0)) \
        + random_structures(rng, 2, placed, y_band=(-22.0, -12.0))
    yaw, t = random_ego(rng, 0.5, 2.0)
    spec = SceneSpec(ground_profile=STEP_PROFILE, structures=structures,
                     vehicles=road + walk, ego_yaw=yaw, ego_translation=t, seed=seed,
                     ground_points=1200, static_points=400, parked_points=300,
                     dynamic_points=450)
    return replace(spec, **overrides)


NON_PLANAR_PROFILE = ((-100.0, -1.5), (-12.0, -1.5), (-5.0, 0.0), (4.0, 0.0), (4.0, 0.15),
                      (100.0, 0.15))


def non_planar_scene(seed=0, **overrides):
    """Road, a raised sidewalk, and terrain dropping 1.5 m on the far side.

    Objects stand both on the road level and on the lowered terrain.
    """
    rng = np.random.default_rng([seed, 13])
    placed = [(np.zeros(2), 3.0)]
    road = random_vehicles(rng, 2, placed, (4.0, 10.0), r_min=4.0, r_max=18.0,
                           y_band=(-2.0, 2.0), heading=0.0)
    low = random_vehicles(rng, 3, placed, r_min=4.0, r_max=22.0, y_band=(-22.0, -14.0))
    low_poles = tuple(
        ObjectSpec(center_xy=_free_position(rng, placed, 1.5, 4.0, 22.0, (-24.0, -14.0)),
                   dimensions=(0.6, 0.6, 2.0), clearance=0.0, tracked=True)
        for _ in range(3))
    structures = random_structures(rng, 3, placed, y_band=(10.0, 22.0))
    spec = SceneSpec(ground_profile=NON_PLANAR_PROFILE, structures=structures,
                     vehicles=road + low + low_poles, seed=seed, ground_points=1500,
                     static_points=300, parked_points=500, dynamic_points=300)
    return replace(spec, **overrides)


def occluded_truck_scene(seed=0, **overrides):
    """A long truck whose rear half is hidden in the second frame."""
    rng = np.random.default_rng([seed, 14])
    placed = [(np.zeros(2), 3.0), (np.array([10.0, 3.0]), 6.0)]
    truck = ObjectSpec(center_xy=(10.0, 3.0), dimensions=(9.0, 2.4, 2.8), yaw=0.0,
                       speed=8.0, clearance=0.5, points=600, visible_fraction_t1=0.5)
    structures = random_structures(rng, 4, placed)
    spec = SceneSpec(structures=structures, vehicles=(truck,), seed=seed, parked_points=0,
                     dynamic_points=600)
    return replace(spec, **overrides)


def ratio_sweep_scene(ratio, total=2000, seed=0, **overrides):
    """Flat scene whose frame-t dynamic fraction is ``ratio`` of ``total``."""
    if not 0.0 <= ratio <= 1.0:
        raise SceneSpecError("ratio must lie in [0, 1]")
    rng = np.random.default_rng([seed, 15])
    placed = [(np.zeros(2), 3.0)]
    n_dyn = int(round(ratio * total))
    movers = random_vehicles(rng, 3, placed, (4.0, 8.0), r_min=5.0, r_max=15.0,
                             heading=0.0) if n_dyn else ()
    structures = random_structures(rng, 6, placed)
    rest = total - n_dyn
    ground = rest // 2
    yaw, t = random_ego(rng)
    spec = SceneSpec(structures=structures, vehicles=movers, ground_points=ground,
                     static_points=rest - ground, parked_points=0, dynamic_points=n_dyn,
                     ego_yaw=yaw, ego_translation=t, seed=seed)
    return replace(spec, **overrides)


PRESETS = {
    "flat": flat_scene,
    "compact": compact_scene,
    "stepped": stepped_scene,
    "non_planar": non_planar_scene,
    "occluded_truck": occluded_truck_scene,
}
