"""Domain types and geometry primitives shared by every stage.

Point clouds and flow fields are plain ``(N, 3)`` float arrays, validated on
entry with :func:`check_points` / :func:`check_flow`.  Rigid transforms, box
tracks and scene pairs are small immutable dataclasses.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.utils import check_array

ORTHONORMAL_TOL = 1e-9


class GeometryError(ValueError):
    """Raised for invalid or degenerate geometric input."""


def check_points(points, *, name="points", allow_empty=True, dtype=np.float64):
    """Validate an ``(N, 3)`` array of finite coordinates and return it."""
    points = np.asarray(points)
    if points.ndim == 2 and points.shape[0] == 0:
        if not allow_empty:
            raise GeometryError(f"{name} is empty")
        if points.shape[1] != 3:
            raise GeometryError(f"{name} must have shape (N, 3), got {points.shape}")
        return points.astype(dtype, copy=False)
    points = check_array(points, dtype=dtype, ensure_2d=True, ensure_all_finite=True,
                         input_name=name)
    if points.shape[1] != 3:
        raise GeometryError(f"{name} must have shape (N, 3), got {points.shape}")
    return points


def check_flow(flow, count, *, name="flow"):
    flow = check_points(flow, name=name)
    if flow.shape[0] != count:
        raise GeometryError(f"{name} has {flow.shape[0]} vectors, expected {count}")
    return flow


def _is_rotation(R, tol=ORTHONORMAL_TOL):
    return (R.shape == (3, 3)
            and np.all(np.isfinite(R))
            and np.abs(R @ R.T - np.eye(3)).max() <= tol
            and abs(np.linalg.det(R) - 1.0) <= tol)


def orthonormalize(R):
    """Project a near-rotation onto SO(3) (closest in Frobenius norm)."""
    U, _, Vt = np.linalg.svd(R)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


@dataclass(frozen=True)
class RigidTransform:
    """Element of SE(3) acting as ``x -> R @ x + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not _is_rotation(R):
            raise GeometryError("rotation is not orthonormal with det +1")
        if not np.all(np.isfinite(t)):
            raise GeometryError("translation is not finite")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix):
        matrix = np.asarray(matrix, dtype=np.float64)
        return cls(matrix[:3, :3], matrix[:3, 3])

    @classmethod
    def from_yaw(cls, yaw, translation=(0.0, 0.0, 0.0)):
        return cls(yaw_matrix(yaw), translation)

    def as_matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def inverse(self):
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def apply(self, points):
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def rotation_angle(self):
        """Rotation magnitude in radians."""
        c = (np.trace(self.rotation) - 1.0) / 2.0
        return float(np.arccos(np.clip(c, -1.0, 1.0)))


def yaw_matrix(yaw):
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def apply_transform(cloud, T):
    """Map every point through ``T``; the point count is preserved."""
    cloud = check_points(cloud, name="cloud")
    return T.apply(cloud)


def compose(a, b):
    """Return the transform that applies ``b`` first, then ``a``."""
    R = a.rotation @ b.rotation
    if np.abs(R @ R.T - np.eye(3)).max() > ORTHONORMAL_TOL:
        R = orthonormalize(R)
    return RigidTransform(R, a.rotation @ b.translation + a.translation)


def crop_to_square(cloud, half_extent):
    """Keep points with ``|x| <= half_extent`` and ``|y| <= half_extent``.

    Returns the cropped cloud and the indices of the kept points in the input.
    """
    if not half_extent > 0:
        raise ValueError("half_extent must be positive")
    cloud = check_points(cloud, name="cloud")
    keep = (np.abs(cloud[:, 0]) <= half_extent) & (np.abs(cloud[:, 1]) <= half_extent)
    index = np.flatnonzero(keep)
    return cloud[index], index


@dataclass(frozen=True)
class BoxTrack:
    """Oriented bounding box of a tracked object in one frame.

    ``rotation`` maps box-local axes into the frame; ``dimensions`` are the
    full extents (length, width, height) along the box-local axes.
    """

    track_id: str
    center: np.ndarray
    dimensions: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    frame_index: int = 0

    def __post_init__(self):
        center = np.array(self.center, dtype=np.float64).reshape(3)
        dims = np.array(self.dimensions, dtype=np.float64).reshape(3)
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        if not np.all(dims > 0):
            raise GeometryError(f"box {self.track_id!r} has non-positive dimensions")
        if not _is_rotation(R, tol=1e-6):
            raise GeometryError(f"box {self.track_id!r} has a malformed rotation")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "dimensions", dims)
        object.__setattr__(self, "rotation", orthonormalize(R))

    @property
    def yaw(self):
        return float(np.arctan2(self.rotation[1, 0], self.rotation[0, 0]))

    @property
    def pose(self):
        """Box-local to frame transform."""
        return RigidTransform(self.rotation, self.center)

    def contains(self, points, margin=0.0):
        """Closed containment test in the box frame."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        local = (points - self.center) @ self.rotation
        return np.all(np.abs(local) <= self.dimensions / 2.0 + margin, axis=1)


@dataclass(frozen=True)
class ScenePair:
    """Two time-adjacent clouds plus optional ego pose, tracks and GT flow.

    ``ego_motion`` maps frame-t coordinates into frame-(t+delta) coordinates.
    """

    cloud_t: np.ndarray
    cloud_t_delta: np.ndarray
    delta_t: float = 0.1
    ego_motion: RigidTransform | None = None
    tracks_t: tuple = ()
    tracks_t_delta: tuple = ()
    gt_flow: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "cloud_t", check_points(self.cloud_t, name="cloud_t"))
        object.__setattr__(self, "cloud_t_delta",
                           check_points(self.cloud_t_delta, name="cloud_t_delta"))
        if not self.delta_t > 0:
            raise GeometryError("delta_t must be positive")
        if self.gt_flow is not None:
            object.__setattr__(self, "gt_flow",
                               check_flow(self.gt_flow, len(self.cloud_t), name="gt_flow"))
        object.__setattr__(self, "tracks_t", tuple(self.tracks_t))
        object.__setattr__(self, "tracks_t_delta", tuple(self.tracks_t_delta))

    def replace(self, **changes):
        fields = dict(cloud_t=self.cloud_t, cloud_t_delta=self.cloud_t_delta,
                      delta_t=self.delta_t, ego_motion=self.ego_motion,
                      tracks_t=self.tracks_t, tracks_t_delta=self.tracks_t_delta,
                      gt_flow=self.gt_flow, name=self.name)
        fields.update(changes)
        return ScenePair(**fields)
