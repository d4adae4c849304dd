"""Rigid-body poses, quaternion algebra, and pose trajectories.

Conventions used throughout the package:

- Quaternions are unit length, ordered ``[w, x, y, z]``, and represent active
  rotations.  A pose maps points from its child frame into its parent frame:
  ``p_parent = R @ p_child + t``.
- Rotations are stored as quaternions and converted to matrices on demand.
  Quaternions are renormalized after construction and interpolation so that
  long composition chains stay orthonormal to well below 1e-9.
- Angles are radians, translations are meters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Quaternion norms below this are considered degenerate input.
QUAT_NORM_EPSILON = 1e-12

# Quaternion dot products above this use linear interpolation in slerp to
# avoid dividing by a vanishing sin(angle).
SLERP_PARALLEL_THRESHOLD = 0.9999995


def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Return ``q`` scaled to unit length, raising on near-zero input."""
    q = np.asarray(q, dtype=float)
    if q.shape != (4,):
        raise ValueError(f"quaternion must have shape (4,), got {q.shape}")
    norm = float(np.linalg.norm(q))
    if norm < QUAT_NORM_EPSILON:
        raise ValueError("cannot normalize a near-zero quaternion")
    # Already-unit input passes through unchanged so serialization roundtrips
    # are bit-exact.
    if abs(norm - 1.0) < 1e-12:
        return q
    return q / norm


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product ``a * b`` in [w, x, y, z] order."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion."""
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(rot: np.ndarray) -> np.ndarray:
    """Quaternion of a rotation matrix via Shepperd's method.

    Branches on the largest diagonal combination so the divisor stays well
    away from zero for every input rotation.
    """
    rot = np.asarray(rot, dtype=float)
    if rot.shape != (3, 3):
        raise ValueError(f"rotation matrix must have shape (3, 3), got {rot.shape}")
    trace = rot[0, 0] + rot[1, 1] + rot[2, 2]
    if trace > 0.0:
        s = np.sqrt(trace + 1.0) * 2.0
        q = np.array(
            [
                0.25 * s,
                (rot[2, 1] - rot[1, 2]) / s,
                (rot[0, 2] - rot[2, 0]) / s,
                (rot[1, 0] - rot[0, 1]) / s,
            ]
        )
    elif rot[0, 0] > rot[1, 1] and rot[0, 0] > rot[2, 2]:
        s = np.sqrt(1.0 + rot[0, 0] - rot[1, 1] - rot[2, 2]) * 2.0
        q = np.array(
            [
                (rot[2, 1] - rot[1, 2]) / s,
                0.25 * s,
                (rot[0, 1] + rot[1, 0]) / s,
                (rot[0, 2] + rot[2, 0]) / s,
            ]
        )
    elif rot[1, 1] > rot[2, 2]:
        s = np.sqrt(1.0 + rot[1, 1] - rot[0, 0] - rot[2, 2]) * 2.0
        q = np.array(
            [
                (rot[0, 2] - rot[2, 0]) / s,
                (rot[0, 1] + rot[1, 0]) / s,
                0.25 * s,
                (rot[1, 2] + rot[2, 1]) / s,
            ]
        )
    else:
        s = np.sqrt(1.0 + rot[2, 2] - rot[0, 0] - rot[1, 1]) * 2.0
        q = np.array(
            [
                (rot[1, 0] - rot[0, 1]) / s,
                (rot[0, 2] + rot[2, 0]) / s,
                (rot[1, 2] + rot[2, 1]) / s,
                0.25 * s,
            ]
        )
    return quat_normalize(q)


def quat_slerp(qa: np.ndarray, qb: np.ndarray, t: float) -> np.ndarray:
    """Spherical interpolation from ``qa`` (t=0) to ``qb`` (t=1), shortest arc."""
    qa = quat_normalize(qa)
    qb = quat_normalize(qb)
    dot = float(np.dot(qa, qb))
    # q and -q encode the same rotation; flip to take the shorter arc.
    if dot < 0.0:
        qb = -qb
        dot = -dot
    if t == 0.0:
        return qa
    if t == 1.0:
        return qb
    if dot > SLERP_PARALLEL_THRESHOLD:
        return quat_normalize(qa + t * (qb - qa))
    theta = np.arccos(min(dot, 1.0))
    sin_theta = np.sin(theta)
    wa = np.sin((1.0 - t) * theta) / sin_theta
    wb = np.sin(t * theta) / sin_theta
    return quat_normalize(wa * qa + wb * qb)


@dataclass
class Pose:
    """Rigid transform with quaternion rotation ``q`` and translation ``t``."""

    q: np.ndarray
    t: np.ndarray
    _matrix: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.q = quat_normalize(np.asarray(self.q, dtype=float))
        self.t = np.asarray(self.t, dtype=float)
        if self.t.shape != (3,):
            raise ValueError(f"translation must have shape (3,), got {self.t.shape}")

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, rot: np.ndarray, t: np.ndarray) -> Pose:
        return cls(matrix_to_quat(rot), t)

    def matrix(self) -> np.ndarray:
        """3x3 rotation matrix, computed once and cached."""
        if self._matrix is None:
            self._matrix = quat_to_matrix(self.q)
        return self._matrix

    def to_dict(self) -> dict:
        return {"q": [float(v) for v in self.q], "t": [float(v) for v in self.t]}

    @classmethod
    def from_dict(cls, data: dict) -> Pose:
        return cls(np.array(data["q"], dtype=float), np.array(data["t"], dtype=float))


def translation(x: float, y: float, z: float) -> Pose:
    """Pure-translation pose."""
    return Pose(np.array([1.0, 0.0, 0.0, 0.0]), np.array([x, y, z], dtype=float))


def rot_z(theta: float) -> Pose:
    """Rotation about the +z axis by ``theta`` radians, zero translation."""
    half = 0.5 * theta
    return Pose(np.array([np.cos(half), 0.0, 0.0, np.sin(half)]), np.zeros(3))


def compose(a: Pose, b: Pose) -> Pose:
    """Pose of frame ``b`` expressed through ``a``: first apply b, then a."""
    return Pose(quat_multiply(a.q, b.q), a.matrix() @ b.t + a.t)


def inverse(a: Pose) -> Pose:
    rot_t = a.matrix().T
    return Pose(quat_conjugate(a.q), -(rot_t @ a.t))


def geodesic_angle(r1: Pose | np.ndarray, r2: Pose | np.ndarray) -> float:
    """Angle of the relative rotation between two rotations, in [0, pi].

    Accepts poses (their rotation part is used) or 3x3 matrices.  The arccos
    argument is clamped to [-1, 1] so roundoff near identity or pi-flips
    cannot produce NaN.
    """
    m1 = r1.matrix() if isinstance(r1, Pose) else np.asarray(r1, dtype=float)
    m2 = r2.matrix() if isinstance(r2, Pose) else np.asarray(r2, dtype=float)
    rel_trace = float(np.trace(m1 @ m2.T))
    return float(np.arccos(np.clip(0.5 * (rel_trace - 1.0), -1.0, 1.0)))


def interp_pose(a: Pose, b: Pose, w: float) -> Pose:
    """Interpolate between two poses; ``w`` is the weight on ``a``.

    Rotation is shortest-arc slerp, translation is linear.  ``w = 1`` returns
    ``a`` exactly and ``w = 0`` returns ``b`` exactly.
    """
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"interpolation weight must lie in [0, 1], got {w}")
    return Pose(quat_slerp(b.q, a.q, w), w * a.t + (1.0 - w) * b.t)


def transform_points(pose: Pose, points: np.ndarray) -> np.ndarray:
    """Apply ``pose`` to an (n, 3) array of points."""
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError(f"points must have shape (n, 3), got {points.shape}")
    return points @ pose.matrix().T + pose.t


@dataclass
class Trajectory:
    """Sequence of poses in a named frame with optional timestamps."""

    frame_id: str
    poses: list[Pose]
    timestamps: np.ndarray | None = None

    def __post_init__(self) -> None:
        if len(self.poses) < 1:
            raise ValueError("trajectory must contain at least one pose")
        if self.timestamps is not None:
            self.timestamps = np.asarray(self.timestamps, dtype=float)
            if self.timestamps.shape != (len(self.poses),):
                raise ValueError(
                    f"expected {len(self.poses)} timestamps, got {self.timestamps.shape}"
                )
            if len(self.timestamps) > 1 and np.any(np.diff(self.timestamps) <= 0.0):
                raise ValueError("timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.poses)

    def translations(self) -> np.ndarray:
        """(n, 3) array of pose translations."""
        return np.array([p.t for p in self.poses])

    def to_dict(self) -> dict:
        data: dict = {
            "frame": self.frame_id,
            "poses": [p.to_dict() for p in self.poses],
        }
        if self.timestamps is not None:
            data["timestamps"] = [float(v) for v in self.timestamps]
        return data

    @classmethod
    def from_dict(cls, data: dict) -> Trajectory:
        timestamps = data.get("timestamps")
        return cls(
            frame_id=data["frame"],
            poses=[Pose.from_dict(p) for p in data["poses"]],
            timestamps=None if timestamps is None else np.array(timestamps, dtype=float),
        )
