"""Task-space alignment of demonstration trajectories.

The demo gripper trajectory lives in the camera frame and follows the object
poses seen during the demonstration.  To execute in a new scene the
trajectory is left-multiplied by the object pose delta, optionally blended
with a second delta-aligned copy for dual-object tasks, mapped into the
robot base frame, and cleaned of duplicates and outliers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from retrace.errors import ValidationError
from retrace.geometry import Pose, Trajectory, compose, interp_pose, inverse

DEFAULT_MIN_GAP = 0.005
DEFAULT_OUTLIER_FACTOR = 3.0


@dataclass(frozen=True)
class ObjectDelta:
    """Rigid pose change of an object between demonstration and execution."""

    delta: Pose
    name: str = ""


@dataclass(frozen=True)
class BlendParams:
    """Gaussian blend width, in frames; the weight applies to trajectory 1."""

    sigma: float

    def __post_init__(self) -> None:
        if not self.sigma > 0.0:
            raise ValidationError(f"blend sigma must be positive, got {self.sigma}")


@dataclass(frozen=True)
class RefineParams:
    """Cleanup thresholds: duplicate gap in meters, outlier step multiplier."""

    min_gap: float = DEFAULT_MIN_GAP
    outlier_factor: float = DEFAULT_OUTLIER_FACTOR

    def __post_init__(self) -> None:
        if self.min_gap < 0.0:
            raise ValidationError(f"min_gap must be nonnegative, got {self.min_gap}")
        if not self.outlier_factor > 1.0:
            raise ValidationError(
                f"outlier_factor must exceed 1, got {self.outlier_factor}"
            )


def object_delta(t_demo: Pose, t_exe: Pose, name: str = "") -> ObjectDelta:
    """Delta taking the demo-time object pose to the execution-time pose.

    Bit-identical inputs short-circuit to the exact identity delta, so an
    unmoved object aligns a trajectory without floating-point drift.
    """
    if np.array_equal(t_demo.q, t_exe.q) and np.array_equal(t_demo.t, t_exe.t):
        return ObjectDelta(delta=Pose.identity(), name=name)
    return ObjectDelta(delta=compose(t_exe, inverse(t_demo)), name=name)


def apply_delta(traj: Trajectory, d: ObjectDelta) -> Trajectory:
    """Left-multiply every pose by the object delta; the frame is unchanged."""
    poses = [compose(d.delta, pose) for pose in traj.poses]
    return Trajectory(frame_id=traj.frame_id, poses=poses, timestamps=traj.timestamps)


def blend_weights(length: int, sigma: float) -> np.ndarray:
    """Gaussian weights alpha(i) = exp(-(i-1)^2 / (2 sigma^2)) for i = 1..T.

    Frame 1 gets weight exactly 1; the weight decays toward 0 with distance
    from the start, so a blend moves from trajectory 1 toward trajectory 2.
    """
    idx = np.arange(length, dtype=float)
    return np.exp(-(idx**2) / (2.0 * sigma * sigma))


def blend_dual(traj1: Trajectory, traj2: Trajectory, p: BlendParams) -> Trajectory:
    """Interpolate two equal-length trajectories with Gaussian weights."""
    if len(traj1.poses) != len(traj2.poses):
        raise ValueError(
            f"cannot blend trajectories of lengths {len(traj1.poses)} and {len(traj2.poses)}"
        )
    if traj1.frame_id != traj2.frame_id:
        raise ValueError(
            f"cannot blend trajectories in frames {traj1.frame_id!r} and {traj2.frame_id!r}"
        )
    alphas = blend_weights(len(traj1.poses), p.sigma)
    poses = [
        interp_pose(a, b, float(alpha))
        for a, b, alpha in zip(traj1.poses, traj2.poses, alphas)
    ]
    return Trajectory(frame_id=traj1.frame_id, poses=poses, timestamps=traj1.timestamps)


def to_base(traj: Trajectory, t_bc: Pose) -> Trajectory:
    """Map a camera-frame trajectory into the robot base frame."""
    if traj.frame_id != "camera":
        raise ValueError(f"expected a camera-frame trajectory, got {traj.frame_id!r}")
    poses = [compose(t_bc, pose) for pose in traj.poses]
    return Trajectory(frame_id="base", poses=poses, timestamps=traj.timestamps)


def refine(traj: Trajectory, p: RefineParams | None = None) -> Trajectory:
    """Drop outlier poses and poses too close to their predecessor.

    A pose is an outlier when its translation sits farther than
    ``outlier_factor`` times the median consecutive step from both of its
    original neighbors.  After outlier removal, any pose closer than
    ``min_gap`` to the previously kept pose is dropped.  The first and last
    poses always survive.
    """
    if p is None:
        p = RefineParams()
    n = len(traj.poses)
    if n <= 2:
        return traj
    pts = traj.translations()
    steps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    median_step = float(np.median(steps))
    threshold = p.outlier_factor * median_step

    keep = np.ones(n, dtype=bool)
    if median_step > 0.0:
        for i in range(1, n - 1):
            d_prev = np.linalg.norm(pts[i] - pts[i - 1])
            d_next = np.linalg.norm(pts[i] - pts[i + 1])
            if d_prev > threshold and d_next > threshold:
                keep[i] = False

    kept_indices = [0]
    survivors = [i for i in range(1, n) if keep[i]]
    for i in survivors:
        if i == n - 1:
            kept_indices.append(i)
            continue
        if np.linalg.norm(pts[i] - pts[kept_indices[-1]]) < p.min_gap:
            continue
        kept_indices.append(i)

    poses = [traj.poses[i] for i in kept_indices]
    timestamps = None
    if traj.timestamps is not None:
        timestamps = [traj.timestamps[i] for i in kept_indices]
    return Trajectory(frame_id=traj.frame_id, poses=poses, timestamps=timestamps)


def delta_from_dict(payload: dict) -> ObjectDelta:
    try:
        t_demo = Pose.from_dict(payload["t_demo"])
        t_exe = Pose.from_dict(payload["t_exe"])
        return object_delta(t_demo, t_exe, name=payload.get("object", ""))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"invalid object delta payload: {exc}") from exc


def delta_to_dict(d: ObjectDelta, t_demo: Pose, t_exe: Pose) -> dict:
    return {"object": d.name, "t_demo": t_demo.to_dict(), "t_exe": t_exe.to_dict()}


def load_deltas(path) -> list[ObjectDelta]:
    """Read a list of object deltas from a JSON fixture file."""
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"delta file {path} is not valid JSON: {exc}") from exc
    if isinstance(payload, dict):
        payload = [payload]
    return [delta_from_dict(entry) for entry in payload]
