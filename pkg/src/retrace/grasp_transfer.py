"""Grasp transfer between grippers through shared surface coordinates.

Every gripper model carries a set of surface points together with normalized
spherical coordinates (lambda, phi) on the unit sphere.  Points on two
different grippers that land near each other on the sphere play the same
functional role in a grasp, so mutually-closest pairs of coordinates define
a correspondence.  Transferring a grasp then means finding the target pose
(and joint values, for articulated grippers) that brings the corresponding
target points onto the source points, which we solve with Adam on a
translation + unit-quaternion parameterization.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from retrace.errors import ValidationError
from retrace.geometry import Pose, Trajectory, quat_normalize, quat_to_matrix
from retrace.optim import adam_minimize

ZERO_RESIDUAL_EPSILON = 1e-12


@dataclass(frozen=True)
class UgcsCoord:
    """Normalized spherical surface coordinate, both components in [0, 1]."""

    lam: float
    phi: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.lam <= 1.0 and 0.0 <= self.phi <= 1.0):
            raise ValidationError(
                f"surface coordinates must lie in [0, 1], got ({self.lam}, {self.phi})"
            )

    def as_array(self) -> np.ndarray:
        return np.array([self.lam, self.phi])


@dataclass
class GripperModel:
    """Surface point model of a gripper (or hand) in its local frame.

    ``coords`` holds one (lambda, phi) pair per surface point.  Articulated
    grippers may carry ``joint_limits`` and a linear ``articulation`` tensor
    of shape (K, 3, n_joints): local point i at joint vector j is
    ``points[i] + articulation[i] @ j``.
    """

    name: str
    points: np.ndarray
    coords: np.ndarray
    joint_limits: tuple[np.ndarray, np.ndarray] | None = None
    articulation: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=float)
        self.coords = np.asarray(self.coords, dtype=float)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValidationError("gripper points must have shape (K, 3)")
        if self.coords.shape != (len(self.points), 2):
            raise ValidationError("need one (lambda, phi) pair per surface point")
        if len(self.points) < 3:
            raise ValidationError("gripper model needs at least 3 surface points")
        if np.any(self.coords < 0.0) or np.any(self.coords > 1.0):
            raise ValidationError("surface coordinates must lie in [0, 1]")
        if not np.all(np.isfinite(self.points)):
            raise ValidationError("gripper points must be finite")
        if self.joint_limits is not None:
            lower = np.asarray(self.joint_limits[0], dtype=float)
            upper = np.asarray(self.joint_limits[1], dtype=float)
            if lower.shape != upper.shape or lower.ndim != 1:
                raise ValidationError("joint limits must be matching 1-d arrays")
            if np.any(lower > upper):
                raise ValidationError("joint lower limits must not exceed upper limits")
            self.joint_limits = (lower, upper)
        if self.articulation is not None:
            self.articulation = np.asarray(self.articulation, dtype=float)
            n_joints = self.n_joints
            if self.articulation.shape != (len(self.points), 3, n_joints):
                raise ValidationError(
                    "articulation must have shape (K, 3, n_joints) matching the joint limits"
                )

    @property
    def n_joints(self) -> int:
        if self.joint_limits is None:
            return 0
        return len(self.joint_limits[0])

    def local_points(self, joints: np.ndarray | None = None) -> np.ndarray:
        """Surface points in the gripper frame at the given joint vector."""
        if self.articulation is None or joints is None:
            return self.points.copy()
        joints = np.asarray(joints, dtype=float)
        return self.points + self.articulation @ joints

    def mid_joints(self) -> np.ndarray | None:
        if self.joint_limits is None:
            return None
        lower, upper = self.joint_limits
        return 0.5 * (lower + upper)


@dataclass
class GraspConfig:
    """A gripper configuration: 6-DOF pose plus optional joint values."""

    pose: Pose
    joints: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.joints is not None:
            self.joints = np.asarray(self.joints, dtype=float)
            if self.joints.ndim != 1:
                raise ValidationError("joint vector must be 1-d")


def haversine(a, b) -> float:
    """Great-circle distance between two normalized surface coordinates.

    Coordinates map to sphere angles via longitude = 2*pi*lambda and
    latitude = pi*(phi - 1/2); the result lies in [0, pi].
    """
    a = a.as_array() if isinstance(a, UgcsCoord) else np.asarray(a, dtype=float)
    b = b.as_array() if isinstance(b, UgcsCoord) else np.asarray(b, dtype=float)
    lon_a, lat_a = 2.0 * np.pi * a[0], np.pi * (a[1] - 0.5)
    lon_b, lat_b = 2.0 * np.pi * b[0], np.pi * (b[1] - 0.5)
    inner = (
        np.sin(0.5 * (lat_b - lat_a)) ** 2
        + np.cos(lat_a) * np.cos(lat_b) * np.sin(0.5 * (lon_b - lon_a)) ** 2
    )
    return float(2.0 * np.arcsin(np.sqrt(np.clip(inner, 0.0, 1.0))))


def _haversine_matrix(c1: np.ndarray, c2: np.ndarray) -> np.ndarray:
    """Pairwise great-circle distances between two (K, 2) coordinate arrays."""
    lon1, lat1 = 2.0 * np.pi * c1[:, 0], np.pi * (c1[:, 1] - 0.5)
    lon2, lat2 = 2.0 * np.pi * c2[:, 0], np.pi * (c2[:, 1] - 0.5)
    dlat = 0.5 * (lat2[None, :] - lat1[:, None])
    dlon = 0.5 * (lon2[None, :] - lon1[:, None])
    inner = np.sin(dlat) ** 2 + np.outer(np.cos(lat1), np.cos(lat2)) * np.sin(dlon) ** 2
    return 2.0 * np.arcsin(np.sqrt(np.clip(inner, 0.0, 1.0)))


def mutual_correspondence(m1: GripperModel, m2: GripperModel) -> list[tuple[int, int]]:
    """Pairs (i, j) whose coordinates are mutually closest across the models.

    Ties break toward the lowest index, so the pairing is deterministic.
    """
    if len(m1.points) == 0 or len(m2.points) == 0:
        return []
    dist = _haversine_matrix(m1.coords, m2.coords)
    nearest_in_2 = np.argmin(dist, axis=1)
    nearest_in_1 = np.argmin(dist, axis=0)
    pairs = []
    for i, j in enumerate(nearest_in_2):
        if nearest_in_1[j] == i:
            pairs.append((i, int(j)))
    return pairs


def e_dist(src_points: np.ndarray, tgt_points: np.ndarray) -> float:
    """Mean Euclidean distance between corresponding point sets."""
    src = np.asarray(src_points, dtype=float)
    tgt = np.asarray(tgt_points, dtype=float)
    if src.shape != tgt.shape or src.ndim != 2 or len(src) == 0:
        raise ValueError("point sets must be non-empty and of equal shape")
    return float(np.mean(np.linalg.norm(src - tgt, axis=1)))


def e_joint_limit(joints: np.ndarray, lower: np.ndarray, upper: np.ndarray) -> float:
    """Squared hinge penalty for joint values outside their limits."""
    joints = np.asarray(joints, dtype=float)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if joints.shape != lower.shape or joints.shape != upper.shape:
        raise ValueError("joints and limits must have matching shapes")
    if joints.size == 0:
        return 0.0
    over = np.maximum(0.0, joints - upper)
    under = np.maximum(0.0, lower - joints)
    return float(np.sum(over**2) + np.sum(under**2))


def _rotation_point_jacobian(q: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """d(R(q) p)/dq for unit q, one (3, 4) block per point, stacked (K, 3, 4)."""
    w = q[0]
    v = q[1:4]
    k = len(pts)
    jac = np.empty((k, 3, 4))
    jac[:, :, 0] = 2.0 * np.cross(np.broadcast_to(v, pts.shape), pts)
    skew = np.zeros((k, 3, 3))
    skew[:, 0, 1] = -pts[:, 2]
    skew[:, 0, 2] = pts[:, 1]
    skew[:, 1, 0] = pts[:, 2]
    skew[:, 1, 2] = -pts[:, 0]
    skew[:, 2, 0] = -pts[:, 1]
    skew[:, 2, 1] = pts[:, 0]
    vdotp = pts @ v
    jac[:, :, 1:4] = 2.0 * (
        -w * skew
        + vdotp[:, None, None] * np.eye(3)
        + v[None, :, None] * pts[:, None, :]
        - 2.0 * pts[:, :, None] * v[None, None, :]
    )
    return jac


def _unpack(x: np.ndarray, n_joints: int):
    t = x[0:3]
    q = quat_normalize(x[3:7])
    joints = x[7 : 7 + n_joints] if n_joints else None
    return t, q, joints


def _renormalize_quat(x: np.ndarray) -> np.ndarray:
    out = x.copy()
    out[3:7] = quat_normalize(out[3:7])
    return out


def _make_transfer_objective(
    anchor_points: np.ndarray,
    target: GripperModel,
    target_indices: np.ndarray,
    n_joints: int,
):
    base_pts = target.points[target_indices]
    art = None
    if target.articulation is not None and n_joints:
        art = target.articulation[target_indices]
    limits = target.joint_limits
    k = len(anchor_points)

    def fun(x: np.ndarray):
        t, q, joints = _unpack(x, n_joints)
        local = base_pts if art is None or joints is None else base_pts + art @ joints
        rot = quat_to_matrix(q)
        world = local @ rot.T + t
        resid = world - anchor_points
        norms = np.linalg.norm(resid, axis=1)
        value = float(np.mean(norms))
        # unit residual directions; flat spots contribute no gradient
        safe = np.maximum(norms, ZERO_RESIDUAL_EPSILON)
        units = np.where(norms[:, None] > ZERO_RESIDUAL_EPSILON, resid / safe[:, None], 0.0)
        units /= k
        grad = np.zeros_like(x)
        grad[0:3] = units.sum(axis=0)
        jac_q = _rotation_point_jacobian(q, local)
        grad_q = np.einsum("kij,ki->j", jac_q, units)
        # pull the gradient back through quaternion normalization
        grad[3:7] = grad_q - q * float(q @ grad_q)
        if n_joints:
            grad_joints = np.einsum("kij,ki->j", np.einsum("ab,kbj->kaj", rot, art), units)
            lower, upper = limits
            over = np.maximum(0.0, joints - upper)
            under = np.maximum(0.0, lower - joints)
            value += float(np.sum(over**2) + np.sum(under**2))
            grad[7:] = grad_joints + 2.0 * over - 2.0 * under
        return value, grad

    return fun


def transfer_objective_value(
    source: GripperModel,
    source_config: GraspConfig,
    target: GripperModel,
    candidate: GraspConfig,
) -> float:
    """Correspondence objective at a candidate target configuration."""
    pairs = mutual_correspondence(source, target)
    if not pairs:
        raise ValidationError("no mutual surface correspondence between the models")
    src_idx = np.array([i for i, _ in pairs])
    tgt_idx = np.array([j for _, j in pairs])
    anchors = source.local_points(source_config.joints)[src_idx] @ source_config.pose.matrix()[
        :3, :3
    ].T + source_config.pose.t
    local = target.local_points(candidate.joints)[tgt_idx]
    world = local @ candidate.pose.matrix()[:3, :3].T + candidate.pose.t
    value = e_dist(anchors, world)
    if target.n_joints and candidate.joints is not None:
        lower, upper = target.joint_limits
        value += e_joint_limit(candidate.joints, lower, upper)
    return value


def transfer_grasp(
    source: GripperModel,
    source_config: GraspConfig,
    target: GripperModel,
    init: GraspConfig,
    *,
    iterations: int = 2000,
    step: float = 1e-2,
    step_decay: float = 0.996,
    callback=None,
) -> GraspConfig:
    """Find the target configuration whose corresponding points meet the source.

    Minimizes mean corresponding-point distance plus the joint-limit penalty
    with Adam, renormalizing the quaternion block after every step.
    """
    pairs = mutual_correspondence(source, target)
    if not pairs:
        raise ValidationError("no mutual surface correspondence between the models")
    src_idx = np.array([i for i, _ in pairs])
    tgt_idx = np.array([j for _, j in pairs])

    src_local = source.local_points(source_config.joints)[src_idx]
    rot_s = source_config.pose.matrix()[:3, :3]
    anchors = src_local @ rot_s.T + source_config.pose.t

    n_joints = target.n_joints
    x0 = np.zeros(7 + n_joints)
    x0[0:3] = init.pose.t
    x0[3:7] = init.pose.q
    if n_joints:
        if init.joints is None:
            x0[7:] = target.mid_joints()
        else:
            if len(init.joints) != n_joints:
                raise ValidationError("init joint vector length does not match the target")
            x0[7:] = init.joints

    fun = _make_transfer_objective(anchors, target, tgt_idx, n_joints)
    x_star = adam_minimize(
        fun,
        x0,
        step=step,
        iters=iterations,
        step_decay=step_decay,
        project=_renormalize_quat,
        callback=callback,
    )
    t, q, joints = _unpack(x_star, n_joints)
    return GraspConfig(pose=Pose(q=q, t=t.copy()), joints=None if joints is None else joints.copy())


def transfer_trajectory(
    hand_frames,
    target: GripperModel,
    *,
    init: GraspConfig | None = None,
    frame_id: str = "camera",
    iterations: int = 2000,
    warm_iterations: int = 600,
    step: float = 1e-2,
    step_decay: float = 0.996,
) -> Trajectory:
    """Transfer a sequence of hand grasps into a gripper pose trajectory.

    The first frame starts from ``init`` (defaulting to the observed hand
    pose); every later frame warm-starts from the previous solution with a
    reduced iteration budget.
    """
    frames = list(hand_frames)
    if not frames:
        raise ValidationError("need at least one hand frame to transfer")
    poses = []
    current = init
    for index, (model, config) in enumerate(frames):
        if current is None:
            joints = target.mid_joints()
            current = GraspConfig(pose=config.pose, joints=joints)
        budget = iterations if index == 0 else warm_iterations
        current = transfer_grasp(
            model,
            config,
            target,
            current,
            iterations=budget,
            step=step if index == 0 else step * 0.5,
            step_decay=step_decay,
        )
        poses.append(current.pose)
    return Trajectory(frame_id=frame_id, poses=poses)


def gripper_to_dict(model: GripperModel) -> dict:
    payload = {
        "name": model.name,
        "points": model.points.tolist(),
        "ugcs": model.coords.tolist(),
    }
    if model.joint_limits is not None:
        lower, upper = model.joint_limits
        payload["limits"] = {"lower": lower.tolist(), "upper": upper.tolist()}
    if model.articulation is not None:
        payload["articulation"] = model.articulation.tolist()
    return payload


def gripper_from_dict(payload: dict) -> GripperModel:
    try:
        limits = None
        if "limits" in payload:
            limits = (
                np.asarray(payload["limits"]["lower"], dtype=float),
                np.asarray(payload["limits"]["upper"], dtype=float),
            )
        articulation = None
        if "articulation" in payload:
            articulation = np.asarray(payload["articulation"], dtype=float)
        return GripperModel(
            name=payload["name"],
            points=np.asarray(payload["points"], dtype=float),
            coords=np.asarray(payload["ugcs"], dtype=float),
            joint_limits=limits,
            articulation=articulation,
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"invalid gripper model payload: {exc}") from exc


def load_gripper_model(path) -> GripperModel:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"gripper model {path} is not valid JSON: {exc}") from exc
    return gripper_from_dict(payload)


def save_gripper_model(model: GripperModel, path) -> None:
    Path(path).write_text(json.dumps(gripper_to_dict(model), indent=2))
