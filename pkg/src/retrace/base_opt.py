"""Stage I: optimal base placement for a reach task.

The robot base moves in the plane as (x, y, theta).  Given waypoints of the
desired end-effector trajectory in the current base frame, we jointly solve
for the base motion and one arm configuration per waypoint so the arm can
reach the waypoints with minimal base effort.  The goal term compares poses
through a cloud of end-effector surface points, which blends position and
orientation error in one metric.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from retrace.errors import ValidationError
from retrace.geometry import Pose, Trajectory, rot_z
from retrace.kinematics import (
    GripperPointSet,
    JointConfig,
    KinematicChain,
    batch_frames,
    batch_point_jacobians,
    default_ee_points,
)
from retrace.optim import NlpProblem, SolveReport, solve_nlp

DEFAULT_N_SAMPLES = 10
DEFAULT_LAMBDA_EFFORT = 0.01
DEFAULT_LAMBDA_GOAL = 1.0


@dataclass(frozen=True)
class BaseConfig:
    """Planar base motion: forward/lateral offset plus yaw."""

    x: float
    y: float
    theta: float

    def __post_init__(self) -> None:
        if not (-np.pi <= self.theta <= np.pi):
            raise ValidationError(f"theta must lie in [-pi, pi], got {self.theta}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])


@dataclass(frozen=True)
class TaskBounds:
    """Box bounds on (x, y, theta) derived from the task-space extent."""

    x_min: np.ndarray
    x_max: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "x_min", np.asarray(self.x_min, dtype=float).reshape(3))
        object.__setattr__(self, "x_max", np.asarray(self.x_max, dtype=float).reshape(3))
        if np.any(self.x_min > self.x_max):
            raise ValidationError("task bounds must satisfy x_min <= x_max")
        if self.x_min[0] != 0.0:
            raise ValidationError("forward motion bound must start at 0")
        if not (self.x_min[2] == -np.pi and self.x_max[2] == np.pi):
            raise ValidationError("yaw bounds must be [-pi, pi]")


@dataclass
class BaseOptParams:
    """Waypoint count, cost weights, and the end-effector point cloud."""

    n_samples: int = DEFAULT_N_SAMPLES
    lambda_effort: float = DEFAULT_LAMBDA_EFFORT
    lambda_goal: float = DEFAULT_LAMBDA_GOAL
    ee_points: GripperPointSet = field(default_factory=default_ee_points)

    def __post_init__(self) -> None:
        if self.n_samples < 1:
            raise ValidationError(f"n_samples must be >= 1, got {self.n_samples}")
        if self.lambda_effort < 0.0 or self.lambda_goal < 0.0:
            raise ValidationError("cost weights must be nonnegative")


def task_bounds(cloud_base_frame: np.ndarray) -> TaskBounds:
    """Bounds spanned by the task-space cloud: forward to max x, across y."""
    cloud = np.asarray(cloud_base_frame, dtype=float).reshape(-1, 3)
    if len(cloud) == 0:
        raise ValidationError("cannot derive task bounds from an empty cloud")
    x_min = np.array([0.0, float(np.min(cloud[:, 1])), -np.pi])
    x_max = np.array([float(np.max(cloud[:, 0])), float(np.max(cloud[:, 1])), np.pi])
    return TaskBounds(x_min=x_min, x_max=x_max)


def base_transform(config: BaseConfig) -> Pose:
    """Pose of the moved base in the original base frame."""
    pose = rot_z(config.theta)
    return Pose(q=pose.q, t=np.array([config.x, config.y, 0.0]))


def goal_cost(t_a: Pose, t_b: Pose, pts: GripperPointSet) -> float:
    """Sum of squared distances between the two transforms of the ee points."""
    a = pts.points @ t_a.matrix().T + t_a.t
    b = pts.points @ t_b.matrix().T + t_b.t
    return float(np.sum((a - b) ** 2))


def sample_waypoints(traj: Trajectory, n: int) -> Trajectory:
    """Evenly spaced subset of n poses, always keeping the two endpoints."""
    total = len(traj.poses)
    if not 1 <= n <= total:
        raise ValidationError(f"sample count must lie in [1, {total}], got {n}")
    if n == 1:
        indices = [0]
    else:
        indices = np.rint(np.linspace(0.0, total - 1, n)).astype(int).tolist()
    poses = [traj.poses[i] for i in indices]
    timestamps = None
    if traj.timestamps is not None:
        timestamps = [traj.timestamps[i] for i in indices]
    return Trajectory(frame_id=traj.frame_id, poses=poses, timestamps=timestamps)


def _waypoint_targets(traj: Trajectory, pts: GripperPointSet) -> np.ndarray:
    """World positions of the ee points at every waypoint pose, (N, m, 3)."""
    targets = np.empty((len(traj.poses), len(pts), 3))
    for i, pose in enumerate(traj.poses):
        targets[i] = pts.points @ pose.matrix().T + pose.t
    return targets


def make_base_objective(
    chain: KinematicChain,
    targets: np.ndarray,
    params: BaseOptParams,
):
    """Objective over z = [x, y, theta, q_1, ..., q_N] with analytic gradient."""
    n_way = targets.shape[0]
    n_joints = chain.n
    pts = params.ee_points.points
    m = len(pts)
    ee_link = np.full(m, n_joints - 1)

    def fun(z: np.ndarray):
        base = z[0:3]
        configs = z[3:].reshape(n_way, n_joints)
        frames = batch_frames(chain, configs)
        # ee point positions in the unmoved base frame
        local = np.einsum("bij,mj->bmi", frames.rot_ee, pts) + frames.t_ee[:, None, :]
        c, s = np.cos(base[2]), np.sin(base[2])
        rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        moved = local @ rz.T
        moved[:, :, 0] += base[0]
        moved[:, :, 1] += base[1]
        resid = moved - targets
        f_goal = float(np.sum(resid**2))
        f = params.lambda_effort * float(base @ base) + params.lambda_goal * f_goal

        grad = np.empty_like(z)
        grad[0] = 2.0 * params.lambda_goal * float(np.sum(resid[:, :, 0]))
        grad[1] = 2.0 * params.lambda_goal * float(np.sum(resid[:, :, 1]))
        spun = np.empty_like(moved)  # z_hat x (R_z * local point)
        spun[:, :, 0] = -(moved[:, :, 1] - base[1])
        spun[:, :, 1] = moved[:, :, 0] - base[0]
        spun[:, :, 2] = 0.0
        grad[2] = 2.0 * params.lambda_goal * float(np.sum(resid * spun))
        grad[0:3] += 2.0 * params.lambda_effort * base

        jac = batch_point_jacobians(chain, frames, local, ee_link)  # (N, m, 3, n)
        pulled = resid @ rz  # rows r^T R_z
        grad[3:] = (2.0 * params.lambda_goal * np.einsum("bmi,bmin->bn", pulled, jac)).ravel()
        return f, grad

    return fun


def optimize_base(
    traj_samples: Trajectory,
    chain: KinematicChain,
    env_cloud: np.ndarray,
    params: BaseOptParams | None = None,
    *,
    bounds: TaskBounds | None = None,
    max_iterations: int = 100,
    tolerance: float = 1e-8,
    inner_maxiter: int = 4000,
) -> tuple[BaseConfig, list[JointConfig], SolveReport]:
    """Jointly solve base motion and per-waypoint arm configurations.

    Waypoints must already be expressed in the robot base frame.  Bounds come
    from the environment cloud unless supplied explicitly.
    """
    if params is None:
        params = BaseOptParams()
    if traj_samples.frame_id != "base":
        raise ValidationError(
            f"waypoints must be in the base frame, got {traj_samples.frame_id!r}"
        )
    if bounds is None:
        bounds = task_bounds(env_cloud)

    n_way = len(traj_samples.poses)
    targets = _waypoint_targets(traj_samples, params.ee_points)

    lower = np.concatenate([bounds.x_min, np.tile(chain.lower_limits(), n_way)])
    upper = np.concatenate([bounds.x_max, np.tile(chain.upper_limits(), n_way)])
    z0 = np.concatenate(
        [np.clip(np.zeros(3), bounds.x_min, bounds.x_max), np.tile(chain.mid_config(), n_way)]
    )

    problem = NlpProblem(
        dim=3 + n_way * chain.n,
        objective=make_base_objective(chain, targets, params),
        lower=lower,
        upper=upper,
        tolerance=tolerance,
        max_iterations=max_iterations,
    )
    report = solve_nlp(problem, z0, inner_maxiter=inner_maxiter)
    z = report.solution
    config = BaseConfig(x=float(z[0]), y=float(z[1]), theta=float(z[2]))
    joint_configs = [
        JointConfig(q=z[3 + i * chain.n : 3 + (i + 1) * chain.n].copy()) for i in range(n_way)
    ]
    return config, joint_configs, report
