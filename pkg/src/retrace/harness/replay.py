"""Kinematic stand-in for executing a joint trajectory on the robot.

Executed end-effector poses are the forward kinematics of each configuration
composed with the planar base transform.  Optional odometry noise perturbs
the base position per step with seeded Gaussian draws, which models drift
accumulated while the base holds its commanded pose.
"""

from __future__ import annotations

import numpy as np

from retrace.base_opt import BaseConfig, base_transform
from retrace.errors import ValidationError
from retrace.geometry import Pose, Trajectory, compose
from retrace.joint_opt import JointTrajectory
from retrace.kinematics import KinematicChain, batch_frames


def replay(
    chain: KinematicChain,
    jt: JointTrajectory,
    base: BaseConfig,
    odom_noise: float | None = None,
    *,
    seed: int = 0,
) -> Trajectory:
    """Execute ``jt`` from the given base placement and return ee poses.

    ``odom_noise`` is the standard deviation in meters of independent
    Gaussian noise added to the base x/y position at every step; ``None``
    or ``0.0`` reproduces the forward kinematics exactly.
    """
    if odom_noise is not None and odom_noise < 0.0:
        raise ValidationError(f"odometry noise std must be nonnegative, got {odom_noise}")
    configs = jt.config_array()
    frames = batch_frames(chain, configs)
    n = len(configs)

    base_pose = base_transform(base)
    if odom_noise:
        wobble = np.random.default_rng(seed).normal(size=(n, 2)) * odom_noise
    else:
        wobble = np.zeros((n, 2))

    poses = []
    for i in range(n):
        fk_pose = Pose.from_matrix(frames.rot_ee[i], frames.t_ee[i])
        shift = np.array([wobble[i, 0], wobble[i, 1], 0.0])
        step_base = Pose(base_pose.q, base_pose.t + shift)
        poses.append(compose(step_base, fk_pose))
    return Trajectory(frame_id="base", poses=poses, timestamps=jt.dt * np.arange(n))
