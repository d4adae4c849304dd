"""Ready-made kinematic chains for tests and scenario generation."""

from __future__ import annotations

import numpy as np

from retrace.geometry import Pose, translation
from retrace.kinematics import JointSpec, KinematicChain, LinkCloud

_X = np.array([1.0, 0.0, 0.0])
_Y = np.array([0.0, 1.0, 0.0])
_Z = np.array([0.0, 0.0, 1.0])


def planar_chain(
    lengths: tuple[float, ...] = (0.5, 0.4, 0.3),
    lower: np.ndarray | None = None,
    upper: np.ndarray | None = None,
    vel_limit: float = 2.0,
) -> KinematicChain:
    """Planar arm of revolute z-joints with the given link lengths.

    Joint i sits at the end of link i-1; the end effector sits at the end of
    the last link, so at the zero configuration the arm lies stretched along
    +x with total reach sum(lengths).
    """
    n = len(lengths)
    if lower is None:
        lower = np.full(n, -np.pi)
    if upper is None:
        upper = np.full(n, np.pi)
    joints = []
    for i in range(n):
        origin = Pose.identity() if i == 0 else translation(lengths[i - 1], 0.0, 0.0)
        joints.append(
            JointSpec(
                kind="revolute",
                axis=_Z,
                origin=origin,
                lower=float(lower[i]),
                upper=float(upper[i]),
                vel_limit=vel_limit,
            )
        )
    clouds = [
        LinkCloud(points=np.array([[0.5 * lengths[i], 0.0, 0.0]]), radii=np.array([0.04]))
        for i in range(n)
    ]
    return KinematicChain(
        name=f"planar{n}",
        joints=joints,
        ee_offset=translation(lengths[-1], 0.0, 0.0),
        link_clouds=clouds,
    )


def fetch_like_chain() -> KinematicChain:
    """Eight-DOF mobile-manipulator arm: prismatic torso lift plus seven
    revolute joints, with gripper +x pointing away from the base at zero."""
    joints = [
        JointSpec("prismatic", _Z, translation(0.0, 0.0, 0.72), 0.0, 0.40, 0.10),
        JointSpec("revolute", _Z, translation(0.12, 0.0, 0.06), -1.60, 1.60, 1.25),
        JointSpec("revolute", _Y, translation(0.117, 0.0, 0.06), -1.20, 1.50, 1.45),
        JointSpec("revolute", _X, translation(0.219, 0.0, 0.0), -3.00, 3.00, 1.50),
        JointSpec("revolute", _Y, translation(0.133, 0.0, 0.0), -2.20, 2.20, 1.50),
        JointSpec("revolute", _X, translation(0.197, 0.0, 0.0), -3.00, 3.00, 1.50),
        JointSpec("revolute", _Y, translation(0.1245, 0.0, 0.0), -2.16, 2.16, 2.20),
        JointSpec("revolute", _X, translation(0.1385, 0.0, 0.0), -3.00, 3.00, 2.20),
    ]
    clouds = [
        LinkCloud(points=np.array([[0.0, 0.0, -0.2]]), radii=np.array([0.12])),
        LinkCloud(points=np.array([[0.06, 0.0, 0.0]]), radii=np.array([0.08])),
        LinkCloud(points=np.array([[0.11, 0.0, 0.0]]), radii=np.array([0.06])),
        LinkCloud(points=np.array([[0.07, 0.0, 0.0]]), radii=np.array([0.05])),
        LinkCloud(points=np.array([[0.10, 0.0, 0.0]]), radii=np.array([0.05])),
        LinkCloud(points=np.array([[0.06, 0.0, 0.0]]), radii=np.array([0.045])),
        LinkCloud(points=np.array([[0.07, 0.0, 0.0]]), radii=np.array([0.045])),
        LinkCloud(points=np.array([[0.09, 0.0, 0.0]]), radii=np.array([0.04])),
    ]
    return KinematicChain(
        name="fetch_like",
        joints=joints,
        ee_offset=translation(0.17, 0.0, 0.0),
        link_clouds=clouds,
    )


def override_limits(
    chain: KinematicChain,
    lower: np.ndarray,
    upper: np.ndarray,
    vel_limit: np.ndarray | None = None,
) -> KinematicChain:
    """Copy of the chain with replaced joint and velocity limits."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if lower.shape != (chain.n,) or upper.shape != (chain.n,):
        raise ValueError(f"limit arrays must have shape ({chain.n},)")
    vel = (
        chain.velocity_limits()
        if vel_limit is None
        else np.broadcast_to(np.asarray(vel_limit, dtype=float), (chain.n,))
    )
    joints = [
        JointSpec(
            kind=j.kind,
            axis=j.axis.copy(),
            origin=Pose(j.origin.q.copy(), j.origin.t.copy()),
            lower=float(lower[i]),
            upper=float(upper[i]),
            vel_limit=float(vel[i]),
        )
        for i, j in enumerate(chain.joints)
    ]
    return KinematicChain(
        name=chain.name,
        joints=joints,
        ee_offset=chain.ee_offset,
        link_clouds=chain.link_clouds,
        base_frame=chain.base_frame,
    )
