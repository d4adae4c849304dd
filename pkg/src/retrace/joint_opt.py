"""Stage II: joint-space trajectory tracking under collision and smoothness.

Solves for joint positions and velocities (Q, Qd) over the whole horizon at
once.  The tracking term compares forward kinematics against the reference
poses through end-effector surface points, collision is a hinge on clearance
to an environment cloud, and smoothness penalizes squared joint velocity.
Position and velocity bounds are boxes; the forward-Euler consistency
q_{i+1} = q_i + qd_i * dt is an equality constraint handled by the
augmented-Lagrangian solver, then snapped exactly in a feasibility
restoration step so returned trajectories satisfy it to float precision.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from retrace.errors import ValidationError
from retrace.geometry import Pose, Trajectory, compose, translation
from retrace.kinematics import (
    GripperPointSet,
    JointConfig,
    KinematicChain,
    batch_frames,
    batch_point_jacobians,
    default_ee_points,
)
from retrace.optim import NlpProblem, SolveReport, solve_nlp

DEFAULT_LAMBDA_GOAL = 150.0
DEFAULT_LAMBDA_COLLISION = 0.02
DEFAULT_LAMBDA_VELOCITY = 0.01
DEFAULT_D_SAFE = 0.02
DEFAULT_DT = 0.1
DEFAULT_STANDOFF = 0.20

# Distance below which the collision gradient direction is left at zero.
ZERO_DISTANCE_EPSILON = 1e-12

# Interior velocity bounds are tightened by this much so the feasibility
# restoration (which recomputes qd from config differences) cannot push a
# velocity past its true limit.
VELOCITY_MARGIN = 1e-6

# Initial penalty for the forward-Euler equality in the curvature-scaled
# variables.  The seed already satisfies the dynamics, so the penalty's job
# is to keep iterates near the manifold while the cost is polished; starting
# it high keeps the restored iterates close to feasible, which is what the
# restoration step rewards.
DYNAMICS_PENALTY_INIT = 100.0

# Gauss-Newton iteration counts for the placement passes.  Warm-started
# waypoints converge in two or three damped steps; the cold start at the
# first waypoint and the batched polish get a few more.
SWEEP_GN_ITERATIONS = 3
COLD_GN_ITERATIONS = 10
POLISH_GN_ITERATIONS = 8
LM_DAMPING_INIT = 1e-5

# Cap on a single Gauss-Newton step, per joint.  Near-singular Jacobians
# produce huge steps that ram joints into their box corners, where clipped
# steps stall; pacing the step keeps the iterate in the basin its warm
# start chose.
GN_STEP_MAX = 0.4

# A placement whose cost stays above this multiple of the median (plus an
# absolute floor well under a millimeter per point, so branch-stuck
# stretches on otherwise exactly reachable paths still get flagged) is
# re-solved from its better-placed neighbor.
RESCUE_COST_RATIO = 4.0
RESCUE_COST_FLOOR = 1e-5

# Weak pull toward the middle of the joint range during the sequential
# placement passes.  A redundant chain has a null space at every waypoint,
# and unanchored minimum-norm steps let the posture drift along it until
# some joint rams its box, at which point whole stretches of the path lose
# the exact branch.  In the null space nothing opposes the anchor, so even
# a small weight recenters the posture in a step or two, while in the
# tracking directions the induced bias is far below a millimeter.  The
# final polish runs without the anchor, so returned placements are pure
# tracking optima.
POSTURE_WEIGHT = 1e-3

# The consistency pass ends early once the best restored objective has not
# dropped by this relative amount over this many outer iterations.
STALL_PATIENCE = 5
STALL_RELATIVE_DROP = 1e-3


@dataclass
class JointTrajectory:
    """Joint positions and velocities on a fixed time grid.

    The first and last velocities are exactly zero: trajectories start and
    end at rest.
    """

    configs: list[JointConfig]
    velocities: list[np.ndarray]
    dt: float

    def __post_init__(self) -> None:
        if len(self.configs) < 1:
            raise ValidationError("joint trajectory needs at least one config")
        if len(self.configs) != len(self.velocities):
            raise ValidationError(
                f"configs and velocities must have equal length, got "
                f"{len(self.configs)} vs {len(self.velocities)}"
            )
        if not self.dt > 0.0:
            raise ValidationError(f"dt must be positive, got {self.dt}")
        self.velocities = [np.asarray(v, dtype=float).reshape(-1) for v in self.velocities]
        for config, vel in zip(self.configs, self.velocities):
            if config.q.shape != vel.shape:
                raise ValidationError("config and velocity dimensions disagree")
        if np.any(self.velocities[0] != 0.0) or np.any(self.velocities[-1] != 0.0):
            raise ValidationError("start and end velocities must be exactly zero")

    def __len__(self) -> int:
        return len(self.configs)

    def config_array(self) -> np.ndarray:
        return np.stack([c.q for c in self.configs])

    def velocity_array(self) -> np.ndarray:
        return np.stack(self.velocities)

    def dynamics_residual(self) -> float:
        """Max-norm of q_{i+1} - q_i - qd_i * dt over the trajectory."""
        q = self.config_array()
        qd = self.velocity_array()
        if len(q) < 2:
            return 0.0
        return float(np.max(np.abs(q[1:] - q[:-1] - self.dt * qd[:-1])))


@dataclass
class JointOptParams:
    """Cost weights, clearance, time step, and standoff distance."""

    lambda_goal: float = DEFAULT_LAMBDA_GOAL
    lambda_collision: float = DEFAULT_LAMBDA_COLLISION
    lambda_velocity: float = DEFAULT_LAMBDA_VELOCITY
    d_safe: float = DEFAULT_D_SAFE
    dt: float = DEFAULT_DT
    standoff_distance: float = DEFAULT_STANDOFF
    ee_points: GripperPointSet = field(default_factory=default_ee_points)

    def __post_init__(self) -> None:
        if self.lambda_goal < 0.0 or self.lambda_collision < 0.0 or self.lambda_velocity < 0.0:
            raise ValidationError("cost weights must be nonnegative")
        if not self.d_safe > 0.0:
            raise ValidationError(f"d_safe must be positive, got {self.d_safe}")
        if not self.dt > 0.0:
            raise ValidationError(f"dt must be positive, got {self.dt}")
        if self.standoff_distance < 0.0:
            raise ValidationError(
                f"standoff distance must be nonnegative, got {self.standoff_distance}"
            )


def standoff_pose(t_grasp: Pose, d: float) -> Pose:
    """Pose displaced d meters behind the grasp along its approach (+x) axis."""
    if d < 0.0:
        raise ValidationError(f"standoff distance must be nonnegative, got {d}")
    return compose(t_grasp, translation(-d, 0.0, 0.0))


def prepend_standoff(traj: Trajectory, d: float) -> Trajectory:
    """New trajectory whose first pose is the standoff of the original start."""
    poses = [standoff_pose(traj.poses[0], d)] + list(traj.poses)
    timestamps = None
    if traj.timestamps is not None:
        stamps = np.asarray(traj.timestamps, dtype=float)
        lead = stamps[0] - (stamps[1] - stamps[0]) if len(stamps) > 1 else stamps[0] - 1.0
        timestamps = np.concatenate([[lead], stamps])
    return Trajectory(frame_id=traj.frame_id, poses=poses, timestamps=timestamps)


def collision_cost(
    points: np.ndarray,
    radii: np.ndarray | float,
    env_cloud: np.ndarray | None,
    d_safe: float,
) -> float:
    """Hinge-squared clearance cost against the nearest environment point.

    Each point contributes max(0, d_safe + radius - nearest_distance)^2.
    """
    if not d_safe > 0.0:
        raise ValidationError(f"d_safe must be positive, got {d_safe}")
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if env_cloud is None or len(points) == 0:
        return 0.0
    env = np.asarray(env_cloud, dtype=float).reshape(-1, 3)
    if len(env) == 0:
        return 0.0
    radii = np.broadcast_to(np.asarray(radii, dtype=float), (len(points),))
    dist, _ = cKDTree(env).query(points)
    gap = np.maximum(0.0, d_safe + radii - dist)
    return float(np.sum(gap**2))


def _collision_geometry(chain: KinematicChain) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stacked link-cloud points (local), radii, and per-point link index."""
    pts, radii, links = [], [], []
    for link, cloud in enumerate(chain.link_clouds):
        if len(cloud.points) == 0:
            continue
        pts.append(cloud.points)
        radii.append(cloud.radii)
        links.append(np.full(len(cloud.points), link))
    if not pts:
        return np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=int)
    return np.vstack(pts), np.concatenate(radii), np.concatenate(links)


def _reference_targets(traj: Trajectory, pts: GripperPointSet) -> np.ndarray:
    """Ee points transformed by every reference pose, (B, m, 3)."""
    targets = np.empty((len(traj.poses), len(pts), 3))
    for i, pose in enumerate(traj.poses):
        targets[i] = pts.points @ pose.matrix().T + pose.t
    return targets


def make_config_objective(
    chain: KinematicChain,
    targets: np.ndarray,
    env_cloud: np.ndarray | None,
    params: JointOptParams,
):
    """Tracking + collision objective over flattened (B, n) configs.

    The gradient avoids per-point Jacobian tensors: a revolute column is
    a_j x (p - o_j), so the sum over points collapses to the point/residual
    moments via r . (a_j x (p - o_j)) = a_j . (p x r - o_j x r).  Collision
    uses the same identity with per-link suffix sums because a point on link
    l only feels joints j <= l.  Nearest environment neighbors are treated
    as fixed, the frozen-correspondence scheme used by the other stages.
    """
    n_ref = targets.shape[0]
    n_joints = chain.n
    pts = params.ee_points.points
    local_pts, radii, link_idx = _collision_geometry(chain)
    revolute = np.array([j.kind == "revolute" for j in chain.joints])
    env = None
    tree = None
    if env_cloud is not None:
        env = np.asarray(env_cloud, dtype=float).reshape(-1, 3)
        if len(env) and len(local_pts):
            tree = cKDTree(env)
    link_sel = [np.flatnonzero(link_idx == l) for l in range(n_joints)]

    def moment_gradient(frames, moment, total):
        # columns: revolute a_j . (M - o_j x S), prismatic a_j . S
        spun = moment[:, None, :] - np.cross(frames.pos, total[:, None, :])
        grad_rev = np.einsum("bnj,bnj->bn", frames.axis, spun)
        grad_pri = np.einsum("bnj,bj->bn", frames.axis, total)
        return np.where(revolute[None, :], grad_rev, grad_pri)

    def fun(q_flat: np.ndarray):
        configs = q_flat.reshape(n_ref, n_joints)
        frames = batch_frames(chain, configs)

        ee = np.einsum("bij,mj->bmi", frames.rot_ee, pts) + frames.t_ee[:, None, :]
        resid = ee - targets
        f = params.lambda_goal * float(np.sum(resid**2))
        r = 2.0 * params.lambda_goal * resid
        grad_q = moment_gradient(frames, np.cross(ee, r).sum(axis=1), r.sum(axis=1))

        if tree is not None:
            world = (
                np.einsum("bkij,kj->bki", frames.rot[:, link_idx], local_pts)
                + frames.pos[:, link_idx]
            )
            dist, nearest = tree.query(world.reshape(-1, 3))
            dist = dist.reshape(n_ref, -1)
            gap = np.maximum(0.0, params.d_safe + radii[None, :] - dist)
            f += params.lambda_collision * float(np.sum(gap**2))
            delta = world - env[nearest].reshape(n_ref, -1, 3)
            safe = np.maximum(dist, ZERO_DISTANCE_EPSILON)
            coeff = np.where(dist > ZERO_DISTANCE_EPSILON, -2.0 * gap / safe, 0.0)
            w = params.lambda_collision * coeff[:, :, None] * delta
            per_link_s = np.zeros((n_ref, n_joints, 3))
            per_link_m = np.zeros((n_ref, n_joints, 3))
            for l, sel in enumerate(link_sel):
                if len(sel):
                    per_link_s[:, l] = w[:, sel].sum(axis=1)
                    per_link_m[:, l] = np.cross(world[:, sel], w[:, sel]).sum(axis=1)
            # suffix sums: joint j sees every point on links l >= j
            suffix_s = per_link_s[:, ::-1].cumsum(axis=1)[:, ::-1]
            suffix_m = per_link_m[:, ::-1].cumsum(axis=1)[:, ::-1]
            spun = suffix_m - np.cross(frames.pos, suffix_s)
            grad_rev = np.einsum("bnj,bnj->bn", frames.axis, spun)
            grad_pri = np.einsum("bnj,bnj->bn", frames.axis, suffix_s)
            grad_q = grad_q + np.where(revolute[None, :], grad_rev, grad_pri)

        return f, grad_q.ravel()

    return fun


def make_joint_objective(
    chain: KinematicChain,
    targets: np.ndarray,
    env_cloud: np.ndarray | None,
    params: JointOptParams,
):
    """Full objective over z = [Q.ravel(), Qd.ravel()] with analytic gradient.

    Adds the squared-velocity smoothness term to the config-space tracking
    and collision costs.
    """
    core = make_config_objective(chain, targets, env_cloud, params)
    nq = targets.shape[0] * chain.n

    def fun(z: np.ndarray):
        f, grad_q = core(z[:nq])
        vels = z[nq:]
        f += params.lambda_velocity * float(vels @ vels)
        return f, np.concatenate([grad_q, 2.0 * params.lambda_velocity * vels])

    return fun


def _dynamics_constraint(n_ref: int, n_joints: int, dt: float):
    """Equality q_{i+1} - q_i - dt * qd_i = 0 as (residual, Jacobian pullback)."""
    nq = n_ref * n_joints

    def constraint(z: np.ndarray):
        configs = z[:nq].reshape(n_ref, n_joints)
        vels = z[nq:].reshape(n_ref, n_joints)
        c = (configs[1:] - configs[:-1] - dt * vels[:-1]).ravel()

        def pullback(w: np.ndarray) -> np.ndarray:
            rows = w.reshape(n_ref - 1, n_joints)
            gq = np.zeros((n_ref, n_joints))
            gq[1:] += rows
            gq[:-1] -= rows
            gv = np.zeros((n_ref, n_joints))
            gv[:-1] = -dt * rows
            return np.concatenate([gq.ravel(), gv.ravel()])

        return c, pullback

    return constraint


def _restore_feasible(
    configs: np.ndarray, vels: np.ndarray, dt: float
) -> tuple[np.ndarray, np.ndarray]:
    """Snap a near-feasible iterate onto the dynamics manifold exactly.

    Velocities are recomputed from config differences (making every interior
    dynamics row hold to float rounding), the endpoint velocities are pinned
    at zero, and the first two configs are averaged so the rest-at-start row
    q_1 = q_0 holds exactly.  The perturbation is bounded by the incoming
    dynamics residual.
    """
    q = configs.copy()
    v = np.zeros_like(vels)
    if len(q) >= 2:
        mid = 0.5 * (q[0] + q[1])
        q[0] = mid
        q[1] = mid
        v[1:-1] = (q[2:] - q[1:-1]) / dt
    return q, v


def _ee_world_points(chain: KinematicChain, pts: np.ndarray, configs: np.ndarray):
    """Frames plus end-effector points in the world frame, (B, m, 3)."""
    frames = batch_frames(chain, configs)
    ee = np.einsum("bij,mj->bmi", frames.rot_ee, pts) + frames.t_ee[:, None, :]
    return frames, ee


def _gn_place(
    chain: KinematicChain,
    pts: np.ndarray,
    targets: np.ndarray,
    configs: np.ndarray,
    lower: np.ndarray,
    upper: np.ndarray,
    iterations: int,
    anchor: np.ndarray | None = None,
    anchor_weight: float = POSTURE_WEIGHT,
) -> np.ndarray:
    """Batched damped Gauss-Newton on the end-effector point residuals.

    Each waypoint is an independent small least-squares problem, so one
    batched FK plus a stack of (n, n) solves advances all of them at once.
    Marquardt damping backs off whenever a step fails to reduce that
    waypoint's cost, and steps are clipped to the joint box, which keeps the
    iterate feasible and the update no worse than the start.  An optional
    anchor adds a quadratic pull toward a reference config, by default the
    weak posture term described at POSTURE_WEIGHT.  Collision is
    deliberately left out here: these placements only seed the consistency
    pass, which does handle it.
    """
    n = chain.n
    batch = configs.shape[0]
    link = np.full(len(pts), n - 1)
    eye = np.eye(n)
    w = anchor_weight if anchor is not None else 0.0
    ref = anchor if anchor is not None else np.zeros(n)

    def total_cost(qs: np.ndarray, track: np.ndarray) -> np.ndarray:
        if w == 0.0:
            return track
        dev = qs - ref[None, :]
        return track + w * np.einsum("bn,bn->b", dev, dev)

    q = np.clip(configs, lower, upper)
    damping = np.full(batch, LM_DAMPING_INIT)
    frames, ee = _ee_world_points(chain, pts, q)
    resid = (ee - targets).reshape(batch, -1)
    cost = total_cost(q, np.einsum("bk,bk->b", resid, resid))
    for _ in range(iterations):
        jac = batch_point_jacobians(chain, frames, ee, link).reshape(batch, -1, n)
        grad = np.einsum("bkn,bk->bn", jac, resid) + w * (q - ref[None, :])
        hess = np.einsum("bkn,bkm->bnm", jac, jac) + w * eye[None]
        step = -np.linalg.solve(hess + damping[:, None, None] * eye[None], grad[:, :, None])[
            :, :, 0
        ]
        step = np.clip(step, -GN_STEP_MAX, GN_STEP_MAX)
        q_new = np.clip(q + step, lower, upper)
        _, ee_new = _ee_world_points(chain, pts, q_new)
        resid_new = (ee_new - targets).reshape(batch, -1)
        cost_new = total_cost(q_new, np.einsum("bk,bk->b", resid_new, resid_new))
        improved = cost_new < cost
        q = np.where(improved[:, None], q_new, q)
        cost = np.where(improved, cost_new, cost)
        damping = np.where(improved, np.maximum(0.3 * damping, 1e-10), 5.0 * damping)
        frames, ee = _ee_world_points(chain, pts, q)
        resid = (ee - targets).reshape(batch, -1)
    return q


def _placement_costs(
    chain: KinematicChain, pts: np.ndarray, targets: np.ndarray, configs: np.ndarray
) -> np.ndarray:
    _, ee = _ee_world_points(chain, pts, configs)
    resid = (ee - targets).reshape(configs.shape[0], -1)
    return np.einsum("bk,bk->b", resid, resid)


def _rescue_placements(
    chain: KinematicChain,
    pts: np.ndarray,
    targets: np.ndarray,
    configs: np.ndarray,
    lower: np.ndarray,
    upper: np.ndarray,
    anchor: np.ndarray | None = None,
) -> np.ndarray:
    """Re-solve stand-out placements from their better-placed neighbors.

    A warm-start chain occasionally parks a stretch of waypoints in a box
    corner or a bad branch; those show up as costs far above the median.
    Re-seeding each from its cheapest neighbor and keeping the improvement
    repairs the stretch from its edges inward.
    """
    q = configs.copy()
    batch = q.shape[0]
    if batch < 3:
        return q
    for _ in range(3):
        cost = _placement_costs(chain, pts, targets, q)
        cutoff = max(RESCUE_COST_RATIO * float(np.median(cost)), RESCUE_COST_FLOOR)
        bad = np.flatnonzero(cost > cutoff)
        if len(bad) == 0:
            break
        # Costs are updated in place, so an ascending then a descending pass
        # heals a whole contiguous stretch from its good edges in one round.
        for i in [*bad, *bad[::-1]]:
            neighbors = [j for j in (i - 1, i + 1) if 0 <= j < batch and cost[j] < cost[i]]
            if not neighbors:
                continue
            seed = q[min(neighbors, key=lambda j: cost[j])]
            placed = _gn_place(
                chain, pts, targets[i : i + 1], seed[None, :], lower, upper,
                COLD_GN_ITERATIONS, anchor=anchor,
            )
            new_cost = _placement_costs(chain, pts, targets[i : i + 1], placed)[0]
            if new_cost < cost[i]:
                q[i] = placed[0]
                cost[i] = new_cost
    return q


def optimize_joint_trajectory(
    chain: KinematicChain,
    traj_ref: Trajectory,
    env_cloud: np.ndarray | None,
    params: JointOptParams | None = None,
    q_start: JointConfig | None = None,
    *,
    max_iterations: int = 100,
    tolerance: float = 1e-8,
    inner_maxiter: int = 400,
) -> tuple[JointTrajectory, SolveReport]:
    """Track the reference trajectory with a bounded, consistent joint path.

    The reference should already include the standoff pose.  After each
    augmented-Lagrangian outer iteration the iterate is restored onto the
    dynamics manifold and the best restored point seen so far is kept, so
    the reported per-outer objective sequence is non-increasing and the
    returned trajectory always satisfies bounds and dynamics exactly.
    """
    if params is None:
        params = JointOptParams()
    n_ref = len(traj_ref.poses)
    n_joints = chain.n

    dt = params.dt
    if traj_ref.timestamps is not None and len(traj_ref.timestamps) >= 2:
        dt = float(np.median(np.diff(np.asarray(traj_ref.timestamps, dtype=float))))

    lower_q = chain.lower_limits()
    upper_q = chain.upper_limits()
    if q_start is None:
        q_start = JointConfig(q=chain.mid_config())
    if q_start.q.shape != (n_joints,):
        raise ValidationError(f"q_start must have {n_joints} joints, got {q_start.q.shape}")
    if np.any(q_start.q < lower_q) or np.any(q_start.q > upper_q):
        raise ValidationError("q_start violates joint limits")

    vel = chain.velocity_limits()
    margin = np.minimum(VELOCITY_MARGIN, 0.1 * vel)
    lower_v = np.tile(-(vel - margin), (n_ref, 1))
    upper_v = np.tile(vel - margin, (n_ref, 1))
    lower_v[0] = upper_v[0] = 0.0
    lower_v[-1] = upper_v[-1] = 0.0

    targets = _reference_targets(traj_ref, params.ee_points)
    core = make_config_objective(chain, targets, env_cloud, params)
    objective = make_joint_objective(chain, targets, env_cloud, params)
    nq = n_ref * n_joints

    vel_weight = params.lambda_velocity / (dt * dt)
    pts = params.ee_points.points

    # Per-joint curvature scale (Gauss-Newton diagonal of the tracking term
    # at the start config).  It evens out the hundredfold lever-arm spread
    # between proximal and distal joints: without it the first-order inner
    # solver creeps in the wrist directions and leaves most of the
    # orientation error unconverged.
    frames0, ee0 = _ee_world_points(chain, pts, q_start.q[None, :])
    jac0 = batch_point_jacobians(chain, frames0, ee0, np.full(len(pts), n_joints - 1))
    diag = 2.0 * max(params.lambda_goal, 1.0) * np.einsum("bmin,bmin->n", jac0, jac0)
    scale_q = np.sqrt(np.maximum(diag, 1e-4 * max(diag.max(), 1.0)))

    # Placement sweeps: solve each waypoint's tracking problem on its own
    # with damped Gauss-Newton, warm started from its neighbor.  The forward
    # sweep keeps consecutive configs in the same arm branch; the backward
    # re-sweep propagates the branch that tracked best back to the start,
    # which matters when the cold start at the first waypoint settles into a
    # worse branch than the rest of the path.  A final batched polish
    # tightens every placement at once.
    q_raw = np.empty((n_ref, n_joints))
    mid = chain.mid_config()
    guess = q_start.q[None, :]
    for i in range(n_ref):
        # The cold solve trusts the caller's start config as-is: anchoring it
        # would nudge an already-exact q_start off its pose.  Drift only
        # accumulates over the warm-started waypoints that follow.
        iters = COLD_GN_ITERATIONS if i == 0 else SWEEP_GN_ITERATIONS
        guess = _gn_place(
            chain, pts, targets[i : i + 1], guess, lower_q, upper_q, iters,
            anchor=None if i == 0 else mid,
        )
        q_raw[i] = guess[0]
    forward_cost = _placement_costs(chain, pts, targets, q_raw)
    for i in range(n_ref - 2, -1, -1):
        placed = _gn_place(
            chain, pts, targets[i : i + 1], q_raw[i + 1][None, :], lower_q, upper_q,
            SWEEP_GN_ITERATIONS, anchor=mid,
        )
        # Keep whichever sweep tracked this waypoint better, so a branch
        # that went bad in one direction cannot overwrite good placements.
        if _placement_costs(chain, pts, targets[i : i + 1], placed)[0] < forward_cost[i]:
            q_raw[i] = placed[0]
    q_raw = _rescue_placements(chain, pts, targets, q_raw, lower_q, upper_q, anchor=mid)
    q_raw = _gn_place(chain, pts, targets, q_raw, lower_q, upper_q, POLISH_GN_ITERATIONS)

    # The first waypoint came from a cold start, and a poor start config can
    # park it in a branch far from the rest of the path, which the rest-start
    # constraint then turns into a long scored catch-up.  Re-solve it from
    # the second placement with a proximal pull toward it, and keep whichever
    # candidate scores better under the actual objective weights: tracking
    # plus the velocity cost of the first step.
    if n_ref >= 2:
        prox_weight = vel_weight / max(params.lambda_goal, 1e-12)
        candidate = _gn_place(
            chain, pts, targets[:1], q_raw[1][None, :], lower_q, upper_q,
            3 * COLD_GN_ITERATIONS, anchor=q_raw[1], anchor_weight=prox_weight,
        )[0]

        def _first_score(q_first: np.ndarray) -> float:
            cost = _placement_costs(chain, pts, targets[:1], q_first[None, :])[0]
            gap = q_first - q_raw[1]
            return params.lambda_goal * float(cost) + vel_weight * float(gap @ gap)

        if _first_score(candidate) < _first_score(q_raw[0]):
            q_raw[0] = candidate

    # Forward velocity-clip pass: rebuild the seed path with steps bounded
    # by the velocity boxes and a rest start, so the seed lies exactly on
    # the dynamics manifold with in-limit velocities.  Clipped steps stay on
    # the segment toward the placed config, hence inside the joint boxes.
    q_seed = q_raw.copy()
    if n_ref >= 2:
        q_seed[1] = q_seed[0]
        for i in range(1, n_ref - 1):
            step = np.clip(q_raw[i + 1] - q_seed[i], dt * lower_v[i], dt * upper_v[i])
            q_seed[i + 1] = q_seed[i] + step
    v_seed = np.zeros((n_ref, n_joints))
    if n_ref >= 2:
        v_seed[1:-1] = (q_seed[2:] - q_seed[1:-1]) / dt

    # Consistency pass over y = [S Q, S U] with U = dt * Qd and S the
    # per-joint curvature scale.  The substitution U = dt * Qd gives every
    # dynamics row unit coefficients, and expressing the rows in the scaled
    # variables keeps the penalty Hessian aligned with the objective's
    # curvature, so the inner solver converges at a similar rate in every
    # direction.  The scaled residual overstates the true one by at most
    # max(S), and the convergence threshold is tightened by min(S), so a
    # converged scaled residual implies the true residual meets
    # ``tolerance``.
    scale = np.tile(scale_q, n_ref)
    lower = np.concatenate(
        [np.tile(lower_q * scale_q, n_ref), (dt * lower_v * scale_q).ravel()]
    )
    upper = np.concatenate(
        [np.tile(upper_q * scale_q, n_ref), (dt * upper_v * scale_q).ravel()]
    )
    z0 = np.clip(
        np.concatenate([(q_seed * scale_q).ravel(), (dt * v_seed * scale_q).ravel()]),
        lower,
        upper,
    )

    def scaled_objective(y: np.ndarray):
        f, grad_q = core(y[:nq] / scale[:nq])
        u = y[nq:] / scale[:nq]
        f += vel_weight * float(u @ u)
        return f, np.concatenate([grad_q / scale[:nq], 2.0 * vel_weight * u / scale[:nq]])

    equalities = [_dynamics_constraint(n_ref, n_joints, 1.0)] if n_ref >= 2 else []
    problem = NlpProblem(
        dim=2 * nq,
        objective=scaled_objective,
        lower=lower,
        upper=upper,
        equalities=equalities,
        tolerance=tolerance * float(scale_q.min()),
        max_iterations=max_iterations,
    )

    # Every outer iterate is restored onto the dynamics manifold; the best
    # restored point that also respects the true velocity limits is kept.
    # Seeding with the rest-at-start warm start guarantees the result is
    # never worse than it.  Once the best restored objective stops dropping,
    # further outers only grind the penalty, so the loop ends early.
    best = {"f": np.inf, "q": None, "v": None}
    best_trace: list[float] = []

    def consider(candidate: np.ndarray) -> None:
        q, v = _restore_feasible(
            candidate[:nq].reshape(n_ref, n_joints) / scale_q,
            candidate[nq:].reshape(n_ref, n_joints) / scale_q / dt,
            dt,
        )
        if np.all(np.abs(v) <= vel[None, :]):
            f = objective(np.concatenate([q.ravel(), v.ravel()]))[0]
            if f < best["f"]:
                best.update(f=f, q=q, v=v)
        best_trace.append(best["f"])

    def stalled(outer: int, _x: np.ndarray) -> bool:
        if len(best_trace) <= STALL_PATIENCE + 2:
            return False
        drop = best_trace[-STALL_PATIENCE - 1] - best_trace[-1]
        return drop <= STALL_RELATIVE_DROP * max(1.0, abs(best_trace[-1]))

    consider(np.concatenate([np.tile(q_start.q * scale_q, n_ref), np.zeros(nq)]))
    consider(z0)
    report = solve_nlp(
        problem,
        z0,
        inner_maxiter=max(50, inner_maxiter // 4),
        penalty_init=DYNAMICS_PENALTY_INIT,
        outer_callback=lambda _, x: consider(x),
        outer_stop=stalled,
    )
    for entry, value in zip(report.history, best_trace[2:]):
        entry["best_feasible_objective"] = value

    trajectory = JointTrajectory(
        configs=[JointConfig(q=row.copy()) for row in best["q"]],
        velocities=[row.copy() for row in best["v"]],
        dt=dt,
    )
    settled = report.converged or len(report.history) < max_iterations
    final = SolveReport(
        solution=np.concatenate([best["q"].ravel(), best["v"].ravel()]),
        objective_value=best["f"],
        iterations=report.iterations,
        max_bound_violation=report.max_bound_violation,
        max_equality_residual=trajectory.dynamics_residual(),
        converged=settled and trajectory.dynamics_residual() <= tolerance,
        history=report.history,
    )
    return trajectory, final


def joint_trajectory_to_dict(jt: JointTrajectory) -> dict:
    return {
        "dt": float(jt.dt),
        "q": [[float(v) for v in c.q] for c in jt.configs],
        "qd": [[float(v) for v in vel] for vel in jt.velocities],
    }


def joint_trajectory_from_dict(data: dict) -> JointTrajectory:
    try:
        return JointTrajectory(
            configs=[JointConfig(q=np.array(row, dtype=float)) for row in data["q"]],
            velocities=[np.array(row, dtype=float) for row in data["qd"]],
            dt=float(data["dt"]),
        )
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"invalid joint trajectory data: {exc}") from exc


def load_joint_trajectory(path: str | Path) -> JointTrajectory:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"joint trajectory file {path} is not valid JSON: {exc}") from exc
    return joint_trajectory_from_dict(data)


def save_joint_trajectory(jt: JointTrajectory, path: str | Path) -> None:
    Path(path).write_text(json.dumps(joint_trajectory_to_dict(jt), indent=2))
