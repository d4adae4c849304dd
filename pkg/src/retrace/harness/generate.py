"""Synthetic scenario generation with known ground truth.

The generator works backward from the answer: it draws a smooth joint-space
path for the shipped chain, composes it with a drawn base offset to get the
true execution trajectory, then divides out the object delta to produce the
demo trajectory the pipeline will see.  Running the alignment stages forward
therefore reproduces the stored ground truth, and the base optimizer can in
principle recover the stored offset.

All randomness flows through one seeded generator in a fixed draw order, so
the same (seed, spec) pair always produces byte-identical fixture files.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from retrace.base_opt import BaseConfig, base_transform
from retrace.errors import ValidationError
from retrace.geometry import Pose, Trajectory, compose, inverse, rot_z
from retrace.grippers import parallel_jaw_model
from retrace.hand_refine import CameraIntrinsics, HandObservation
from retrace.harness.scenario import (
    GraspFixture,
    GroundTruth,
    ObjectPoses,
    Scenario,
    save_scenario,
)
from retrace.kinematics import KinematicChain, batch_frames
from retrace.chains import fetch_like_chain
from retrace.traj_align import BlendParams, apply_delta, blend_dual

FRAME_DT = 0.1
# Fraction of the per-step velocity budget the demo may consume; the joint
# optimizer needs slack to catch up from the standoff pose.
VELOCITY_USE = 0.45
REAL_INTRINSICS = CameraIntrinsics(fx=525.0, fy=525.0, cx=319.5, cy=239.5)
HAND_DEPTH_OFFSET = 0.15


@dataclass
class GenerationSpec:
    """Size and content knobs for one synthetic scenario."""

    kind: str = "single"
    n_poses: int | None = None
    dwell: int = 3
    end_dwell: int = 2
    include_hand_frames: bool = False
    n_hand_frames: int = 3
    include_grasp_fixture: bool = False
    demo_noise: float = 0.0
    n_outliers: int = 0
    pinned: bool = False

    def __post_init__(self) -> None:
        if self.kind not in ("single", "dual"):
            raise ValidationError(f"kind must be 'single' or 'dual', got {self.kind!r}")
        if self.dwell < 2 or self.end_dwell < 1:
            raise ValidationError("need dwell >= 2 and end_dwell >= 1")
        if self.n_poses is not None and self.n_poses < self.dwell + self.end_dwell + 8:
            raise ValidationError(
                f"n_poses must leave at least 8 moving frames, got {self.n_poses}"
            )
        if not 1 <= self.n_hand_frames <= 8:
            raise ValidationError(f"n_hand_frames must lie in [1, 8], got {self.n_hand_frames}")
        if self.demo_noise < 0.0:
            raise ValidationError(f"demo_noise must be nonnegative, got {self.demo_noise}")
        if self.n_outliers < 0:
            raise ValidationError(f"n_outliers must be nonnegative, got {self.n_outliers}")


def _compress_to_velocity(path: np.ndarray, vel: np.ndarray) -> np.ndarray:
    """Shrink each joint's excursion about its mean until steps fit the budget."""
    steps = np.abs(np.diff(path, axis=0))
    max_step = steps.max(axis=0) if len(steps) else np.zeros(path.shape[1])
    budget = VELOCITY_USE * FRAME_DT * vel
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(max_step > budget, budget / np.maximum(max_step, 1e-12), 1.0)
    mean = path.mean(axis=0)
    return mean[None, :] + (path - mean[None, :]) * scale[None, :]


def _smoothstep(u: np.ndarray) -> np.ndarray:
    return u * u * (3.0 - 2.0 * u)


def _free_joint_path(chain: KinematicChain, rng: np.random.Generator, moving: int) -> np.ndarray:
    """Sinusoidal excursion around a drawn interior configuration."""
    lower, upper = chain.lower_limits(), chain.upper_limits()
    span = upper - lower
    center = chain.mid_config() + rng.uniform(-0.10, 0.10, chain.n) * span
    amp = rng.uniform(0.04, 0.16, chain.n) * span * rng.choice([-1.0, 1.0], chain.n)
    omega = rng.uniform(2.5, 4.5, chain.n)
    phase = rng.uniform(0.0, 2.0 * np.pi, chain.n)

    # Keep center + amp * (sin - sin(phase)) inside the limits with margin.
    headroom = np.minimum(center - lower, upper - center) - 0.05 * span
    amp = np.sign(amp) * np.minimum(np.abs(amp), np.maximum(headroom, 0.0) / 2.0)

    s = _smoothstep(np.linspace(0.0, 1.0, moving))
    wave = np.sin(omega[None, :] * s[:, None] + phase[None, :]) - np.sin(phase)[None, :]
    return center[None, :] + amp[None, :] * wave


def _pinned_joint_path(chain: KinematicChain, rng: np.random.Generator, moving: int) -> np.ndarray:
    """Near-extension sweep through well-separated directions.

    Waypoints close to maximum reach leave only a small set of base
    placements able to serve all of them, which makes the drawn base offset
    recoverable by the base optimizer.
    """
    yaws = np.array([-0.45, 0.15, 0.45, -0.15]) + rng.uniform(-0.05, 0.05, 4)
    pitches = np.array([0.25, 0.05, 0.35, 0.15]) + rng.uniform(-0.04, 0.04, 4)
    torsos = np.array([0.10, 0.16, 0.12, 0.18]) + rng.uniform(-0.01, 0.01, 4)
    elbows = np.array([0.20, 0.05, 0.30, 0.10]) + rng.uniform(-0.04, 0.04, 4)
    anchors = np.zeros((4, chain.n))
    anchors[:, 0] = torsos
    anchors[:, 1] = yaws
    anchors[:, 2] = pitches
    anchors[:, 4] = elbows

    counts = np.full(3, (moving - 1) // 3)
    counts[: (moving - 1) % 3] += 1
    rows = [anchors[0]]
    for seg in range(3):
        u = np.linspace(0.0, 1.0, counts[seg] + 1)[1:]
        s = _smoothstep(u)
        rows.extend(anchors[seg] + (anchors[seg + 1] - anchors[seg]) * si for si in s)
    return np.array(rows)


def _execution_configs(
    chain: KinematicChain, rng: np.random.Generator, n_poses: int, spec: GenerationSpec
) -> np.ndarray:
    moving = n_poses - spec.dwell - spec.end_dwell
    if spec.pinned:
        path = _pinned_joint_path(chain, rng, moving)
    else:
        path = _free_joint_path(chain, rng, moving)
    path = _compress_to_velocity(path, chain.velocity_limits())
    path = np.clip(path, chain.lower_limits(), chain.upper_limits())
    return np.vstack(
        [np.tile(path[0], (spec.dwell, 1)), path, np.tile(path[-1], (spec.end_dwell, 1))]
    )


def _camera_pose(rng: np.random.Generator, target: np.ndarray) -> Pose:
    """Camera above and behind the workspace, z axis looking at the target."""
    position = target + np.array(
        [rng.uniform(-0.35, -0.10), rng.uniform(-0.30, 0.30), rng.uniform(0.90, 1.30)]
    )
    z_axis = target - position
    z_axis = z_axis / np.linalg.norm(z_axis)
    x_axis = np.cross(z_axis, np.array([0.0, 0.0, 1.0]))
    x_axis = x_axis / np.linalg.norm(x_axis)
    y_axis = np.cross(z_axis, x_axis)
    return Pose.from_matrix(np.column_stack([x_axis, y_axis, z_axis]), position)


def _draw_delta(rng: np.random.Generator) -> Pose:
    yaw = rot_z(float(rng.uniform(-0.45, 0.45)))
    shift = np.array(
        [rng.uniform(-0.12, 0.12), rng.uniform(-0.12, 0.12), rng.uniform(-0.04, 0.04)]
    )
    return Pose(yaw.q, shift)


def _object_pair(
    rng: np.random.Generator,
    name: str,
    delta_base: Pose,
    anchor: np.ndarray,
    cam_inv: Pose,
) -> ObjectPoses:
    """Object exe pose near the anchor point; demo pose is delta-divided."""
    exe_base = Pose(
        rot_z(float(rng.uniform(-np.pi, np.pi))).q,
        anchor + np.array([rng.uniform(-0.03, 0.03), rng.uniform(-0.03, 0.03), -0.05]),
    )
    demo_base = compose(inverse(delta_base), exe_base)
    return ObjectPoses(
        name=name,
        t_demo=compose(cam_inv, demo_base),
        t_exe=compose(cam_inv, exe_base),
    )


def _environment_cloud(rng: np.random.Generator, ee_path: np.ndarray, base: BaseConfig) -> np.ndarray:
    """Jittered floor grid plus one clutter blob placed clear of the task."""
    xs, ys = np.meshgrid(np.linspace(0.05, 1.55, 9), np.linspace(-0.75, 0.75, 9))
    floor = np.stack([xs.ravel(), ys.ravel(), np.zeros(xs.size)], axis=1)
    floor[:, :2] += rng.uniform(-0.02, 0.02, (len(floor), 2))

    clutter = None
    for _ in range(50):
        center = rng.uniform([0.3, -0.6, 0.1], [1.2, 0.6, 0.5])
        clear_of_path = np.min(np.linalg.norm(ee_path - center[None, :], axis=1)) > 0.35
        clear_of_base = np.linalg.norm(center[:2] - np.array([base.x, base.y])) > 0.50
        if clear_of_path and clear_of_base:
            clutter = center[None, :] + rng.normal(scale=0.05, size=(30, 3))
            break
    return floor if clutter is None else np.vstack([floor, clutter])


def _hand_frames(
    rng: np.random.Generator, demo: Trajectory, count: int
) -> list[HandObservation]:
    """Depth-offset hand observations anchored at the first demo poses.

    The virtual-camera focal length is scaled by the depth ratio so the
    pixel anchors stay consistent with the true translation while t_init
    carries the depth error the refiner must remove.
    """
    frames = []
    for i in range(count):
        t_true = demo.poses[i].t
        vertices = rng.uniform([-0.06, -0.04, -0.02], [0.06, 0.04, 0.02], size=(300, 3))
        cloud = rng.permutation(vertices) + t_true
        t_init = t_true + np.array([0.0, 0.0, HAND_DEPTH_OFFSET])
        scale = t_init[2] / t_true[2]
        k_virtual = CameraIntrinsics(
            fx=REAL_INTRINSICS.fx * scale,
            fy=REAL_INTRINSICS.fy * scale,
            cx=REAL_INTRINSICS.cx,
            cy=REAL_INTRINSICS.cy,
        )
        frames.append(
            HandObservation(
                vertices=vertices,
                t_init=t_init,
                k_virtual=k_virtual,
                k_real=REAL_INTRINSICS,
                hand_cloud=cloud,
            )
        )
    return frames


def _grasp_fixture(rng: np.random.Generator, grasp_pose: Pose) -> GraspFixture:
    """Identical-gripper retarget fixture with a 2 cm / 5 degree offset init."""
    direction = rng.normal(size=3)
    direction = direction / np.linalg.norm(direction)
    axis = rng.normal(size=3)
    axis = axis / np.linalg.norm(axis)
    angle = np.deg2rad(5.0)
    wobble = Pose(
        np.concatenate([[np.cos(angle / 2.0)], np.sin(angle / 2.0) * axis]),
        0.02 * direction,
    )
    init = compose(wobble, grasp_pose)
    return GraspFixture(
        source_gripper=parallel_jaw_model(),
        target_gripper=parallel_jaw_model(),
        source_grasp=grasp_pose,
        init_pose=init,
    )


def _apply_demo_noise(
    rng: np.random.Generator, demo: Trajectory, spec: GenerationSpec
) -> Trajectory:
    translations = demo.translations()
    if spec.demo_noise > 0.0:
        translations = translations + rng.normal(size=translations.shape) * spec.demo_noise
    if spec.n_outliers > 0:
        first = spec.dwell + 2
        last = len(demo) - spec.end_dwell - 2
        if last - first < spec.n_outliers:
            raise ValidationError("trajectory too short for the requested outlier count")
        idx = rng.choice(np.arange(first, last), size=spec.n_outliers, replace=False)
        steps = np.linalg.norm(np.diff(demo.translations(), axis=0), axis=1)
        median_step = float(np.median(steps))
        for i in idx:
            direction = rng.normal(size=3)
            direction = direction / np.linalg.norm(direction)
            translations[i] = translations[i] + direction * (6.0 * median_step + 0.05)
    poses = [Pose(p.q, t) for p, t in zip(demo.poses, translations)]
    return Trajectory(frame_id="camera", poses=poses, timestamps=demo.timestamps)


def generate_scenario(
    seed: int, spec: GenerationSpec | None = None, out_dir=None
) -> Scenario:
    """Build one self-consistent scenario; writes fixture files when out_dir given."""
    if spec is None:
        spec = GenerationSpec()
    rng = np.random.default_rng(seed)
    chain = fetch_like_chain()
    n_poses = spec.n_poses if spec.n_poses is not None else int(rng.integers(70, 121))

    base_star = BaseConfig(
        x=float(rng.uniform(0.05, 0.45)),
        y=float(rng.uniform(-0.35, 0.35)),
        theta=float(rng.uniform(-0.5, 0.5)),
    )
    configs = _execution_configs(chain, rng, n_poses, spec)
    frames = batch_frames(chain, configs)
    base_pose = base_transform(base_star)
    exe_base = [
        compose(base_pose, Pose.from_matrix(frames.rot_ee[i], frames.t_ee[i]))
        for i in range(n_poses)
    ]
    ee_path = np.array([p.t for p in exe_base])

    camera = _camera_pose(rng, ee_path.mean(axis=0))
    cam_inv = inverse(camera)
    timestamps = FRAME_DT * np.arange(n_poses)
    exe_cam = Trajectory(
        frame_id="camera",
        poses=[compose(cam_inv, p) for p in exe_base],
        timestamps=timestamps,
    )

    delta1_base = _draw_delta(rng)
    objects = [_object_pair(rng, "object_1", delta1_base, ee_path[0], cam_inv)]
    if spec.kind == "dual":
        rel = Pose(
            rot_z(float(rng.uniform(-0.15, 0.15))).q,
            np.array(
                [
                    rng.uniform(-0.035, 0.035),
                    rng.uniform(-0.035, 0.035),
                    rng.uniform(-0.015, 0.015),
                ]
            ),
        )
        delta2_base = compose(rel, delta1_base)
        objects.append(_object_pair(rng, "object_2", delta2_base, ee_path[-1], cam_inv))

    # Divide the manipulated object's delta out of the true execution, using
    # the same recomputed delta the pipeline will derive from the stored pose
    # pair, so forward alignment reproduces the ground truth bit for bit.
    delta1 = objects[0].delta()
    demo = Trajectory(
        frame_id="camera",
        poses=[compose(inverse(delta1.delta), p) for p in exe_cam.poses],
        timestamps=timestamps,
    )
    if spec.kind == "single":
        gt_exe = apply_delta(demo, delta1)
    else:
        aligned1 = apply_delta(demo, delta1)
        aligned2 = apply_delta(demo, objects[1].delta())
        gt_exe = blend_dual(aligned1, aligned2, BlendParams(sigma=len(demo) / 4.0))

    env_cloud = _environment_cloud(rng, ee_path, base_star)

    hand_frames = []
    if spec.include_hand_frames:
        hand_frames = _hand_frames(rng, demo, min(spec.n_hand_frames, len(demo)))
    grasp_fixture = None
    if spec.include_grasp_fixture:
        grasp_fixture = _grasp_fixture(rng, demo.poses[0])

    demo = _apply_demo_noise(rng, demo, spec)

    scenario = Scenario(
        kind=spec.kind,
        chain=chain,
        demo_trajectory=demo,
        camera_pose=camera,
        objects=objects,
        env_cloud=env_cloud,
        hand_frames=hand_frames,
        grasp_fixture=grasp_fixture,
        ground_truth=GroundTruth(execution_trajectory=gt_exe, base_offset=base_star),
    )
    if out_dir is not None:
        save_scenario(scenario, out_dir)
    return scenario
