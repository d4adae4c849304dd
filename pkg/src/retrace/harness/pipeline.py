"""Full transfer pipeline: demo cleanup through replay and metrics.

Stage order: refine the demo, optionally refine hand translations and
retarget the grasp, align through the object delta(s) (blending for dual
scenarios) into the base frame, refine again, choose a base placement,
re-express the reference in the new base frame, prepend the standoff pose,
solve the joint trajectory, replay it, and score tracking error.

The tracking window skips the first two executed poses: index 0 is the
standoff and index 1 duplicates it because trajectories start at rest, so
the first reference pose with an independent executed counterpart is the
third one.
"""

from __future__ import annotations

import re
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from retrace.base_opt import (
    BaseConfig,
    BaseOptParams,
    base_transform,
    optimize_base,
    sample_waypoints,
)
from retrace.errors import PipelineError, ValidationError
from retrace.geometry import Pose, Trajectory, compose, inverse, transform_points
from retrace.grasp_transfer import GraspConfig, transfer_grasp
from retrace.hand_refine import refine_hand_translation
from retrace.harness.metrics import TrackingError, tracking_error
from retrace.harness.replay import replay
from retrace.harness.scenario import (
    Scenario,
    load_scenario,
    read_json,
    save_trajectory,
    write_json,
)
from retrace.joint_opt import (
    JointOptParams,
    optimize_joint_trajectory,
    prepend_standoff,
    save_joint_trajectory,
)
from retrace.kinematics import default_ee_points
from retrace.traj_align import BlendParams, RefineParams, apply_delta, blend_dual, refine, to_base

# Executed indices 0 (standoff) and 1 (rest-start duplicate) have no
# independently tracked reference pose; scoring starts at executed index 2,
# which tracks reference index 1.
METRIC_SKIP = 2


@dataclass
class PipelineConfig:
    """Hyperparameters for every stage, with JSON names matching the report."""

    lambda_effort: float = 0.01
    lambda_goal: float = 1.0
    lambda_tracking: float = 150.0
    lambda_collision: float = 0.02
    lambda_velocity: float = 0.01
    standoff: float = 0.20
    sigma: str | float = "T/4"
    n_waypoints: int = 10
    n_ee_points: int = 32
    iterations: int = 100
    d_safe: float = 0.02
    refine_min_gap: float = 0.0
    refine_outlier_factor: float = 3.0
    base_inner: int = 4000
    joint_inner: int = 400
    tolerance: float = 1e-8
    odom_noise: float = 0.0

    def __post_init__(self) -> None:
        nonnegative = (
            "lambda_effort",
            "lambda_goal",
            "lambda_tracking",
            "lambda_collision",
            "lambda_velocity",
            "standoff",
            "refine_min_gap",
            "odom_noise",
        )
        for name in nonnegative:
            if getattr(self, name) < 0.0:
                raise ValidationError(f"{name} must be nonnegative, got {getattr(self, name)}")
        for name in ("n_waypoints", "n_ee_points", "iterations", "base_inner", "joint_inner"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be at least 1, got {getattr(self, name)}")
        if not self.tolerance > 0.0:
            raise ValidationError(f"tolerance must be positive, got {self.tolerance}")
        if not self.d_safe > 0.0:
            raise ValidationError(f"d_safe must be positive, got {self.d_safe}")
        if not self.refine_outlier_factor > 1.0:
            raise ValidationError(
                f"refine_outlier_factor must exceed 1, got {self.refine_outlier_factor}"
            )
        resolve_sigma(self.sigma, 100)  # validate the format early

    def refine_params(self) -> RefineParams:
        return RefineParams(
            min_gap=self.refine_min_gap, outlier_factor=self.refine_outlier_factor
        )


# JSON key <-> dataclass field; "lambda" is a Python keyword and the short
# names lambda1/lambda2/N/m keep the config file close to common usage.
_CONFIG_KEYS = {
    "lambda_effort": "lambda_effort",
    "lambda_goal": "lambda_goal",
    "lambda": "lambda_tracking",
    "lambda1": "lambda_collision",
    "lambda2": "lambda_velocity",
    "standoff": "standoff",
    "sigma": "sigma",
    "N": "n_waypoints",
    "m": "n_ee_points",
    "iterations": "iterations",
    "d_safe": "d_safe",
    "refine_min_gap": "refine_min_gap",
    "refine_outlier_factor": "refine_outlier_factor",
    "base_inner": "base_inner",
    "joint_inner": "joint_inner",
    "tolerance": "tolerance",
    "odom_noise": "odom_noise",
}
_FIELD_TO_KEY = {fname: key for key, fname in _CONFIG_KEYS.items()}


def config_from_dict(payload: dict) -> PipelineConfig:
    if not isinstance(payload, dict):
        raise ValidationError("pipeline config must be a JSON object")
    unknown = sorted(set(payload) - set(_CONFIG_KEYS))
    if unknown:
        raise ValidationError(f"unknown config keys: {', '.join(unknown)}")
    kwargs = {_CONFIG_KEYS[key]: value for key, value in payload.items()}
    try:
        return PipelineConfig(**kwargs)
    except TypeError as exc:
        raise ValidationError(f"invalid pipeline config: {exc}") from exc


def config_to_dict(config: PipelineConfig) -> dict:
    return {_FIELD_TO_KEY[f.name]: getattr(config, f.name) for f in fields(config)}


def load_config(path) -> PipelineConfig:
    """Config from a JSON file; None loads the defaults."""
    if path is None:
        return PipelineConfig()
    if isinstance(path, PipelineConfig):
        return path
    return config_from_dict(read_json(path))


def resolve_sigma(sigma: str | float, length: int) -> float:
    """Numeric blend width; the string form "T/<k>" scales with length."""
    if isinstance(sigma, str):
        match = re.fullmatch(r"T/(\d+(?:\.\d+)?)", sigma.strip())
        if match is None:
            raise ValidationError(
                f"sigma must be a positive number or 'T/<divisor>', got {sigma!r}"
            )
        return length / float(match.group(1))
    value = float(sigma)
    if not value > 0.0:
        raise ValidationError(f"sigma must be positive, got {value}")
    return value


@dataclass
class AlignResult:
    """Camera- and base-frame aligned references plus per-object copies."""

    per_object: list[Trajectory]
    aligned_camera: Trajectory
    aligned_base: Trajectory


def align_demo(scenario: Scenario, demo: Trajectory, config: PipelineConfig) -> AlignResult:
    """Apply the object delta(s), blend dual alignments, and map to base."""
    per_object = [apply_delta(demo, d) for d in scenario.deltas()]
    if scenario.kind == "dual":
        sigma = resolve_sigma(config.sigma, len(demo))
        aligned_camera = blend_dual(per_object[0], per_object[1], BlendParams(sigma=sigma))
    else:
        aligned_camera = per_object[0]
    aligned_base = to_base(aligned_camera, scenario.camera_pose)
    return AlignResult(
        per_object=per_object, aligned_camera=aligned_camera, aligned_base=aligned_base
    )


@dataclass
class PipelineReport:
    """Per-stage timings, chosen base, tracking error, residuals, and flags."""

    timings: dict[str, float]
    base: BaseConfig
    tracking: TrackingError
    residuals: dict[str, float]
    flags: dict[str, bool]
    artifacts: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name, value in self.timings.items():
            if value < 0.0:
                raise ValidationError(f"stage timing {name!r} is negative: {value}")

    def to_dict(self) -> dict:
        return {
            "timings": dict(self.timings),
            "base_config": {"x": self.base.x, "y": self.base.y, "theta": self.base.theta},
            "tracking_error": self.tracking.to_dict(),
            "residuals": dict(self.residuals),
            "flags": dict(self.flags),
            "artifacts": dict(self.artifacts),
        }

    @classmethod
    def from_dict(cls, data: dict) -> PipelineReport:
        try:
            base = data["base_config"]
            return cls(
                timings={k: float(v) for k, v in data["timings"].items()},
                base=BaseConfig(
                    x=float(base["x"]), y=float(base["y"]), theta=float(base["theta"])
                ),
                tracking=TrackingError.from_dict(data["tracking_error"]),
                residuals={k: float(v) for k, v in data["residuals"].items()},
                flags={k: bool(v) for k, v in data["flags"].items()},
                artifacts={k: str(v) for k, v in data["artifacts"].items()},
            )
        except (KeyError, TypeError, AttributeError) as exc:
            raise ValidationError(f"invalid pipeline report payload: {exc}") from exc


def trajectory_csv(traj: Trajectory) -> str:
    """Plot-friendly CSV: one row per pose, full-precision floats."""
    lines = ["index,x,y,z,qw,qx,qy,qz"]
    for i, pose in enumerate(traj.poses):
        values = [pose.t[0], pose.t[1], pose.t[2], *pose.q]
        lines.append(f"{i}," + ",".join(repr(float(v)) for v in values))
    return "\n".join(lines) + "\n"


def _slice_trajectory(traj: Trajectory, start: int) -> Trajectory:
    timestamps = None if traj.timestamps is None else traj.timestamps[start:]
    return Trajectory(frame_id=traj.frame_id, poses=traj.poses[start:], timestamps=timestamps)


def _first_pose_matches(a: Trajectory, b: Trajectory) -> bool:
    pa, pb = a.poses[0], b.poses[0]
    same_rot = np.array_equal(pa.q, pb.q) or np.array_equal(pa.q, -pb.q)
    return same_rot and np.array_equal(pa.t, pb.t)


def _run_stage(timings: dict, name: str, fn):
    start = time.perf_counter()
    try:
        result = fn()
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError(name, str(exc)) from exc
    timings[name] = time.perf_counter() - start
    return result


def run_pipeline(
    scenario: Scenario | str | Path,
    config: PipelineConfig | str | Path | None = None,
    out_dir: str | Path | None = None,
    seed: int = 0,
) -> PipelineReport:
    """Execute every stage on one scenario and return the report.

    Artifacts (intermediate trajectories, the solved base and joint
    trajectory, CSV plot data, and the report itself) are written under
    ``out_dir`` when given.  Any stage failure raises PipelineError tagged
    with the stage name.
    """
    timings: dict[str, float] = {}

    def _load_stage():
        loaded_scenario = (
            scenario if isinstance(scenario, Scenario) else load_scenario(scenario)
        )
        loaded_config = config if isinstance(config, PipelineConfig) else load_config(config)
        return loaded_scenario, loaded_config

    scenario, config = _run_stage(timings, "load", _load_stage)
    chain = scenario.chain
    refine_params = config.refine_params()
    ee_points = default_ee_points(config.n_ee_points)

    demo = _run_stage(
        timings, "refine_demo", lambda: refine(scenario.demo_trajectory, refine_params)
    )

    hand_translations: list[np.ndarray] = []
    if scenario.hand_frames:

        def _hand_stage() -> Trajectory:
            poses = list(demo.poses)
            for i, obs in enumerate(scenario.hand_frames[: len(poses)]):
                refined_t = refine_hand_translation(obs)
                hand_translations.append(refined_t)
                poses[i] = Pose(poses[i].q, refined_t)
            return Trajectory(frame_id=demo.frame_id, poses=poses, timestamps=demo.timestamps)

        demo = _run_stage(timings, "hand_refine", _hand_stage)

    transferred: GraspConfig | None = None
    if scenario.grasp_fixture is not None:

        def _grasp_stage() -> Trajectory:
            nonlocal transferred
            fixture = scenario.grasp_fixture
            transferred = transfer_grasp(
                fixture.source_gripper,
                GraspConfig(pose=fixture.source_grasp),
                fixture.target_gripper,
                GraspConfig(pose=fixture.init_pose),
            )
            poses = list(demo.poses)
            poses[0] = transferred.pose
            return Trajectory(frame_id=demo.frame_id, poses=poses, timestamps=demo.timestamps)

        demo = _run_stage(timings, "grasp_transfer", _grasp_stage)

    aligned = _run_stage(timings, "align", lambda: align_demo(scenario, demo, config))
    reference_base = _run_stage(
        timings, "refine_aligned", lambda: refine(aligned.aligned_base, refine_params)
    )

    def _base_stage():
        n_samples = min(config.n_waypoints, len(reference_base.poses))
        waypoints = sample_waypoints(reference_base, n_samples)
        params = BaseOptParams(
            n_samples=n_samples,
            lambda_effort=config.lambda_effort,
            lambda_goal=config.lambda_goal,
            ee_points=ee_points,
        )
        return optimize_base(
            waypoints,
            chain,
            scenario.env_cloud,
            params,
            max_iterations=config.iterations,
            tolerance=config.tolerance,
            inner_maxiter=config.base_inner,
        )

    base_config, waypoint_configs, base_report = _run_stage(timings, "base_opt", _base_stage)

    def _re_express():
        inv_base = inverse(base_transform(base_config))
        reference_arm = Trajectory(
            frame_id="base",
            poses=[compose(inv_base, p) for p in reference_base.poses],
            timestamps=reference_base.timestamps,
        )
        env_arm = transform_points(inv_base, scenario.env_cloud)
        return reference_arm, env_arm

    reference_arm, env_arm = _run_stage(timings, "re_express", _re_express)
    reference_standoff = _run_stage(
        timings, "standoff", lambda: prepend_standoff(reference_arm, config.standoff)
    )

    def _joint_stage():
        params = JointOptParams(
            lambda_goal=config.lambda_tracking,
            lambda_collision=config.lambda_collision,
            lambda_velocity=config.lambda_velocity,
            d_safe=config.d_safe,
            standoff_distance=config.standoff,
            ee_points=ee_points,
        )
        return optimize_joint_trajectory(
            chain,
            reference_standoff,
            env_arm,
            params,
            q_start=waypoint_configs[0],
            max_iterations=config.iterations,
            tolerance=config.tolerance,
            inner_maxiter=config.joint_inner,
        )

    joint_traj, joint_report = _run_stage(timings, "joint_opt", _joint_stage)
    executed = _run_stage(
        timings,
        "replay",
        lambda: replay(chain, joint_traj, base_config, config.odom_noise or None, seed=seed),
    )

    def _metrics_stage():
        executed_window = _slice_trajectory(executed, METRIC_SKIP)
        reference_window = _slice_trajectory(reference_base, METRIC_SKIP - 1)
        return tracking_error(executed_window, reference_window)

    tracking = _run_stage(timings, "metrics", _metrics_stage)

    configs = joint_traj.config_array()
    velocities = joint_traj.velocity_array()
    flags = {
        "base_converged": bool(base_report.converged),
        "joint_converged": bool(joint_report.converged),
        "bounds_satisfied": bool(
            np.all(configs >= chain.lower_limits()) and np.all(configs <= chain.upper_limits())
        ),
        "rest_to_rest": bool(
            np.all(velocities[0] == 0.0) and np.all(velocities[-1] == 0.0)
        ),
        "velocity_within_limits": bool(
            np.all(np.abs(velocities) <= chain.velocity_limits() + 1e-12)
        ),
    }
    if scenario.kind == "dual":
        flags["blend_first_pose_matches"] = _first_pose_matches(
            aligned.aligned_camera, aligned.per_object[0]
        )

    residuals = {
        "dynamics_residual": float(joint_traj.dynamics_residual()),
        "base_objective": float(base_report.objective_value),
        "joint_objective": float(joint_report.objective_value),
        "base_bound_violation": float(base_report.max_bound_violation),
    }

    report = PipelineReport(
        timings=timings,
        base=base_config,
        tracking=tracking,
        residuals=residuals,
        flags=flags,
    )

    if out_dir is not None:

        def _write_artifacts():
            root = Path(out_dir)
            root.mkdir(parents=True, exist_ok=True)
            save_trajectory(demo, root / "demo_refined.json")
            save_trajectory(reference_base, root / "aligned_base.json")
            write_json(
                root / "base_config.json",
                {"x": base_config.x, "y": base_config.y, "theta": base_config.theta},
            )
            write_json(
                root / "waypoint_configs.json",
                {"q": [cfg.q.tolist() for cfg in waypoint_configs]},
            )
            save_trajectory(reference_standoff, root / "reference_arm.json")
            save_joint_trajectory(joint_traj, root / "joint_trajectory.json")
            save_trajectory(executed, root / "executed.json")
            (root / "executed.csv").write_text(trajectory_csv(executed))
            (root / "reference.csv").write_text(trajectory_csv(reference_base))
            if hand_translations:
                write_json(
                    root / "hand_refined.json",
                    {"translations": [t.tolist() for t in hand_translations]},
                )
            if transferred is not None:
                write_json(root / "transferred_grasp.json", {"pose": transferred.pose.to_dict()})
            for name in sorted(p.name for p in root.iterdir() if p.is_file()):
                if name != "report.json":
                    report.artifacts[name] = name
            write_json(root / "report.json", report.to_dict())

        _run_stage(timings, "write_artifacts", _write_artifacts)

    return report
