"""Scenario fixtures: on-disk layout, loading, saving, and validation.

A scenario is a directory with a ``scenario.json`` manifest that references
the chain, demo trajectory, object pose pairs, environment cloud, and the
optional hand-refine frames, grasp fixture, and ground-truth block.  The
manifest carries the schema tag ``hrt1-scenario/1``; loaders reject unknown
schemas so stale fixtures fail loudly instead of half-parsing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from retrace.base_opt import BaseConfig
from retrace.errors import ValidationError
from retrace.geometry import Pose, Trajectory
from retrace.grasp_transfer import GripperModel, load_gripper_model, save_gripper_model
from retrace.hand_refine import HandObservation, load_hand_frame, save_hand_frame
from retrace.kinematics import KinematicChain, load_chain, save_chain
from retrace.traj_align import ObjectDelta, delta_to_dict, object_delta

SCENARIO_SCHEMA = "hrt1-scenario/1"
SCENARIO_KINDS = ("single", "dual")
MANIFEST_NAME = "scenario.json"


def write_json(path: str | Path, payload) -> None:
    """Canonical JSON writer: sorted keys, two-space indent, newline at end.

    A fixed layout makes fixture generation reproducible byte for byte.
    """
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_json(path: str | Path):
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"referenced file does not exist: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path} is not valid JSON: {exc}") from exc


def save_trajectory(traj: Trajectory, path: str | Path) -> None:
    write_json(path, traj.to_dict())


def load_trajectory(path: str | Path) -> Trajectory:
    payload = read_json(path)
    try:
        return Trajectory.from_dict(payload)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"invalid trajectory file {path}: {exc}") from exc


def save_env_cloud(points: np.ndarray, path: str | Path) -> None:
    write_json(path, {"points": np.asarray(points, dtype=float).tolist()})


def load_env_cloud(path: str | Path) -> np.ndarray:
    payload = read_json(path)
    try:
        points = np.asarray(payload["points"], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"invalid environment cloud file {path}: {exc}") from exc
    if points.ndim != 2 or points.shape[1] != 3 or len(points) == 0:
        raise ValidationError(
            f"environment cloud must be a non-empty (n, 3) array, got {points.shape}"
        )
    if not np.all(np.isfinite(points)):
        raise ValidationError("environment cloud contains non-finite values")
    return points


@dataclass
class ObjectPoses:
    """An object's pose at demonstration time and at execution time."""

    name: str
    t_demo: Pose
    t_exe: Pose

    def delta(self) -> ObjectDelta:
        return object_delta(self.t_demo, self.t_exe, name=self.name)


@dataclass
class GraspFixture:
    """Inputs for the gripper-retargeting stage: two models and two poses."""

    source_gripper: GripperModel
    target_gripper: GripperModel
    source_grasp: Pose
    init_pose: Pose


@dataclass
class GroundTruth:
    """Oracle block: the true execution trajectory and the true base offset."""

    execution_trajectory: Trajectory
    base_offset: BaseConfig


@dataclass
class Scenario:
    """In-memory scenario: everything the pipeline consumes."""

    kind: str
    chain: KinematicChain
    demo_trajectory: Trajectory
    camera_pose: Pose
    objects: list[ObjectPoses]
    env_cloud: np.ndarray
    hand_frames: list[HandObservation] = field(default_factory=list)
    grasp_fixture: GraspFixture | None = None
    ground_truth: GroundTruth | None = None

    def deltas(self) -> list[ObjectDelta]:
        return [obj.delta() for obj in self.objects]


def validate_scenario(scenario: Scenario) -> None:
    """Check the cross-field invariants that the loaders cannot check locally."""
    if scenario.kind not in SCENARIO_KINDS:
        raise ValidationError(
            f"scenario kind must be one of {SCENARIO_KINDS}, got {scenario.kind!r}"
        )
    expected = 1 if scenario.kind == "single" else 2
    if len(scenario.objects) != expected:
        raise ValidationError(
            f"{scenario.kind} scenario must carry exactly {expected} object "
            f"delta(s), got {len(scenario.objects)}"
        )
    if scenario.demo_trajectory.frame_id != "camera":
        raise ValidationError(
            "demo trajectory must be in the camera frame, got "
            f"{scenario.demo_trajectory.frame_id!r}"
        )
    cloud = np.asarray(scenario.env_cloud, dtype=float)
    if cloud.ndim != 2 or cloud.shape[1] != 3 or len(cloud) == 0:
        raise ValidationError(
            f"environment cloud must be a non-empty (n, 3) array, got {cloud.shape}"
        )
    if scenario.ground_truth is not None:
        gt_frame = scenario.ground_truth.execution_trajectory.frame_id
        if gt_frame != "camera":
            raise ValidationError(
                f"ground-truth execution trajectory must be in the camera frame, got {gt_frame!r}"
            )


def _object_poses_from_entry(entry: dict) -> ObjectPoses:
    try:
        return ObjectPoses(
            name=str(entry.get("object", "")),
            t_demo=Pose.from_dict(entry["t_demo"]),
            t_exe=Pose.from_dict(entry["t_exe"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"invalid object delta entry: {exc}") from exc


def _load_grasp_fixture(root: Path, block: dict) -> GraspFixture:
    try:
        source_path = root / block["source_gripper"]
        target_path = root / block["target_gripper"]
        source_grasp = Pose.from_dict(block["source_grasp"])
        init_pose = Pose.from_dict(block["init_pose"])
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"invalid grasp fixture block: {exc}") from exc
    for path in (source_path, target_path):
        if not path.exists():
            raise ValidationError(f"referenced file does not exist: {path}")
    return GraspFixture(
        source_gripper=load_gripper_model(source_path),
        target_gripper=load_gripper_model(target_path),
        source_grasp=source_grasp,
        init_pose=init_pose,
    )


def load_scenario(path: str | Path) -> Scenario:
    """Load and validate a scenario from its directory or manifest path."""
    path = Path(path)
    manifest_path = path / MANIFEST_NAME if path.is_dir() else path
    manifest = read_json(manifest_path)
    if not isinstance(manifest, dict):
        raise ValidationError(f"scenario manifest {manifest_path} must be a JSON object")
    schema = manifest.get("schema")
    if schema != SCENARIO_SCHEMA:
        raise ValidationError(
            f"unsupported scenario schema {schema!r}, expected {SCENARIO_SCHEMA!r}"
        )
    root = manifest_path.parent
    try:
        kind = manifest["kind"]
        chain_ref = manifest["chain"]
        demo_ref = manifest["demo_trajectory"]
        deltas_ref = manifest["deltas"]
        env_ref = manifest["env_cloud"]
        camera_pose = Pose.from_dict(manifest["camera_pose"])
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"scenario manifest {manifest_path}: {exc}") from exc

    chain_path = root / chain_ref
    if not chain_path.exists():
        raise ValidationError(f"referenced file does not exist: {chain_path}")
    chain = load_chain(chain_path)
    demo = load_trajectory(root / demo_ref)
    delta_payload = read_json(root / deltas_ref)
    if isinstance(delta_payload, dict):
        delta_payload = [delta_payload]
    objects = [_object_poses_from_entry(entry) for entry in delta_payload]
    env_cloud = load_env_cloud(root / env_ref)

    hand_frames = []
    for ref in manifest.get("hand_frames", []):
        frame_path = root / ref
        if not frame_path.exists():
            raise ValidationError(f"referenced file does not exist: {frame_path}")
        hand_frames.append(load_hand_frame(frame_path))

    grasp_block = manifest.get("grasp_fixture")
    grasp_fixture = None
    if grasp_block is not None:
        grasp_fixture = _load_grasp_fixture(root, grasp_block)

    gt_ref = manifest.get("ground_truth")
    ground_truth = None
    if gt_ref is not None:
        gt_payload = read_json(root / gt_ref)
        try:
            offset = gt_payload["base_offset"]
            ground_truth = GroundTruth(
                execution_trajectory=Trajectory.from_dict(gt_payload["execution_trajectory"]),
                base_offset=BaseConfig(
                    x=float(offset["x"]), y=float(offset["y"]), theta=float(offset["theta"])
                ),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError(f"invalid ground-truth file: {exc}") from exc

    scenario = Scenario(
        kind=kind,
        chain=chain,
        demo_trajectory=demo,
        camera_pose=camera_pose,
        objects=objects,
        env_cloud=env_cloud,
        hand_frames=hand_frames,
        grasp_fixture=grasp_fixture,
        ground_truth=ground_truth,
    )
    validate_scenario(scenario)
    return scenario


def save_scenario(scenario: Scenario, out_dir: str | Path) -> Path:
    """Write the scenario directory and manifest; returns the manifest path."""
    validate_scenario(scenario)
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)

    save_chain(scenario.chain, root / "chain.json")
    save_trajectory(scenario.demo_trajectory, root / "demo_traj.json")
    write_json(
        root / "deltas.json",
        [
            delta_to_dict(obj.delta(), obj.t_demo, obj.t_exe)
            for obj in scenario.objects
        ],
    )
    save_env_cloud(scenario.env_cloud, root / "env_cloud.json")

    hand_refs = []
    if scenario.hand_frames:
        frames_dir = root / "hand_frames"
        frames_dir.mkdir(exist_ok=True)
        for i, obs in enumerate(scenario.hand_frames):
            ref = f"hand_frames/frame_{i:03d}.json"
            save_hand_frame(obs, root / ref)
            hand_refs.append(ref)

    grasp_block = None
    if scenario.grasp_fixture is not None:
        fixture = scenario.grasp_fixture
        save_gripper_model(fixture.source_gripper, root / "gripper_source.json")
        save_gripper_model(fixture.target_gripper, root / "gripper_target.json")
        grasp_block = {
            "source_gripper": "gripper_source.json",
            "target_gripper": "gripper_target.json",
            "source_grasp": fixture.source_grasp.to_dict(),
            "init_pose": fixture.init_pose.to_dict(),
        }

    gt_ref = None
    if scenario.ground_truth is not None:
        gt_ref = "ground_truth.json"
        write_json(
            root / gt_ref,
            {
                "base_offset": {
                    "x": scenario.ground_truth.base_offset.x,
                    "y": scenario.ground_truth.base_offset.y,
                    "theta": scenario.ground_truth.base_offset.theta,
                },
                "execution_trajectory": scenario.ground_truth.execution_trajectory.to_dict(),
            },
        )

    manifest = {
        "schema": SCENARIO_SCHEMA,
        "kind": scenario.kind,
        "chain": "chain.json",
        "demo_trajectory": "demo_traj.json",
        "deltas": "deltas.json",
        "env_cloud": "env_cloud.json",
        "camera_pose": scenario.camera_pose.to_dict(),
        "hand_frames": hand_refs,
        "grasp_fixture": grasp_block,
        "ground_truth": gt_ref,
    }
    manifest_path = root / MANIFEST_NAME
    write_json(manifest_path, manifest)
    return manifest_path
