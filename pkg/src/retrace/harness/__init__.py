"""Scenario fixtures, synthetic generation, replay, metrics, and the pipeline."""

from retrace.harness.generate import GenerationSpec, generate_scenario
from retrace.harness.metrics import TrackingError, rotation_angle, tracking_error
from retrace.harness.pipeline import (
    AlignResult,
    PipelineConfig,
    PipelineReport,
    align_demo,
    config_from_dict,
    config_to_dict,
    load_config,
    resolve_sigma,
    run_pipeline,
    trajectory_csv,
)
from retrace.harness.replay import replay
from retrace.harness.scenario import (
    GraspFixture,
    GroundTruth,
    ObjectPoses,
    SCENARIO_SCHEMA,
    Scenario,
    load_env_cloud,
    load_scenario,
    load_trajectory,
    save_env_cloud,
    save_scenario,
    save_trajectory,
    validate_scenario,
)

__all__ = [
    "AlignResult",
    "GenerationSpec",
    "GraspFixture",
    "GroundTruth",
    "ObjectPoses",
    "PipelineConfig",
    "PipelineReport",
    "SCENARIO_SCHEMA",
    "Scenario",
    "TrackingError",
    "align_demo",
    "config_from_dict",
    "config_to_dict",
    "generate_scenario",
    "load_config",
    "load_env_cloud",
    "load_scenario",
    "load_trajectory",
    "replay",
    "resolve_sigma",
    "rotation_angle",
    "run_pipeline",
    "save_env_cloud",
    "save_scenario",
    "save_trajectory",
    "tracking_error",
    "trajectory_csv",
    "validate_scenario",
]
