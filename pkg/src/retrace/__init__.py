"""Demonstration-to-robot trajectory transfer toolkit.

Takes a demonstrated end-effector trajectory observed in a camera frame,
aligns it to the current scene through per-object pose deltas, picks a mobile
base placement, and solves for a joint-space trajectory that tracks the
aligned reference while respecting joint limits, velocity limits, and
clearance from an environment point cloud.
"""

from retrace.geometry import Pose, Trajectory
from retrace.errors import PipelineError, SolverError, ValidationError

__all__ = [
    "Pose",
    "Trajectory",
    "PipelineError",
    "SolverError",
    "ValidationError",
]

__version__ = "0.1.0"
