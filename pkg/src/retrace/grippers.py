"""Built-in gripper and hand surface models.

Two fixtures ship with the package: a rigid two-finger parallel jaw and a
small articulated pinch hand.  Both use the same normalized surface
coordinate layout (palm patch plus two opposing finger strips), so their
mutual correspondence pairs palm to palm and finger to finger.  The JSON
files under ``data/grippers`` are generated from the builders here; a test
keeps them in sync.
"""

from __future__ import annotations

from importlib import resources

import numpy as np

from retrace.errors import ValidationError
from retrace.grasp_transfer import GripperModel, gripper_from_dict

FINGER_STEPS = 6
PALM_COLUMNS = (0.45, 0.55)
PALM_ROWS = (0.42, 0.50, 0.58)


def _coord_layout() -> np.ndarray:
    """Shared (lambda, phi) layout: two finger strips and a 2x3 palm patch."""
    phi_strip = np.linspace(0.35, 0.65, FINGER_STEPS)
    coords = []
    for lam in (0.25, 0.75):
        coords.extend((lam, phi) for phi in phi_strip)
    for lam in PALM_COLUMNS:
        coords.extend((lam, phi) for phi in PALM_ROWS)
    return np.array(coords)


def parallel_jaw_model(*, gap: float = 0.08, depth: float = 0.10) -> GripperModel:
    """Rigid two-finger gripper; x is the approach axis, fingers straddle y."""
    along = np.linspace(0.02, depth, FINGER_STEPS)
    points = []
    for side in (+1.0, -1.0):
        points.extend((x, side * 0.5 * gap, 0.0) for x in along)
    for y in (-0.02, 0.02):
        points.extend((0.0, y, z) for z in (-0.012, 0.0, 0.012))
    return GripperModel(
        name="parallel_jaw",
        points=np.array(points),
        coords=_coord_layout(),
    )


def pinch_hand_model(*, span: float = 0.10, reach: float = 0.09) -> GripperModel:
    """Two-joint pinch hand: thumb and index pads close linearly toward y = 0.

    Joint 0 curls the thumb strip (positive y side), joint 1 the index strip;
    pad points translate proportionally to their distance along the finger.
    """
    along = np.linspace(0.01, reach, FINGER_STEPS)
    curl = np.linspace(0.3, 1.0, FINGER_STEPS)
    points = []
    for side in (+1.0, -1.0):
        points.extend((x, side * 0.5 * span, 0.0) for x in along)
    for y in (-0.025, 0.025):
        points.extend((-0.01, y, z) for z in (-0.015, 0.0, 0.015))
    points = np.array(points)

    n_points = len(points)
    articulation = np.zeros((n_points, 3, 2))
    articulation[0:FINGER_STEPS, 1, 0] = -0.04 * curl
    articulation[FINGER_STEPS : 2 * FINGER_STEPS, 1, 1] = 0.04 * curl
    limits = (np.zeros(2), np.array([1.2, 1.2]))
    return GripperModel(
        name="pinch_hand",
        points=points,
        coords=_coord_layout(),
        joint_limits=limits,
        articulation=articulation,
    )


BUILDERS = {
    "parallel_jaw": parallel_jaw_model,
    "pinch_hand": pinch_hand_model,
}


def bundled_gripper(name: str) -> GripperModel:
    """Load one of the gripper fixtures shipped inside the package."""
    if name not in BUILDERS:
        raise ValidationError(
            f"unknown gripper fixture {name!r}; available: {sorted(BUILDERS)}"
        )
    ref = resources.files("retrace").joinpath("data", "grippers", f"{name}.json")
    import json

    return gripper_from_dict(json.loads(ref.read_text()))
