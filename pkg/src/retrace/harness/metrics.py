"""Tracking metrics between an executed and a reference trajectory.

Both errors are root-mean-square over per-pose discrepancies: Euclidean
distance for translation and geodesic angle for rotation.  The rotation
angle comes from the relative quaternion through atan2, which keeps full
precision for near-identical rotations where the matrix-trace form loses
the signal to roundoff.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from retrace.errors import ValidationError
from retrace.geometry import Trajectory, quat_conjugate, quat_multiply


@dataclass(frozen=True)
class TrackingError:
    """RMSE over a trajectory pair: translation in meters, rotation in radians."""

    e_trans: float
    e_rot: float

    def __post_init__(self) -> None:
        if self.e_trans < 0.0 or self.e_rot < 0.0:
            raise ValidationError(
                f"tracking errors must be nonnegative, got ({self.e_trans}, {self.e_rot})"
            )

    def to_dict(self) -> dict:
        return {"e_trans": self.e_trans, "e_rot": self.e_rot}

    @classmethod
    def from_dict(cls, data: dict) -> TrackingError:
        try:
            return cls(e_trans=float(data["e_trans"]), e_rot=float(data["e_rot"]))
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"invalid tracking error payload: {exc}") from exc


def rotation_angle(q1: np.ndarray, q2: np.ndarray) -> float:
    """Geodesic angle between two unit quaternions, in [0, pi].

    Uses atan2 on the relative quaternion so angles down to the order of
    1e-12 remain distinguishable from zero; |w| folds the q/-q double cover.
    """
    rel = quat_multiply(q1, quat_conjugate(q2))
    return float(2.0 * np.arctan2(np.linalg.norm(rel[1:]), abs(rel[0])))


def tracking_error(executed: Trajectory, reference: Trajectory) -> TrackingError:
    """RMSE translation and rotation errors between paired poses."""
    if len(executed) != len(reference):
        raise ValidationError(
            f"trajectory lengths differ: {len(executed)} executed vs "
            f"{len(reference)} reference"
        )
    diffs = executed.translations() - reference.translations()
    sq_trans = np.sum(diffs * diffs, axis=1)
    sq_rot = np.array(
        [
            rotation_angle(a.q, b.q) ** 2
            for a, b in zip(executed.poses, reference.poses)
        ]
    )
    return TrackingError(
        e_trans=float(np.sqrt(np.mean(sq_trans))),
        e_rot=float(np.sqrt(np.mean(sq_rot))),
    )
