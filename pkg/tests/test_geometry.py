from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation as ScipyRotation

from retrace.geometry import (
    Pose,
    Trajectory,
    compose,
    geodesic_angle,
    interp_pose,
    inverse,
    quat_slerp,
    rot_z,
    transform_points,
    translation,
)


def _random_pose(rng: np.random.Generator) -> Pose:
    q = rng.normal(size=4)
    t = rng.uniform(-2.0, 2.0, size=3)
    return Pose(q, t)


def _mat4(pose: Pose) -> np.ndarray:
    # Independent 4x4 oracle built through scipy's quaternion conversion.
    out = np.eye(4)
    out[:3, :3] = ScipyRotation.from_quat(pose.q, scalar_first=True).as_matrix()
    out[:3, 3] = pose.t
    return out


@st.composite
def poses(draw):
    finite = st.floats(-1.0, 1.0, allow_nan=False, allow_infinity=False)
    q = np.array([draw(finite) for _ in range(4)])
    if np.linalg.norm(q) < 1e-2:
        q = np.array([1.0, 0.0, 0.0, 0.0])
    t = np.array([draw(st.floats(-5.0, 5.0, allow_nan=False)) for _ in range(3)])
    return Pose(q, t)


class TestCompose:
    def test_identity_left_neutral(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            p = _random_pose(rng)
            out = compose(Pose.identity(), p)
            np.testing.assert_allclose(out.matrix(), p.matrix(), atol=1e-14)
            np.testing.assert_allclose(out.t, p.t, atol=1e-14)

    def test_translation_then_rotation_moves_point(self):
        pose = compose(translation(1.0, 0.0, 0.0), rot_z(np.pi / 2))
        moved = transform_points(pose, np.array([[1.0, 0.0, 0.0]]))[0]
        np.testing.assert_allclose(moved, [1.0, 1.0, 0.0], atol=1e-12)

    def test_matches_homogeneous_matrix_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(25):
            a, b = _random_pose(rng), _random_pose(rng)
            expected = _mat4(a) @ _mat4(b)
            np.testing.assert_allclose(_mat4(compose(a, b)), expected, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(poses(), poses(), poses())
    def test_associative(self, a, b, c):
        left = compose(compose(a, b), c)
        right = compose(a, compose(b, c))
        np.testing.assert_allclose(left.matrix(), right.matrix(), atol=1e-9)
        np.testing.assert_allclose(left.t, right.t, atol=1e-9)


class TestInverse:
    def test_roundtrip_to_identity(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            a = _random_pose(rng)
            out = compose(a, inverse(a))
            np.testing.assert_allclose(out.matrix(), np.eye(3), atol=1e-12)
            np.testing.assert_allclose(out.t, np.zeros(3), atol=1e-12)

    def test_double_inverse(self):
        rng = np.random.default_rng(3)
        a = _random_pose(rng)
        back = inverse(inverse(a))
        np.testing.assert_allclose(back.matrix(), a.matrix(), atol=1e-12)
        np.testing.assert_allclose(back.t, a.t, atol=1e-12)


class TestGeodesicAngle:
    @pytest.mark.parametrize("theta", [-np.pi + 1e-6, -np.pi / 2, -np.pi / 6, 0.0, np.pi / 6, np.pi / 2, np.pi - 1e-6])
    def test_z_rotation_angle(self, theta):
        assert geodesic_angle(rot_z(theta), Pose.identity()) == pytest.approx(abs(theta), abs=1e-9)

    def test_matches_scipy_rotvec_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            r1 = ScipyRotation.random(rng=rng)
            r2 = ScipyRotation.random(rng=rng)
            expected = np.linalg.norm((r1.inv() * r2).as_rotvec())
            got = geodesic_angle(r1.as_matrix(), r2.as_matrix())
            assert got == pytest.approx(expected, abs=1e-8)

    def test_clamps_slightly_out_of_range_trace(self):
        # A matrix a hair away from orthonormal must not produce NaN.
        jitter = np.eye(3) + 1e-12
        assert np.isfinite(geodesic_angle(jitter, np.eye(3)))

    def test_symmetric_and_nonnegative(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            a, b = _random_pose(rng), _random_pose(rng)
            d_ab = geodesic_angle(a, b)
            d_ba = geodesic_angle(b, a)
            assert d_ab >= 0.0
            assert d_ab == pytest.approx(d_ba, abs=1e-12)

    def test_triangle_inequality(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            a, b, c = (_random_pose(rng) for _ in range(3))
            assert geodesic_angle(a, c) <= geodesic_angle(a, b) + geodesic_angle(b, c) + 1e-9


class TestInterpPose:
    def test_rotation_midpoint(self):
        mid = interp_pose(Pose.identity(), rot_z(np.pi / 2), 0.5)
        np.testing.assert_allclose(mid.matrix(), rot_z(np.pi / 4).matrix(), atol=1e-12)

    def test_translation_weight_is_on_first_argument(self):
        out = interp_pose(translation(0.0, 0.0, 0.0), translation(2.0, 0.0, 0.0), 0.25)
        np.testing.assert_allclose(out.t, [1.5, 0.0, 0.0], atol=1e-12)

    def test_endpoints_exact(self):
        rng = np.random.default_rng(7)
        a, b = _random_pose(rng), _random_pose(rng)
        at_one = interp_pose(a, b, 1.0)
        at_zero = interp_pose(a, b, 0.0)
        np.testing.assert_array_equal(at_one.t, a.t)
        np.testing.assert_array_equal(at_zero.t, b.t)
        assert abs(abs(np.dot(at_one.q, a.q)) - 1.0) < 1e-15
        assert abs(abs(np.dot(at_zero.q, b.q)) - 1.0) < 1e-15

    @pytest.mark.parametrize("w", [-0.1, 1.1, 2.0])
    def test_rejects_weight_outside_unit_interval(self, w):
        with pytest.raises(ValueError):
            interp_pose(Pose.identity(), Pose.identity(), w)

    def test_shortest_arc_across_sign_flip(self):
        # Same rotation encoded with opposite quaternion signs must not take
        # the long way around.
        a = rot_z(0.1)
        b = Pose(-rot_z(0.2).q, np.zeros(3))
        mid = interp_pose(a, b, 0.5)
        assert geodesic_angle(mid, rot_z(0.15)) < 1e-9

    @settings(max_examples=50, deadline=None)
    @given(poses(), poses(), st.floats(0.0, 1.0, allow_nan=False))
    def test_output_quaternion_is_unit(self, a, b, w):
        out = interp_pose(a, b, w)
        assert abs(np.linalg.norm(out.q) - 1.0) < 1e-12


class TestSlerp:
    def test_against_scipy_slerp_oracle(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            r1 = ScipyRotation.random(rng=rng)
            r2 = ScipyRotation.random(rng=rng)
            for t in (0.25, 0.5, 0.75):
                expected = (r1 * (r1.inv() * r2) ** t).as_matrix()
                qa = r1.as_quat(scalar_first=True)
                qb = r2.as_quat(scalar_first=True)
                got = Pose(quat_slerp(qa, qb, t), np.zeros(3)).matrix()
                np.testing.assert_allclose(got, expected, atol=1e-9)


class TestTransformPoints:
    def test_matches_per_point_loop(self):
        rng = np.random.default_rng(9)
        pose = _random_pose(rng)
        pts = rng.uniform(-1.0, 1.0, size=(40, 3))
        batch = transform_points(pose, pts)
        rot = pose.matrix()
        for i in range(len(pts)):
            np.testing.assert_allclose(batch[i], rot @ pts[i] + pose.t, atol=1e-13)

    def test_rejects_bad_shape(self):
        with pytest.raises(ValueError):
            transform_points(Pose.identity(), np.zeros((3, 2)))


class TestOrthonormality:
    def test_long_composition_chain_stays_orthonormal(self):
        rng = np.random.default_rng(10)
        acc = Pose.identity()
        for _ in range(500):
            acc = compose(acc, _random_pose(rng))
        rot = acc.matrix()
        np.testing.assert_allclose(rot @ rot.T, np.eye(3), atol=1e-9)
        assert np.linalg.det(rot) == pytest.approx(1.0, abs=1e-9)


class TestSerialization:
    def test_pose_roundtrip_exact(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            p = _random_pose(rng)
            back = Pose.from_dict(p.to_dict())
            np.testing.assert_array_equal(back.q, p.q)
            np.testing.assert_array_equal(back.t, p.t)

    def test_trajectory_roundtrip_exact(self):
        rng = np.random.default_rng(12)
        traj = Trajectory(
            frame_id="camera",
            poses=[_random_pose(rng) for _ in range(5)],
            timestamps=np.array([0.0, 0.1, 0.2, 0.35, 0.5]),
        )
        back = Trajectory.from_dict(traj.to_dict())
        assert back.frame_id == "camera"
        np.testing.assert_array_equal(back.timestamps, traj.timestamps)
        for p, q in zip(back.poses, traj.poses):
            np.testing.assert_array_equal(p.q, q.q)
            np.testing.assert_array_equal(p.t, q.t)


class TestTrajectoryValidation:
    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            Trajectory(frame_id="camera", poses=[])

    def test_rejects_non_increasing_timestamps(self):
        with pytest.raises(ValueError):
            Trajectory(
                frame_id="camera",
                poses=[Pose.identity(), Pose.identity()],
                timestamps=np.array([0.1, 0.1]),
            )

    def test_rejects_timestamp_length_mismatch(self):
        with pytest.raises(ValueError):
            Trajectory(
                frame_id="camera",
                poses=[Pose.identity()],
                timestamps=np.array([0.0, 1.0]),
            )
