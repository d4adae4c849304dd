"""Tests for demo trajectory alignment and cleanup."""

import numpy as np
import pytest

from retrace.errors import ValidationError
from retrace.geometry import (
    Pose,
    Trajectory,
    compose,
    geodesic_angle,
    interp_pose,
    inverse,
    quat_normalize,
    rot_z,
    translation,
)
from retrace.traj_align import (
    BlendParams,
    ObjectDelta,
    RefineParams,
    apply_delta,
    blend_dual,
    blend_weights,
    delta_from_dict,
    load_deltas,
    object_delta,
    refine,
    to_base,
)


def random_pose(rng, scale=0.5):
    return Pose(q=quat_normalize(rng.normal(size=4)), t=rng.uniform(-scale, scale, 3))


def mat4(pose):
    m = np.eye(4)
    m[:3, :3] = pose.matrix()
    m[:3, 3] = pose.t
    return m


def random_trajectory(rng, n, frame_id="camera"):
    return Trajectory(frame_id=frame_id, poses=[random_pose(rng) for _ in range(n)])


class TestObjectDelta:
    def test_same_pose_gives_identity(self):
        rng = np.random.default_rng(0)
        pose = random_pose(rng)
        d = object_delta(pose, pose)
        assert np.allclose(mat4(d.delta), np.eye(4), atol=1e-12)

    def test_pure_translation(self):
        rng = np.random.default_rng(1)
        demo = random_pose(rng)
        shift = np.array([0.1, -0.2, 0.05])
        exe = Pose(q=demo.q, t=demo.t + shift)
        d = object_delta(demo, exe)
        assert geodesic_angle(d.delta, Pose.identity()) <= 1e-12
        assert np.allclose(d.delta.t, shift, atol=1e-12)

    def test_matches_matrix_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            demo = random_pose(rng)
            exe = random_pose(rng)
            d = object_delta(demo, exe)
            expected = mat4(exe) @ np.linalg.inv(mat4(demo))
            assert np.allclose(mat4(d.delta), expected, atol=1e-12)


class TestApplyDelta:
    def test_identity_delta_is_noop(self):
        rng = np.random.default_rng(3)
        traj = random_trajectory(rng, 5)
        out = apply_delta(traj, ObjectDelta(delta=Pose.identity()))
        for a, b in zip(out.poses, traj.poses):
            assert np.allclose(mat4(a), mat4(b), atol=1e-15)
        assert out.frame_id == traj.frame_id

    def test_roundtrip_with_inverse(self):
        rng = np.random.default_rng(4)
        traj = random_trajectory(rng, 6)
        d = ObjectDelta(delta=random_pose(rng))
        back = apply_delta(apply_delta(traj, d), ObjectDelta(delta=inverse(d.delta)))
        for a, b in zip(back.poses, traj.poses):
            assert np.allclose(mat4(a), mat4(b), atol=1e-10)

    def test_matches_matrix_oracle(self):
        rng = np.random.default_rng(5)
        traj = random_trajectory(rng, 3)
        d = ObjectDelta(delta=compose(rot_z(0.7), translation(0.1, 0.2, -0.3)))
        out = apply_delta(traj, d)
        for src, dst in zip(traj.poses, out.poses):
            assert np.allclose(mat4(dst), mat4(d.delta) @ mat4(src), atol=1e-12)


class TestBlendDual:
    def test_first_frame_comes_from_traj1(self):
        rng = np.random.default_rng(6)
        t1 = random_trajectory(rng, 7)
        t2 = random_trajectory(rng, 7)
        out = blend_dual(t1, t2, BlendParams(sigma=7 / 4))
        assert np.array_equal(out.poses[0].t, t1.poses[0].t)
        assert geodesic_angle(out.poses[0], t1.poses[0]) <= 1e-6

    def test_identical_inputs_fixed_point(self):
        rng = np.random.default_rng(7)
        t1 = random_trajectory(rng, 5)
        for sigma in (0.5, 1.25, 10.0):
            out = blend_dual(t1, t1, BlendParams(sigma=sigma))
            for a, b in zip(out.poses, t1.poses):
                assert np.allclose(mat4(a), mat4(b), atol=1e-12)

    def test_last_weight_formula_t9(self):
        # T = 9, sigma = T/4: alpha(9) = exp(-64 / (2 * 2.25^2))
        sigma = 9 / 4
        alpha = blend_weights(9, sigma)
        expected_last = np.exp(-64.0 / (2.0 * sigma * sigma))
        assert alpha[0] == 1.0
        assert alpha[-1] == pytest.approx(expected_last, rel=1e-12)
        assert expected_last == pytest.approx(1.7982e-3, rel=1e-3)

        rng = np.random.default_rng(8)
        t1 = random_trajectory(rng, 9)
        t2 = random_trajectory(rng, 9)
        out = blend_dual(t1, t2, BlendParams(sigma=sigma))
        direct = interp_pose(t1.poses[-1], t2.poses[-1], float(expected_last))
        assert np.allclose(mat4(out.poses[-1]), mat4(direct), atol=1e-12)
        expected_t = expected_last * t1.poses[-1].t + (1 - expected_last) * t2.poses[-1].t
        assert np.allclose(out.poses[-1].t, expected_t, atol=1e-12)

    def test_monotone_weight_decay(self):
        alpha = blend_weights(20, 5.0)
        assert np.all(np.diff(alpha) < 0.0)
        assert alpha[0] == 1.0

    def test_length_and_orthonormality(self):
        rng = np.random.default_rng(9)
        t1 = random_trajectory(rng, 11)
        t2 = random_trajectory(rng, 11)
        out = blend_dual(t1, t2, BlendParams(sigma=11 / 4))
        assert len(out.poses) == 11
        for pose in out.poses:
            r = pose.matrix()[:3, :3]
            assert np.allclose(r @ r.T, np.eye(3), atol=1e-9)

    def test_length_mismatch_rejected(self):
        rng = np.random.default_rng(10)
        with pytest.raises(ValueError):
            blend_dual(
                random_trajectory(rng, 4),
                random_trajectory(rng, 5),
                BlendParams(sigma=1.0),
            )

    def test_bad_sigma_rejected(self):
        with pytest.raises(ValidationError):
            BlendParams(sigma=0.0)


class TestToBase:
    def test_identity_relabels_frame(self):
        rng = np.random.default_rng(11)
        traj = random_trajectory(rng, 4)
        out = to_base(traj, Pose.identity())
        assert out.frame_id == "base"
        for a, b in zip(out.poses, traj.poses):
            assert np.allclose(mat4(a), mat4(b), atol=1e-15)

    def test_translation_offset(self):
        rng = np.random.default_rng(12)
        traj = random_trajectory(rng, 5)
        offset = translation(0.3, -0.1, 0.9)
        out = to_base(traj, offset)
        assert np.allclose(out.translations(), traj.translations() + offset.t, atol=1e-12)

    def test_matches_matrix_oracle(self):
        rng = np.random.default_rng(13)
        traj = random_trajectory(rng, 6)
        t_bc = random_pose(rng)
        out = to_base(traj, t_bc)
        for src, dst in zip(traj.poses, out.poses):
            assert np.allclose(mat4(dst), mat4(t_bc) @ mat4(src), atol=1e-12)

    def test_wrong_frame_rejected(self):
        rng = np.random.default_rng(14)
        traj = random_trajectory(rng, 3, frame_id="base")
        with pytest.raises(ValueError):
            to_base(traj, Pose.identity())

    def test_composition_with_delta_is_posewise_product(self):
        rng = np.random.default_rng(15)
        traj = random_trajectory(rng, 5)
        d = ObjectDelta(delta=random_pose(rng))
        t_bc = random_pose(rng)
        out = to_base(apply_delta(traj, d), t_bc)
        combined = mat4(compose(t_bc, d.delta))
        for src, dst in zip(traj.poses, out.poses):
            assert np.allclose(mat4(dst), combined @ mat4(src), atol=1e-12)


def line_trajectory(xs, frame_id="base"):
    return Trajectory(frame_id=frame_id, poses=[translation(x, 0.0, 0.0) for x in xs])


class TestRefine:
    def test_consecutive_duplicates_removed(self):
        xs = [0.0, 0.01, 0.01, 0.02, 0.02, 0.03]
        out = refine(line_trajectory(xs), RefineParams(min_gap=0.005, outlier_factor=3.0))
        assert [p.t[0] for p in out.poses] == [0.0, 0.01, 0.02, 0.03]

    def test_spike_removed(self):
        xs = list(np.arange(0.0, 0.1, 0.01))
        pts = line_trajectory(xs).poses
        spike = translation(0.04, 1.0, 0.0)
        poses = pts[:5] + [spike] + pts[5:]
        traj = Trajectory(frame_id="base", poses=poses)
        params = RefineParams(min_gap=0.005, outlier_factor=3.0)
        out = refine(traj, params)

        # independent rule evaluation: spike exceeds 3x the median step to
        # both neighbors, every other point survives
        trans = traj.translations()
        steps = np.linalg.norm(np.diff(trans, axis=0), axis=1)
        med = np.median(steps)
        expected = []
        n = len(poses)
        for i in range(n):
            if 0 < i < n - 1:
                if (
                    np.linalg.norm(trans[i] - trans[i - 1]) > 3 * med
                    and np.linalg.norm(trans[i] - trans[i + 1]) > 3 * med
                ):
                    continue
            expected.append(i)
        assert len(out.poses) == len(expected)
        assert not any(np.allclose(p.t, spike.t) for p in out.poses)
        assert np.allclose(out.translations(), trans[expected], atol=1e-15)

    def test_single_pose_unchanged(self):
        traj = line_trajectory([0.5])
        out = refine(traj, RefineParams())
        assert len(out.poses) == 1
        assert out.poses[0].t[0] == 0.5

    def test_endpoints_always_kept(self):
        xs = [0.0, 0.0001, 0.0002, 0.0003]
        out = refine(line_trajectory(xs), RefineParams(min_gap=0.01, outlier_factor=3.0))
        assert out.poses[0].t[0] == 0.0
        assert out.poses[-1].t[0] == 0.0003

    def test_order_preserved_and_timestamps_filtered(self):
        xs = [0.0, 0.01, 0.0101, 0.02, 0.03]
        traj = Trajectory(
            frame_id="base",
            poses=[translation(x, 0.0, 0.0) for x in xs],
            timestamps=[0.0, 0.1, 0.2, 0.3, 0.4],
        )
        out = refine(traj, RefineParams(min_gap=0.005, outlier_factor=3.0))
        kept_x = [p.t[0] for p in out.poses]
        assert kept_x == sorted(kept_x)
        assert len(out.timestamps) == len(out.poses)
        assert np.allclose(out.timestamps, [0.0, 0.1, 0.3, 0.4])

    def test_param_validation(self):
        with pytest.raises(ValidationError):
            RefineParams(min_gap=-0.001)
        with pytest.raises(ValidationError):
            RefineParams(outlier_factor=1.0)


class TestDeltaIO:
    def test_from_dict_computes_delta(self):
        rng = np.random.default_rng(16)
        demo = random_pose(rng)
        exe = random_pose(rng)
        d = delta_from_dict(
            {"object": "mug", "t_demo": demo.to_dict(), "t_exe": exe.to_dict()}
        )
        expected = mat4(exe) @ np.linalg.inv(mat4(demo))
        assert d.name == "mug"
        assert np.allclose(mat4(d.delta), expected, atol=1e-12)

    def test_load_single_and_list(self, tmp_path):
        rng = np.random.default_rng(17)
        demo, exe = random_pose(rng), random_pose(rng)
        entry = {"object": "box", "t_demo": demo.to_dict(), "t_exe": exe.to_dict()}
        single = tmp_path / "one.json"
        single.write_text(__import__("json").dumps(entry))
        assert len(load_deltas(single)) == 1
        double = tmp_path / "two.json"
        double.write_text(__import__("json").dumps([entry, entry]))
        assert len(load_deltas(double)) == 2

    def test_malformed_rejected(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{\"object\": \"x\"}")
        with pytest.raises(ValidationError):
            load_deltas(bad)
