"""Tests for depth-aware hand translation refinement."""

import json

import numpy as np
import pytest

from retrace.errors import ValidationError
from retrace.hand_refine import (
    CameraIntrinsics,
    HandObservation,
    distance_cost,
    full_objective,
    load_hand_frame,
    make_objective,
    nearest_indices,
    project,
    refine_hand_translation,
    reprojection_cost,
    save_hand_frame,
)


def simple_camera():
    return CameraIntrinsics(fx=100.0, fy=100.0, cx=0.0, cy=0.0)


def synthetic_observation(seed, offset=(0.0, 0.0, 0.15)):
    """Depth-offset scene: the virtual camera magnification matches the real
    camera at the true depth, so the pixel anchors are consistent with the
    true translation while t_init carries the depth error."""
    rng = np.random.default_rng(seed)
    vertices = rng.uniform([-0.06, -0.04, -0.02], [0.06, 0.04, 0.02], size=(300, 3))
    t_gt = np.concatenate([rng.uniform(-0.03, 0.03, 2), [0.55 + rng.uniform(-0.03, 0.03)]])
    cloud = rng.permutation(vertices) + t_gt
    t_init = t_gt + np.asarray(offset, dtype=float)
    k_real = CameraIntrinsics(525.0, 525.0, 319.5, 239.5)
    scale = t_init[2] / t_gt[2]
    k_virtual = CameraIntrinsics(525.0 * scale, 525.0 * scale, 319.5, 239.5)
    obs = HandObservation(
        vertices=vertices,
        t_init=t_init,
        k_virtual=k_virtual,
        k_real=k_real,
        hand_cloud=cloud,
    )
    return obs, t_gt


def grid_search_oracle(obs, lam):
    """Coarse 1 mm sweep along depth, then a 0.5 mm box around the best depth."""
    t0 = obs.t_init
    zs = t0[2] + np.arange(-0.17, 0.005, 0.001)
    vals = [full_objective(obs, lam, np.array([t0[0], t0[1], z])) for z in zs]
    z_best = zs[int(np.argmin(vals))]
    steps = np.arange(-0.004, 0.0045, 0.0005)
    best_val, best_t = np.inf, None
    for dx in steps:
        for dy in steps:
            for dz in steps:
                t = np.array([t0[0] + dx, t0[1] + dy, z_best + dz])
                v = full_objective(obs, lam, t)
                if v < best_val:
                    best_val, best_t = v, t
    return best_t


class TestProject:
    def test_pinhole(self):
        uv = project(simple_camera(), np.array([0.1, 0.2, 1.0]))
        assert np.allclose(uv, [10.0, 20.0])

    def test_depth_scaling(self):
        uv = project(simple_camera(), np.array([0.1, 0.2, 2.0]))
        assert np.allclose(uv, [5.0, 10.0])

    def test_principal_point(self):
        k = CameraIntrinsics(fx=400.0, fy=420.0, cx=320.0, cy=240.0)
        for z in (0.1, 1.0, 7.5):
            assert np.allclose(project(k, np.array([0.0, 0.0, z])), [320.0, 240.0])

    def test_nonpositive_depth_rejected(self):
        with pytest.raises(ValueError):
            project(simple_camera(), np.array([0.1, 0.2, 0.0]))
        with pytest.raises(ValueError):
            project(simple_camera(), np.array([0.1, 0.2, -1.0]))


class TestDistanceCost:
    def test_exact_match_is_zero(self):
        rng = np.random.default_rng(3)
        vertices = rng.normal(size=(25, 3))
        t = np.array([0.3, -0.1, 0.9])
        cloud = rng.permutation(vertices + t)
        assert distance_cost(vertices, t, cloud) == pytest.approx(0.0, abs=1e-12)

    def test_single_pair_offset(self):
        v = np.array([[0.2, 0.0, 0.5]])
        t = np.array([0.1, 0.1, 0.1])
        d = np.array([0.03, -0.04, 0.12])
        cloud = v + t + d
        assert distance_cost(v, t, cloud) == pytest.approx(np.linalg.norm(d), rel=1e-12)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(11)
        vertices = rng.normal(size=(40, 3))
        cloud = rng.normal(size=(60, 3))
        t = rng.normal(size=3)
        # independent O(N*M) double loop
        expected = 0.0
        for v in vertices:
            expected += min(np.linalg.norm(v + t - p) for p in cloud)
        assert distance_cost(vertices, t, cloud) == pytest.approx(expected, rel=1e-12)

    def test_nonnegative_and_positive_off_match(self):
        rng = np.random.default_rng(5)
        vertices = rng.normal(size=(10, 3))
        t = np.zeros(3)
        cloud = vertices.copy()
        cloud[0] += 0.05
        val = distance_cost(vertices, t, cloud)
        assert val > 0.0

    def test_nearest_indices_agree_with_loop(self):
        rng = np.random.default_rng(17)
        pts = rng.normal(size=(30, 3))
        cloud = rng.normal(size=(45, 3))
        idx = nearest_indices(pts, cloud)
        for i, p in enumerate(pts):
            j = int(np.argmin(np.linalg.norm(cloud - p, axis=1)))
            assert idx[i] == j


class TestReprojectionCost:
    def test_identical_cameras_at_init(self):
        rng = np.random.default_rng(2)
        vertices = rng.uniform(-0.05, 0.05, size=(20, 3))
        t = np.array([0.0, 0.0, 0.6])
        k = simple_camera()
        assert reprojection_cost(vertices, t, k, t, k) == pytest.approx(0.0, abs=1e-18)

    def test_one_pixel_discrepancy(self):
        k = simple_camera()
        v = np.zeros((1, 3))
        t_init = np.array([0.0, 0.0, 1.0])
        # fx*dx/z = 1 px at z = 1
        t = np.array([0.01, 0.0, 1.0])
        assert reprojection_cost(v, t_init, k, t, k) == pytest.approx(1.0, rel=1e-12)

    def test_matches_per_vertex_oracle(self):
        rng = np.random.default_rng(21)
        vertices = rng.uniform(-0.05, 0.05, size=(35, 3))
        t_init = np.array([0.02, -0.01, 0.7])
        t = t_init + rng.uniform(-0.02, 0.02, size=3)
        kv = CameraIntrinsics(610.0, 590.0, 310.0, 250.0)
        kr = CameraIntrinsics(525.0, 525.0, 319.5, 239.5)
        expected = 0.0
        for v in vertices:
            a = project(kv, v + t_init)
            b = project(kr, v + t)
            expected += float(np.sum((a - b) ** 2))
        got = reprojection_cost(vertices, t_init, kv, t, kr)
        assert got == pytest.approx(expected, abs=1e-10)

    def test_nonpositive_depth_rejected(self):
        k = simple_camera()
        v = np.zeros((1, 3))
        with pytest.raises(ValueError):
            reprojection_cost(v, np.array([0.0, 0.0, 1.0]), k, np.array([0.0, 0.0, -0.5]), k)


class TestRefine:
    def test_already_aligned_is_fixed_point(self):
        rng = np.random.default_rng(9)
        vertices = rng.uniform(-0.05, 0.05, size=(50, 3))
        t_gt = np.array([0.01, -0.02, 0.6])
        k = CameraIntrinsics(525.0, 525.0, 319.5, 239.5)
        obs = HandObservation(vertices, t_gt, k, k, rng.permutation(vertices) + t_gt)
        t_star = refine_hand_translation(obs, 1.0)
        assert np.array_equal(t_star, t_gt)

    def test_lambda_zero_returns_init(self):
        rng = np.random.default_rng(13)
        vertices = rng.uniform(-0.05, 0.05, size=(40, 3))
        t_init = np.array([0.0, 0.01, 0.65])
        k = CameraIntrinsics(525.0, 525.0, 319.5, 239.5)
        # cloud deliberately offset; with lambda = 0 only reprojection matters
        cloud = vertices + t_init + np.array([0.02, 0.0, -0.05])
        obs = HandObservation(vertices, t_init, k, k, cloud)
        t_star = refine_hand_translation(obs, 0.0)
        assert np.array_equal(t_star, t_init)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_depth_offset_recovered(self, seed):
        obs, t_gt = synthetic_observation(seed)
        t_star = refine_hand_translation(obs, 1.0)
        assert np.linalg.norm(t_star - t_gt) <= 2e-3
        t_oracle = grid_search_oracle(obs, 1.0)
        assert np.linalg.norm(t_star - t_oracle) <= 2e-3
        assert full_objective(obs, 1.0, t_star) <= full_objective(obs, 1.0, obs.t_init)

    def test_translation_equivariance(self):
        rng = np.random.default_rng(31)
        vertices = rng.uniform(-0.05, 0.05, size=(60, 3))
        t_init = np.array([0.01, 0.0, 0.7])
        k = CameraIntrinsics(525.0, 525.0, 319.5, 239.5)
        cloud = rng.permutation(vertices) + t_init + np.array([0.01, -0.008, 0.03])
        obs = HandObservation(vertices, t_init, k, k, cloud)
        t_star = refine_hand_translation(obs, 1.0)

        d = np.array([0.004, -0.006, 0.008])
        shifted = HandObservation(vertices, t_init + d, k, k, cloud + d)
        t_shifted = refine_hand_translation(shifted, 1.0)
        assert np.linalg.norm(t_shifted - (t_star + d)) <= 2e-4

    def test_never_worse_than_init(self):
        rng = np.random.default_rng(41)
        vertices = rng.uniform(-0.05, 0.05, size=(30, 3))
        t_init = np.array([-0.02, 0.03, 0.8])
        kv = CameraIntrinsics(600.0, 600.0, 320.0, 240.0)
        kr = CameraIntrinsics(525.0, 525.0, 319.5, 239.5)
        cloud = rng.permutation(vertices) + t_init + rng.uniform(-0.03, 0.03, size=3)
        obs = HandObservation(vertices, t_init, kv, kr, cloud)
        t_star = refine_hand_translation(obs, 0.7)
        assert full_objective(obs, 0.7, t_star) <= full_objective(obs, 0.7, t_init) + 1e-12

    def test_negative_lambda_rejected(self):
        obs, _ = synthetic_observation(0)
        with pytest.raises(ValueError):
            refine_hand_translation(obs, -0.5)


class TestFrozenGradient:
    def test_matches_finite_differences(self):
        obs, _ = synthetic_observation(4)
        rng = np.random.default_rng(77)
        nn = nearest_indices(obs.vertices + obs.t_init, obs.hand_cloud)
        f_and_g = make_objective(obs, 1.0, nn)
        for _ in range(5):
            t = obs.t_init + rng.uniform(-0.02, 0.02, size=3)
            _, grad = f_and_g(t)
            fd = np.zeros(3)
            h = 1e-6
            for i in range(3):
                e = np.zeros(3)
                e[i] = h
                fp, _ = f_and_g(t + e)
                fm, _ = f_and_g(t - e)
                fd[i] = (fp - fm) / (2.0 * h)
            rel = np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-12)
            assert rel <= 1e-4


class TestValidationAndIO:
    def test_too_few_vertices(self):
        k = simple_camera()
        with pytest.raises(ValidationError):
            HandObservation(np.zeros((3, 3)), np.array([0.0, 0.0, 1.0]), k, k, np.zeros((5, 3)))

    def test_empty_cloud(self):
        k = simple_camera()
        with pytest.raises(ValidationError):
            HandObservation(np.zeros((5, 3)), np.array([0.0, 0.0, 1.0]), k, k, np.zeros((0, 3)))

    def test_nonfinite_rejected(self):
        k = simple_camera()
        verts = np.zeros((5, 3))
        verts[2, 1] = np.nan
        with pytest.raises(ValidationError):
            HandObservation(verts, np.array([0.0, 0.0, 1.0]), k, k, np.zeros((5, 3)))

    def test_bad_intrinsics(self):
        with pytest.raises(ValidationError):
            CameraIntrinsics(fx=0.0, fy=100.0, cx=0.0, cy=0.0)
        with pytest.raises(ValidationError):
            CameraIntrinsics(fx=100.0, fy=-5.0, cx=0.0, cy=0.0)

    def test_frame_roundtrip(self, tmp_path):
        obs, _ = synthetic_observation(6)
        path = tmp_path / "frame.json"
        save_hand_frame(obs, path)
        loaded = load_hand_frame(path)
        assert np.array_equal(loaded.vertices, obs.vertices)
        assert np.array_equal(loaded.t_init, obs.t_init)
        assert np.array_equal(loaded.hand_cloud, obs.hand_cloud)
        assert loaded.k_virtual.fx == obs.k_virtual.fx
        assert loaded.k_real.cy == obs.k_real.cy

    def test_malformed_frame_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"vertices": [[0, 0, 0]]}))
        with pytest.raises(ValidationError):
            load_hand_frame(path)
