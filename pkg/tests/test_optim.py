from __future__ import annotations

import numpy as np
import pytest

from retrace.errors import SolverError
from retrace.optim import (
    NlpProblem,
    adam_minimize,
    finite_difference_gradient,
    solve_nlp,
)


def _quadratic(center: np.ndarray):
    def fun(x: np.ndarray):
        r = x - center
        return float(r @ r), 2.0 * r

    return fun


def _rosenbrock(x: np.ndarray):
    a, b = x
    f = (1.0 - a) ** 2 + 100.0 * (b - a * a) ** 2
    g = np.array([-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)])
    return float(f), g


class TestAdam:
    def test_strongly_convex_converges(self):
        center = np.array([1.3, -0.7, 2.1])
        for x0 in (np.zeros(3), np.array([5.0, 5.0, -5.0]), np.array([-2.0, 0.3, 9.0])):
            x = adam_minimize(_quadratic(center), x0, step=0.05, iters=2000)
            assert np.linalg.norm(x - center) < 1e-6

    def test_zero_gradient_stays_put(self):
        center = np.array([0.4, -0.2])
        x = adam_minimize(_quadratic(center), center.copy(), step=0.1, iters=50)
        assert np.linalg.norm(x - center) < 1e-12

    def test_rosenbrock_pinned_reference_run(self):
        # Reference run recorded once: f(x*) = 1.97e-31, x* = (1, 1) to
        # machine precision at step 1e-3, 20000 iterations.
        x = adam_minimize(_rosenbrock, np.array([-1.2, 1.0]), step=1e-3, iters=20000)
        f, _ = _rosenbrock(x)
        assert f < 1e-3
        assert f < 1e-12
        np.testing.assert_allclose(x, [1.0, 1.0], atol=1e-9)

    def test_never_worse_than_start(self):
        # A grossly oversized step cannot make the result worse than x0.
        center = np.zeros(2)
        x0 = np.array([0.01, -0.02])
        x = adam_minimize(_quadratic(center), x0, step=10.0, iters=50)
        assert _quadratic(center)(x)[0] <= _quadratic(center)(x0)[0]

    def test_non_finite_objective_raises(self):
        def bad(x):
            return float("nan"), np.zeros_like(x)

        with pytest.raises(SolverError):
            adam_minimize(bad, np.zeros(2), step=0.1, iters=10)

    def test_rejects_zero_iters(self):
        with pytest.raises(ValueError):
            adam_minimize(_quadratic(np.zeros(1)), np.zeros(1), iters=0)

    def test_projection_hook_applied(self):
        center = np.array([5.0])
        x = adam_minimize(
            _quadratic(center),
            np.array([0.0]),
            step=0.1,
            iters=500,
            project=lambda z: np.clip(z, -1.0, 1.0),
        )
        assert x[0] <= 1.0 + 1e-15

    def test_callback_sees_every_iteration(self):
        seen = []
        adam_minimize(
            _quadratic(np.ones(2)),
            np.zeros(2),
            step=0.05,
            iters=25,
            callback=lambda t, x, f: seen.append((t, f)),
        )
        assert [t for t, _ in seen] == list(range(1, 26))


class TestFiniteDifferenceGradient:
    def test_linear_exact_for_any_h(self):
        a = np.array([2.0, -3.0, 0.5])
        f = lambda x: float(a @ x)
        for h in (1e-2, 1e-4, 1e-6):
            np.testing.assert_allclose(finite_difference_gradient(f, np.ones(3), h), a, atol=1e-9)

    def test_quadratic_near_exact(self):
        f = lambda x: float(x @ x)
        x = np.array([0.3, -1.2])
        np.testing.assert_allclose(finite_difference_gradient(f, x, 1e-5), 2 * x, atol=1e-9)

    def test_richardson_halving_reduces_error_fourfold(self):
        f = lambda x: float(np.exp(x[0]) * np.sin(x[1]))
        x = np.array([0.3, 0.7])
        exact = np.array([np.exp(0.3) * np.sin(0.7), np.exp(0.3) * np.cos(0.7)])
        err = {
            h: np.linalg.norm(finite_difference_gradient(f, x, h) - exact)
            for h in (1e-3, 5e-4)
        }
        ratio = err[1e-3] / err[5e-4]
        assert 3.0 < ratio < 5.0

    def test_rejects_nonpositive_h(self):
        with pytest.raises(ValueError):
            finite_difference_gradient(lambda x: 0.0, np.zeros(1), 0.0)


def _kkt_problem():
    rng = np.random.default_rng(0)
    mat = rng.normal(size=(2, 4))
    rhs = rng.normal(size=2)
    problem = NlpProblem(
        dim=4,
        objective=lambda x: (float(x @ x), 2.0 * x),
        lower=-10.0,
        upper=10.0,
        equalities=[lambda x: (mat @ x - rhs, lambda w: mat.T @ w)],
    )
    x_star = mat.T @ np.linalg.solve(mat @ mat.T, rhs)
    return problem, x_star


class TestSolveNlp:
    def test_active_upper_bound(self):
        problem = NlpProblem(
            dim=1,
            objective=lambda x: (float((x[0] - 2.0) ** 2), np.array([2.0 * (x[0] - 2.0)])),
            lower=-5.0,
            upper=1.0,
        )
        report = solve_nlp(problem, np.array([0.0]))
        assert abs(report.solution[0] - 1.0) < 1e-12
        assert report.max_bound_violation == 0.0
        assert report.converged

    def test_interior_quadratic(self):
        problem = NlpProblem(
            dim=1,
            objective=lambda x: (float((x[0] - 0.5) ** 2), np.array([2.0 * (x[0] - 0.5)])),
            lower=0.0,
            upper=1.0,
        )
        report = solve_nlp(problem, np.array([0.9]))
        assert abs(report.solution[0] - 0.5) < 1e-8

    def test_matches_kkt_oracle(self):
        problem, x_star = _kkt_problem()
        report = solve_nlp(problem, np.zeros(4))
        assert report.converged
        assert np.linalg.norm(report.solution - x_star) < 1e-6
        assert report.max_equality_residual <= problem.tolerance

    def test_every_query_point_within_bounds(self):
        lower, upper = -0.5, 0.75
        worst = 0.0

        def watched(x):
            nonlocal worst
            worst = max(worst, float(np.max(lower - x)), float(np.max(x - upper)))
            r = x - 2.0
            return float(r @ r), 2.0 * r

        problem = NlpProblem(dim=3, objective=watched, lower=lower, upper=upper)
        report = solve_nlp(problem, np.zeros(3))
        assert worst <= 0.0
        assert report.max_bound_violation == 0.0

    def test_bit_deterministic(self):
        problem, _ = _kkt_problem()
        first = solve_nlp(problem, np.zeros(4))
        second = solve_nlp(problem, np.zeros(4))
        np.testing.assert_array_equal(first.solution, second.solution)
        assert first.objective_value == second.objective_value

    def test_budget_exhaustion_returns_best_iterate_unconverged(self):
        problem, _ = _kkt_problem()
        problem.max_iterations = 1
        report = solve_nlp(problem, np.zeros(4), inner_maxiter=3)
        assert not report.converged
        assert np.all(np.isfinite(report.solution))

    def test_augmented_objective_monotone_within_each_outer_iteration(self):
        problem, _ = _kkt_problem()
        report = solve_nlp(problem, np.full(4, 5.0))
        assert len(report.history) >= 2
        for entry in report.history:
            assert entry["augmented_end"] <= entry["augmented_start"] + 1e-12

    def test_residual_below_tolerance_when_converged(self):
        problem, _ = _kkt_problem()
        report = solve_nlp(problem, np.zeros(4))
        if report.converged:
            assert report.max_equality_residual <= problem.tolerance

    def test_non_finite_raises(self):
        problem = NlpProblem(
            dim=1,
            objective=lambda x: (float("inf"), np.array([1.0])),
            lower=-1.0,
            upper=1.0,
        )
        with pytest.raises(SolverError):
            solve_nlp(problem, np.array([0.0]))

    def test_dynamics_style_equalities_reach_tight_residual(self):
        # Miniature of the trajectory problem: chained positions and
        # velocities with pinned endpoint velocities via equal bounds.
        rng = np.random.default_rng(1)
        steps, n, dt = 20, 2, 0.1
        ref = np.cumsum(rng.normal(scale=0.05, size=(steps + 1, n)), axis=0)
        dim = 2 * (steps + 1) * n
        split = (steps + 1) * n

        def objective(z):
            q = z[:split].reshape(steps + 1, n)
            qd = z[split:].reshape(steps + 1, n)
            r = q - ref
            f = float(np.sum(r * r)) + 0.01 * float(np.sum(qd * qd))
            return f, np.concatenate([(2.0 * r).ravel(), (0.02 * qd).ravel()])

        def dynamics(z):
            q = z[:split].reshape(steps + 1, n)
            qd = z[split:].reshape(steps + 1, n)
            c = (q[1:] - q[:-1] - dt * qd[:-1]).ravel()

            def pullback(w):
                mat = w.reshape(steps, n)
                gq = np.zeros((steps + 1, n))
                gqd = np.zeros((steps + 1, n))
                gq[1:] += mat
                gq[:-1] -= mat
                gqd[:-1] -= dt * mat
                return np.concatenate([gq.ravel(), gqd.ravel()])

            return c, pullback

        lower = np.full(dim, -50.0)
        upper = np.full(dim, 50.0)
        for sl in (slice(split, split + n), slice(dim - n, dim)):
            lower[sl] = 0.0
            upper[sl] = 0.0
        problem = NlpProblem(dim=dim, objective=objective, lower=lower, upper=upper, equalities=[dynamics])
        report = solve_nlp(problem, np.zeros(dim), inner_maxiter=4000)
        assert report.converged
        assert report.max_equality_residual <= 1e-8
        qd = report.solution[split:].reshape(steps + 1, n)
        np.testing.assert_array_equal(qd[0], np.zeros(n))
        np.testing.assert_array_equal(qd[-1], np.zeros(n))


class TestNlpProblemValidation:
    def test_rejects_crossed_bounds(self):
        with pytest.raises(ValueError):
            NlpProblem(dim=2, objective=lambda x: (0.0, np.zeros(2)), lower=1.0, upper=-1.0)

    def test_rejects_nonpositive_tolerance(self):
        with pytest.raises(ValueError):
            NlpProblem(
                dim=1, objective=lambda x: (0.0, np.zeros(1)), lower=0.0, upper=1.0, tolerance=0.0
            )

    def test_rejects_zero_outer_budget(self):
        with pytest.raises(ValueError):
            NlpProblem(
                dim=1,
                objective=lambda x: (0.0, np.zeros(1)),
                lower=0.0,
                upper=1.0,
                max_iterations=0,
            )
