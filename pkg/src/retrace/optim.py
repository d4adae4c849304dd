"""Shared solver core: Adam, a box/equality NLP solver, and a gradient checker.

``solve_nlp`` is an augmented-Lagrangian outer loop around a projected
spectral-gradient inner minimizer (Barzilai-Borwein steps with a non-monotone
line search).  Box bounds are enforced exactly by projection at every step;
equality constraints are driven below ``NlpProblem.tolerance`` by multiplier
updates and penalty growth.  Everything here is deterministic: identical
inputs produce bit-identical iterates.

Equality constraints are callables ``c(x) -> (residual, pullback)`` where
``pullback(w)`` returns ``J(x).T @ w``; representing the Jacobian by its
transpose action keeps large, structured constraints (e.g. trajectory
dynamics) cheap.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from retrace.errors import SolverError

# Spectral step safeguards for the projected inner minimizer.
SPECTRAL_STEP_MIN = 1e-12
SPECTRAL_STEP_MAX = 1e12

# Sufficient-decrease parameter for the non-monotone line search.
LINE_SEARCH_GAMMA = 1e-4

# Inner stopping tolerance on relative objective decrease.
INNER_DECREASE_TOL = 1e-15

ObjectiveWithGrad = Callable[[np.ndarray], tuple[float, np.ndarray]]
EqualityConstraint = Callable[[np.ndarray], tuple[np.ndarray, Callable[[np.ndarray], np.ndarray]]]


def _check_finite(f: float, g: np.ndarray) -> None:
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise SolverError("objective or gradient became non-finite")


def adam_minimize(
    objective_with_grad: ObjectiveWithGrad,
    x0: np.ndarray,
    step: float = 1e-2,
    iters: int = 1000,
    *,
    beta1: float = 0.9,
    beta2: float = 0.999,
    epsilon: float = 1e-8,
    step_decay: float = 1.0,
    project: Callable[[np.ndarray], np.ndarray] | None = None,
    callback: Callable[[int, np.ndarray, float], None] | None = None,
) -> np.ndarray:
    """Adam with bias correction; returns the best iterate seen.

    ``step_decay`` multiplies the step size every iteration (1.0 keeps it
    constant); a mild decay lets runs settle well below the base step size.
    ``project`` is applied after each update, e.g. to renormalize a
    quaternion block.  The returned point never has a larger objective than
    ``x0``.
    """
    if iters < 1:
        raise ValueError(f"iteration count must be >= 1, got {iters}")
    x = np.asarray(x0, dtype=float).copy()
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    best_x = x.copy()
    best_f = np.inf
    current_step = float(step)
    for t in range(1, iters + 1):
        f, g = objective_with_grad(x)
        _check_finite(f, g)
        if f < best_f:
            best_f = f
            best_x = x.copy()
        if callback is not None:
            callback(t, x, f)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        x = x - current_step * m_hat / (np.sqrt(v_hat) + epsilon)
        if project is not None:
            x = project(x)
        current_step *= step_decay
    f, g = objective_with_grad(x)
    _check_finite(f, g)
    if f < best_f:
        best_x = x
    return best_x


def finite_difference_gradient(
    f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6
) -> np.ndarray:
    """Central-difference gradient (f(x+h*e_i) - f(x-h*e_i)) / (2h)."""
    if h <= 0.0:
        raise ValueError(f"step size must be positive, got {h}")
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        grad[i] = (f(x + e) - f(x - e)) / (2.0 * h)
    return grad


@dataclass
class NlpProblem:
    """Box- and equality-constrained minimization problem."""

    dim: int
    objective: ObjectiveWithGrad
    lower: np.ndarray
    upper: np.ndarray
    equalities: Sequence[EqualityConstraint] = ()
    tolerance: float = 1e-8
    max_iterations: int = 100
    gradient_tolerance: float = 1e-10

    def __post_init__(self) -> None:
        self.lower = np.broadcast_to(np.asarray(self.lower, dtype=float), (self.dim,)).copy()
        self.upper = np.broadcast_to(np.asarray(self.upper, dtype=float), (self.dim,)).copy()
        if np.any(self.lower > self.upper):
            raise ValueError("bounds must satisfy lower <= upper elementwise")
        if not self.tolerance > 0.0:
            raise ValueError(f"tolerance must be positive, got {self.tolerance}")
        if self.max_iterations < 1:
            raise ValueError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if not self.gradient_tolerance > 0.0:
            raise ValueError(
                f"gradient tolerance must be positive, got {self.gradient_tolerance}"
            )


@dataclass
class SolveReport:
    """Outcome of a constrained solve."""

    solution: np.ndarray
    objective_value: float
    iterations: int
    max_bound_violation: float
    max_equality_residual: float
    converged: bool
    history: list[dict] = field(default_factory=list)


def _spg_minimize(
    fun_grad: ObjectiveWithGrad,
    x0: np.ndarray,
    lower: np.ndarray,
    upper: np.ndarray,
    maxiter: int,
    gtol: float = 1e-10,
    memory: int = 10,
) -> tuple[np.ndarray, float, int]:
    """Projected Barzilai-Borwein descent with a non-monotone line search.

    Returns (best iterate, its objective, iterations used).  The best iterate
    is tracked separately so the result is never worse than the start even
    though the line search itself is non-monotone.
    """
    x = np.clip(x0, lower, upper)
    f, g = fun_grad(x)
    _check_finite(f, g)
    best_x, best_f = x.copy(), f
    recent = deque([f], maxlen=memory)
    alpha = 1.0 / max(1.0, float(np.linalg.norm(g, np.inf)))
    stall = 0
    iterations = 0
    for iterations in range(1, maxiter + 1):
        stationarity = float(np.linalg.norm(x - np.clip(x - g, lower, upper), np.inf))
        if stationarity <= gtol:
            break
        alpha = min(SPECTRAL_STEP_MAX, max(SPECTRAL_STEP_MIN, alpha))
        d = np.clip(x - alpha * g, lower, upper) - x
        gtd = float(g @ d)
        if gtd >= 0.0:
            # Projected arc is not a descent direction at this step length;
            # a plain projected-gradient step always is.
            alpha = 1.0 / max(1.0, float(np.linalg.norm(g, np.inf)))
            d = np.clip(x - alpha * g, lower, upper) - x
            gtd = float(g @ d)
            if gtd >= 0.0:
                break
        f_ref = max(recent)
        lam = 1.0
        while True:
            x_new = x + lam * d
            f_new, g_new = fun_grad(x_new)
            _check_finite(f_new, g_new)
            if f_new <= f_ref + LINE_SEARCH_GAMMA * lam * gtd or lam <= 1e-10:
                break
            lam *= 0.5
        s = x_new - x
        y = g_new - g
        sty = float(s @ y)
        alpha = float(s @ s) / sty if sty > 1e-300 else SPECTRAL_STEP_MAX
        if abs(f - f_new) <= INNER_DECREASE_TOL * max(1.0, abs(f)):
            stall += 1
        else:
            stall = 0
        x, f, g = x_new, f_new, g_new
        recent.append(f)
        if f < best_f:
            best_f = f
            best_x = x.copy()
        if stall >= 5:
            break
    return best_x, best_f, iterations


def _max_abs(values: list[np.ndarray]) -> float:
    if not values:
        return 0.0
    return max(float(np.max(np.abs(v))) if v.size else 0.0 for v in values)


def solve_nlp(
    problem: NlpProblem,
    x0: np.ndarray,
    *,
    inner_maxiter: int = 2000,
    penalty_init: float = 10.0,
    penalty_growth: float = 10.0,
    penalty_max: float = 1e12,
    outer_callback: Callable[[int, np.ndarray], None] | None = None,
    outer_stop: Callable[[int, np.ndarray], bool] | None = None,
) -> SolveReport:
    """Minimize under box bounds and equality constraints.

    Bounds hold exactly at every iterate.  With equality constraints the
    outer loop updates multipliers when the residual shrinks enough and
    grows the penalty otherwise, until the residual is below
    ``problem.tolerance`` or the outer budget runs out.  ``outer_callback``
    receives (outer_index, iterate) after every outer iteration; callers use
    it to track their own best iterate under a different merit.
    ``outer_stop`` is polled after every outer iteration and ends the loop
    early when it returns True, for callers that maintain their own
    feasibility restoration and can tell when extra outers stop paying.
    """
    x = np.clip(np.asarray(x0, dtype=float), problem.lower, problem.upper)
    if x.shape != (problem.dim,):
        raise ValueError(f"x0 must have shape ({problem.dim},), got {x.shape}")
    equalities = list(problem.equalities)
    history: list[dict] = []

    if not equalities:
        solution, f_best, iterations = _spg_minimize(
            problem.objective,
            x,
            problem.lower,
            problem.upper,
            maxiter=inner_maxiter,
            gtol=problem.gradient_tolerance,
        )
        solution = np.clip(solution, problem.lower, problem.upper)
        if outer_callback is not None:
            outer_callback(0, solution)
        history.append({"outer": 0, "objective": f_best, "residual": 0.0, "inner_iterations": iterations})
        return SolveReport(
            solution=solution,
            objective_value=f_best,
            iterations=iterations,
            max_bound_violation=_bound_violation(solution, problem),
            max_equality_residual=0.0,
            converged=True,
            history=history,
        )

    multipliers: list[np.ndarray] | None = None
    mu = penalty_init
    prev_residual = np.inf
    total_inner = 0
    converged = False

    for outer in range(1, problem.max_iterations + 1):
        lam = multipliers

        def augmented(z: np.ndarray) -> tuple[float, np.ndarray]:
            f, g = problem.objective(z)
            g = g.copy()
            for k, eq in enumerate(equalities):
                c, pullback = eq(z)
                lam_k = lam[k] if lam is not None else np.zeros_like(c)
                f += float(lam_k @ c) + 0.5 * mu * float(c @ c)
                g += pullback(lam_k + mu * c)
            return f, g

        al_start = augmented(x)[0]
        x, al_end, inner_iters = _spg_minimize(
            augmented,
            x,
            problem.lower,
            problem.upper,
            maxiter=inner_maxiter,
            gtol=problem.gradient_tolerance,
        )
        total_inner += inner_iters
        if outer_callback is not None:
            outer_callback(outer, x)
        residuals = [eq(x)[0] for eq in equalities]
        residual = _max_abs(residuals)
        f_true = problem.objective(x)[0]
        history.append(
            {
                "outer": outer,
                "objective": f_true,
                "augmented_start": al_start,
                "augmented_end": al_end,
                "residual": residual,
                "penalty": mu,
                "inner_iterations": inner_iters,
            }
        )
        if residual <= problem.tolerance:
            converged = True
            break
        if outer_stop is not None and outer_stop(outer, x):
            break
        if multipliers is None:
            multipliers = [mu * c for c in residuals]
        elif residual <= 0.5 * prev_residual:
            multipliers = [lam_k + mu * c for lam_k, c in zip(multipliers, residuals)]
        else:
            mu = min(mu * penalty_growth, penalty_max)
            multipliers = [lam_k + mu * c for lam_k, c in zip(multipliers, residuals)]
        prev_residual = min(prev_residual, residual)

    solution = np.clip(x, problem.lower, problem.upper)
    final_residual = _max_abs([eq(solution)[0] for eq in equalities])
    return SolveReport(
        solution=solution,
        objective_value=problem.objective(solution)[0],
        iterations=total_inner,
        max_bound_violation=_bound_violation(solution, problem),
        max_equality_residual=final_residual,
        converged=converged and final_residual <= problem.tolerance,
        history=history,
    )


def _bound_violation(x: np.ndarray, problem: NlpProblem) -> float:
    below = np.maximum(problem.lower - x, 0.0)
    above = np.maximum(x - problem.upper, 0.0)
    return float(max(below.max(initial=0.0), above.max(initial=0.0)))
