"""Per-episode minimization of the episodic objective.

Two solvers over flat parameter vectors: plain gradient descent (the map the
fixed-point backprop differentiates) and limited-memory BFGS with an Armijo
backtracking line search (the production solver). Both treat the objective
as a callable ``w -> (value, gradient)`` and are pure given their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .util import NonFiniteError, rng_from, sup_norm

LINE_SEARCH_FIXED = "fixed"
LINE_SEARCH_BACKTRACKING = "backtracking"

# Armijo sufficient-decrease constant and step shrink factor.
ARMIJO_C = 1e-4
ARMIJO_SHRINK = 0.5
MAX_BACKTRACKS = 60

DEFAULT_MAX_STEPS_LBFGS = 500
DEFAULT_MAX_STEPS_GD = 2000


@dataclass(frozen=True)
class SolverConfig:
    """``alpha`` is the gradient-descent step (ignored by L-BFGS, whose trial
    step is 1). ``max_steps=None`` picks the per-solver default (500 L-BFGS,
    2000 GD). ``grad_tol`` is a sup-norm threshold."""

    alpha: float | None = None
    max_steps: int | None = None
    grad_tol: float = 1e-6
    lbfgs_memory: int = 10
    line_search: str = LINE_SEARCH_BACKTRACKING

    def __post_init__(self):
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.grad_tol <= 0:
            raise ValueError("grad_tol must be positive")
        if self.line_search not in (LINE_SEARCH_FIXED, LINE_SEARCH_BACKTRACKING):
            raise ValueError(f"unknown line search {self.line_search!r}")


@dataclass
class SolveResult:
    w_star: np.ndarray
    iterations: int
    final_grad_norm: float
    converged: bool
    status: str = "converged"


def step_map_f(objective, w, alpha: float) -> np.ndarray:
    """One exact gradient-descent step: F(w) = w - alpha * grad(w)."""
    _, g = objective(w)
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("gradient is non-finite in step map")
    return w - alpha * g


def power_iteration_lambda_max(hvp, dim: int, iters: int = 20, seed: int = 0) -> float:
    """Largest-magnitude Hessian eigenvalue via power iteration on the HVP."""
    rng = rng_from(seed)
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    lam = 1.0
    for _ in range(iters):
        hv = hvp(v)
        norm = np.linalg.norm(hv)
        if norm == 0.0:
            return 0.0
        lam = float(v @ hv)
        v = hv / norm
    return abs(lam)


def estimate_gd_alpha(hvp, dim: int, safety: float = 0.5, iters: int = 20, seed: int = 0) -> float:
    """Contraction-safe step: safety / lambda_max_estimate.

    With alpha = 0.5/lambda_max the linearized step map has spectral radius
    below 1 regardless of episode conditioning.
    """
    lam = power_iteration_lambda_max(hvp, dim, iters=iters, seed=seed)
    if lam <= 0.0:
        return safety
    return safety / lam


def _armijo(objective, w, f, g, direction, t0: float):
    """Backtracking line search; returns (t, w_new, f_new, g_new) or None."""
    slope = float(g @ direction)
    if slope >= 0:
        return None
    t = t0
    for _ in range(MAX_BACKTRACKS):
        w_new = w + t * direction
        f_new, g_new = objective(w_new)
        if np.isfinite(f_new) and f_new <= f + ARMIJO_C * t * slope:
            return t, w_new, f_new, g_new
        t *= ARMIJO_SHRINK
    return None


def minimize_gd(objective, w0, cfg: SolverConfig) -> SolveResult:
    """Fixed-step (optionally backtracked) gradient descent to ``grad_tol``."""
    if cfg.alpha is None:
        raise ValueError("minimize_gd needs cfg.alpha (see estimate_gd_alpha)")
    max_steps = cfg.max_steps if cfg.max_steps is not None else DEFAULT_MAX_STEPS_GD
    w = np.array(w0, dtype=float)
    f, g = objective(w)
    for it in range(max_steps):
        gn = sup_norm(g)
        if gn <= cfg.grad_tol:
            return SolveResult(w, it, gn, True)
        if cfg.line_search == LINE_SEARCH_BACKTRACKING:
            hit = _armijo(objective, w, f, g, -g, cfg.alpha)
            if hit is None:
                return SolveResult(w, it, gn, False, status="line_search_failed")
            _, w, f, g = hit
        else:
            w = w - cfg.alpha * g
            f, g = objective(w)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("gradient became non-finite during descent")
    return SolveResult(w, max_steps, sup_norm(g), sup_norm(g) <= cfg.grad_tol,
                       status="max_steps")


def minimize_lbfgs(objective, w0, cfg: SolverConfig) -> SolveResult:
    """Two-loop-recursion L-BFGS with Armijo backtracking.

    Curvature pairs with non-positive s.y are skipped. Accepted steps never
    increase the objective.
    """
    max_steps = cfg.max_steps if cfg.max_steps is not None else DEFAULT_MAX_STEPS_LBFGS
    w = np.array(w0, dtype=float)
    f, g = objective(w)
    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    rho_hist: list[float] = []
    stall = 0

    for it in range(max_steps):
        gn = sup_norm(g)
        if gn <= cfg.grad_tol:
            return SolveResult(w, it, gn, True)

        q = g.copy()
        alphas = []
        for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
            a = rho * float(s @ q)
            q -= a * y
            alphas.append(a)
        if s_hist:
            s, y = s_hist[-1], y_hist[-1]
            q *= float(s @ y) / float(y @ y)
        for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
            b = rho * float(y @ q)
            q += s * (a - b)
        direction = -q

        if cfg.line_search == LINE_SEARCH_BACKTRACKING:
            hit = _armijo(objective, w, f, g, direction, 1.0)
            if hit is None:
                # Retry once along steepest descent before giving up.
                hit = _armijo(objective, w, f, g, -g, 1.0)
            if hit is None:
                return SolveResult(w, it, gn, False, status="line_search_failed")
            t, w_new, f_new, g_new = hit
        else:
            w_new = w + direction
            f_new, g_new = objective(w_new)
            if not np.isfinite(f_new):
                return SolveResult(w, it, gn, False, status="line_search_failed")

        s = w_new - w
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(y) + 1e-300):
            s_hist.append(s)
            y_hist.append(y)
            rho_hist.append(1.0 / sy)
            if len(s_hist) > cfg.lbfgs_memory:
                s_hist.pop(0)
                y_hist.pop(0)
                rho_hist.pop(0)
        # Stall guard: near the float floor the line search keeps accepting
        # decreases below machine resolution without the gradient improving.
        if f - f_new <= 4.0 * np.finfo(float).eps * (1.0 + abs(f)):
            stall += 1
            if stall >= 5:
                gn = sup_norm(g_new)
                return SolveResult(w_new, it + 1, gn, gn <= cfg.grad_tol,
                                   status="stalled")
        else:
            stall = 0
        w, f, g = w_new, f_new, g_new

    gn = sup_norm(g)
    return SolveResult(w, max_steps, gn, gn <= cfg.grad_tol, status="max_steps")


def minimize_newton(objective, hvp_at, w0, cfg: SolverConfig,
                    max_steps: int = 50) -> SolveResult:
    """Damped dense-Hessian Newton, for small strongly convex problems.

    Used by the finite-difference oracle, where thousands of warm-started
    re-solves must reach near machine precision quickly. The Hessian is built
    column-by-column from ``hvp_at(w, e_i)``.
    """
    w = np.array(w0, dtype=float)
    n = w.size
    f, g = objective(w)
    eye = np.eye(n)
    for it in range(max_steps):
        gn = sup_norm(g)
        if gn <= cfg.grad_tol:
            return SolveResult(w, it, gn, True)
        H = np.stack([hvp_at(w, eye[i]) for i in range(n)], axis=1)
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = g
        t = 1.0
        for _ in range(30):
            w_new = w + t * (-step)
            f_new, g_new = objective(w_new)
            if np.isfinite(f_new) and f_new <= f + 1e-12 * (1.0 + abs(f)):
                break
            t *= 0.5
        else:
            return SolveResult(w, it, gn, gn <= cfg.grad_tol, status="line_search_failed")
        if f - f_new <= 4.0 * np.finfo(float).eps * (1.0 + abs(f)):
            gn = sup_norm(g_new)
            return SolveResult(w_new, it + 1, gn, gn <= cfg.grad_tol, status="stalled")
        w, f, g = w_new, f_new, g_new
    gn = sup_norm(g)
    return SolveResult(w, max_steps, gn, gn <= cfg.grad_tol, status="max_steps")
