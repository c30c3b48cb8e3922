"""Hypergradients of the query loss with respect to the meta parameters.

Once the episodic objective is solved, the optimum is a fixed point of the
gradient-descent map F(w) = w - alpha * grad(w). Differentiating through that
fixed point gives

    d(query)/d(theta) = g^T dF/dtheta,   g = (I - J^T)^{-1} v,

with J the Jacobian of F at the optimum (J = I - alpha H, symmetric here) and
v the query-loss gradient in fast-weight space. The inverse is applied with a
truncated, optionally damped Neumann series

    g = sum_n (J^T - eps I)^n v,

so only Hessian-vector products are needed, never an unrolled solver trace.
The damping eps trades a one-sided bias (scalar factor (1-j)/(1-j+eps)) for
numerical stability and is not corrected afterwards.

Because the fixed point is solver-independent for convex episodes, the inner
loop can be solved by L-BFGS (or anything else) while the backward pass still
differentiates the plain GD map.

A truncated-unroll gradient (differentiating T explicit GD steps) and a
central-difference oracle are provided for comparison and verification.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .attractor import MetaParams
from .embeddings import Episode
from .classifier import BaseClassifier
from .inner_solver import SolverConfig, SolveResult, estimate_gd_alpha
from .objective import EpisodeObjective, ModelConfig, solve_episode
from .util import NonFiniteError, sup_norm


@dataclass(frozen=True)
class RBPConfig:
    """Damped Neumann settings. ``convergence_tol`` (sup-norm of the series
    increment) stops early when set; otherwise all steps run."""

    epsilon: float = 0.1
    neumann_steps: int = 20
    convergence_tol: float | None = None

    def __post_init__(self):
        if not (0.0 <= self.epsilon < 1.0):
            raise ValueError("epsilon must lie in [0, 1)")
        if self.neumann_steps < 1:
            raise ValueError("neumann_steps must be >= 1")


@dataclass
class HyperGradient:
    """Flat meta-space gradient plus series diagnostics."""

    grad: np.ndarray
    step_norms: np.ndarray
    query_loss: float | None = None
    alpha: float | None = None
    solve: SolveResult | None = None

    @property
    def neumann_residual(self) -> float:
        return float(self.step_norms[-1])


def vjp_step_map(w_star, hvp, alpha: float, v) -> np.ndarray:
    """J^T v for the GD map at a fixed point: v - alpha * H v."""
    return v - alpha * hvp(w_star, v)


def neumann_rbp(v, vjp, cfg: RBPConfig):
    """Accumulate g = sum_{n=0..steps} (J^T - eps I)^n v.

    ``vjp`` applies J^T. Returns (g, increment sup-norms, one per term
    starting with v itself). Raises on non-finite intermediates, reporting
    the step index.
    """
    v = np.asarray(v, dtype=float)
    g = v.copy()
    cur = v
    norms = [sup_norm(v)]
    for n in range(1, cfg.neumann_steps + 1):
        cur = vjp(cur) - cfg.epsilon * cur
        if not np.all(np.isfinite(cur)):
            raise NonFiniteError(f"Neumann series diverged at step {n}")
        g = g + cur
        norms.append(sup_norm(cur))
        if cfg.convergence_tol is not None and norms[-1] <= cfg.convergence_tol:
            break
    return g, np.array(norms)


def fixed_point_hypergradient(v, hvp_at_opt, cross_vjp, alpha: float, cfg: RBPConfig):
    """Generic assembly: Neumann-solve (I - J^T + eps I) g = v, then map into
    meta space through dF/dtheta = -alpha * d(grad_w L)/d(theta).

    ``hvp_at_opt(u)`` applies the episodic Hessian at the optimum;
    ``cross_vjp(g)`` returns d/d(theta) of <g, grad_w L(w*, theta)>.
    """
    g, norms = neumann_rbp(v, lambda u: u - alpha * hvp_at_opt(u), cfg)
    return -alpha * cross_vjp(g), g, norms


def unrolled_hypergradient(w0, t_steps: int, alpha: float, grad_w, hvp_at, cross_at, outer_grad):
    """Exact gradient through T explicit GD steps from ``w0``.

    Reverse accumulation: lam starts at the query gradient at w_T; each step
    contributes -alpha * cross(w_t, lam) and pulls lam back through
    (I - alpha H(w_t)).
    """
    if t_steps < 1:
        raise ValueError("t_steps must be >= 1")
    ws = [np.asarray(w0, dtype=float)]
    for _ in range(t_steps):
        w_next = ws[-1] - alpha * grad_w(ws[-1])
        if not np.all(np.isfinite(w_next)):
            raise NonFiniteError("unrolled descent diverged")
        ws.append(w_next)
    lam = outer_grad(ws[-1])
    theta_grad = None
    for t in range(t_steps - 1, -1, -1):
        contrib = -alpha * cross_at(ws[t], lam)
        theta_grad = contrib if theta_grad is None else theta_grad + contrib
        if t > 0:
            lam = lam - alpha * hvp_at(ws[t], lam)
    return theta_grad, ws


def rbp_hypergradient(
    meta: MetaParams,
    episode: Episode,
    base: BaseClassifier,
    solver_cfg: SolverConfig | None = None,
    rbp_cfg: RBPConfig | None = None,
    model_cfg: ModelConfig = ModelConfig(),
    init_seed: int = 0,
    alpha: float | None = None,
) -> HyperGradient:
    """Solve the episode, then backprop the query loss through the fixed
    point. ``alpha`` defaults to 0.5 / lambda_max(H at the optimum), the
    contraction-safe dummy-step size."""
    rbp_cfg = rbp_cfg or RBPConfig()
    problem = EpisodeObjective(base, meta, episode, model_cfg)
    solve = solve_episode(problem, solver_cfg, init_seed=init_seed)
    w_star = solve.w_star
    if alpha is None:
        alpha = estimate_gd_alpha(lambda u: problem.hessian_vp(w_star, u), w_star.size)
    q_val, v = problem.query_value_and_grad(w_star)
    theta_grad, _, norms = fixed_point_hypergradient(
        v,
        lambda u: problem.hessian_vp(w_star, u),
        lambda g: problem.theta_partial(w_star, g),
        alpha,
        rbp_cfg,
    )
    return HyperGradient(grad=theta_grad, step_norms=norms, query_loss=q_val,
                         alpha=alpha, solve=solve)


def tbptt_hypergradient(
    meta: MetaParams,
    episode: Episode,
    base: BaseClassifier,
    t_steps: int,
    alpha: float,
    model_cfg: ModelConfig = ModelConfig(),
    init_seed: int = 0,
) -> HyperGradient:
    """Gradient of the query loss through T exactly-unrolled GD steps from
    the seeded init. ``alpha`` is treated as a constant."""
    problem = EpisodeObjective(base, meta, episode, model_cfg)
    w0 = problem.init_fast(init_seed)
    theta_grad, ws = unrolled_hypergradient(
        w0, t_steps, alpha,
        grad_w=problem.grad,
        hvp_at=problem.hessian_vp,
        cross_at=problem.theta_partial,
        outer_grad=lambda w: problem.query_value_and_grad(w)[1],
    )
    q_val, _ = problem.query_value_and_grad(ws[-1])
    gn = sup_norm(problem.grad(ws[-1]))
    return HyperGradient(
        grad=theta_grad,
        step_norms=np.array([sup_norm(theta_grad)]),
        query_loss=q_val,
        alpha=alpha,
        solve=SolveResult(ws[-1], t_steps, gn, False, status="unrolled"),
    )


FD_SOLVER = SolverConfig(grad_tol=1e-11, max_steps=3000)


def fd_hypergradient(
    meta: MetaParams,
    episode: Episode,
    base: BaseClassifier,
    step: float = 1e-4,
    model_cfg: ModelConfig = ModelConfig(),
    solver_cfg: SolverConfig = FD_SOLVER,
    init_seed: int = 0,
    warm_start: bool = True,
) -> HyperGradient:
    """Central-difference oracle over every meta coordinate.

    Each perturbed problem is re-solved to tight tolerance; with convex (LR)
    episodes the optimum is unique so warm-starting from the unperturbed
    solution is exact and much faster. Slow by construction; use small
    instances.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base_problem = EpisodeObjective(base, meta, episode, model_cfg)
    center = solve_episode(base_problem, solver_cfg, init_seed=init_seed)
    w_warm = center.w_star
    # Convex LR re-solves use warm-started Newton: 1-2 iterations to machine
    # precision, which keeps the coordinate loop tractable.
    newton = model_cfg.variant == "lr"

    def query_at(vec):
        m = meta.from_vector(vec)
        prob = EpisodeObjective(base, m, episode, model_cfg)
        if warm_start and newton:
            res = minimize_newton(prob.value_and_grad, prob.hessian_vp, w_warm, solver_cfg)
        elif warm_start:
            res = minimize_lbfgs(prob.value_and_grad, w_warm, solver_cfg)
        else:
            res = solve_episode(prob, solver_cfg, init_seed=init_seed)
        return prob.query_value_and_grad(res.w_star)[0]

    vec = meta.to_vector()
    grad = np.zeros_like(vec)
    for i in range(vec.size):
        bump = np.zeros_like(vec)
        bump[i] = step
        grad[i] = (query_at(vec + bump) - query_at(vec - bump)) / (2.0 * step)
    q_val, _ = base_problem.query_value_and_grad(w_warm)
    return HyperGradient(grad=grad, step_norms=np.array([0.0]), query_loss=q_val,
                         alpha=None, solve=center)


def scalar_bilevel_probe(theta: float, method: str = "rbp", epsilon: float = 0.0,
                         steps: int = 200, t_steps: int = 50, alpha: float = 0.5):
    """Analytic test problem: inner 0.5*(w-theta)^2, outer 0.5*w^2.

    The exact hypergradient is theta. Routes through the same generic
    machinery as the episodic wrappers (H = 1, cross = -g).
    """
    w_star = np.array([float(theta)])
    hvp = lambda u: u                      # H = 1
    cross = lambda g: -g                   # d/dtheta <g, w - theta>
    if method == "rbp":
        cfg = RBPConfig(epsilon=epsilon, neumann_steps=steps)
        v = w_star.copy()                  # outer grad at w* = theta
        grad, _, _ = fixed_point_hypergradient(v, hvp, cross, alpha, cfg)
        return float(grad[0])
    if method == "tbptt":
        grad, _ = unrolled_hypergradient(
            np.zeros(1), t_steps, alpha,
            grad_w=lambda w: w - theta,
            hvp_at=lambda w, u: u,
            cross_at=lambda w, lam: -lam,
            outer_grad=lambda w: w,
        )
        return float(grad[0])
    raise ValueError(f"unknown method {method!r}")
