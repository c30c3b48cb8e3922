"""Self-contained oracle suite behind the ``gradcheck`` command.

Every check compares an analytic quantity against an independent reference:
closed-form scalar problems, direct linear solves, or central finite
differences. A non-zero damping injected into the fixed-point check is
expected to fail the exact-agreement tolerance; that is the documented bias,
not a bug.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attractor import init_meta_params
from .classifier import pretrain_base
from .embeddings import EpisodeConfig, generate_synthetic_world, sample_episode
from .implicit_grad import (
    RBPConfig,
    fd_hypergradient,
    neumann_rbp,
    rbp_hypergradient,
    scalar_bilevel_probe,
)
from .inner_solver import SolverConfig
from .objective import EpisodeObjective, ModelConfig
from .util import rng_from


@dataclass
class CheckResult:
    name: str
    passed: bool
    error: float
    tol: float

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"{flag}  {self.name}: max_err={self.error:.3e} tol={self.tol:.1e}"


def _rel(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def _fd_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def _small_problem(variant: str, mode: str, seed: int):
    d, k, kp = 6, 3, 2
    world = generate_synthetic_world(k, 4, d, separation=4.0, stddev=1.0, seed=seed)
    rng = rng_from(seed, 11)
    X = np.concatenate([world.sample_class(c, 25, rng) for c in range(k)])
    y = np.repeat(np.arange(k), 25)
    base = pretrain_base((X, y), epochs=120, lr=0.5, weight_decay=1e-3, seed=seed)
    cfg = EpisodeConfig(n_shots=4, k_novel=kp, m_queries=3, k_base=k, dim=d)
    episode = sample_episode(world, cfg, seed=seed + 5)
    meta = init_meta_params(d, variant, fast_hidden=5, attractor_hidden=6, seed=seed)
    jitter = rng_from(seed, 12).standard_normal(meta.n_params) * 0.05
    meta = meta.from_vector(meta.to_vector() + jitter)
    model = ModelConfig(variant=variant, mode=mode, fast_hidden=5)
    return EpisodeObjective(base, meta, episode, model), meta, episode, base, model


def check_scalar_bilevel(method: str) -> CheckResult:
    errs = [
        abs(scalar_bilevel_probe(t, method, epsilon=0.0, steps=400, t_steps=50, alpha=0.5) - t)
        for t in (-2.0, 0.5, 2.0)
    ]
    err = max(errs)
    return CheckResult(f"scalar_bilevel_{method}", err <= 1e-6, err, 1e-6)


def check_damping_bias() -> CheckResult:
    errs = []
    for j in (0.0, 0.3, 0.5):
        v = np.array([1.0])
        g, _ = neumann_rbp(v, lambda u: j * u, RBPConfig(epsilon=0.1, neumann_steps=4000))
        expected = (1.0 / (1.0 - j)) * ((1.0 - j) / (1.0 - j + 0.1))
        errs.append(abs(float(g[0]) - expected))
    err = max(errs)
    return CheckResult("damping_bias_law", err <= 1e-8, err, 1e-8)


def check_neumann_vs_direct(seed: int = 0) -> CheckResult:
    rng = rng_from(seed, 40)
    errs = []
    for _ in range(5):
        n = int(rng.integers(2, 21))
        J = rng.standard_normal((n, n))
        J *= 0.8 / max(abs(np.linalg.eigvals(J)))
        v = rng.standard_normal(n)
        for eps in (0.0, 0.1):
            g, _ = neumann_rbp(v, lambda u: J.T @ u, RBPConfig(epsilon=eps, neumann_steps=600))
            direct = np.linalg.solve(np.eye(n) - J.T + eps * np.eye(n), v)
            errs.append(float(np.linalg.norm(g - direct)))
    err = max(errs)
    return CheckResult("neumann_vs_direct_solve", err <= 1e-6, err, 1e-6)


def check_loss_gradients(seed: int = 0) -> CheckResult:
    errs = []
    for variant in ("lr", "mlp"):
        prob, *_ = _small_problem(variant, "attention", seed)
        rng = rng_from(seed, 21)
        w = 0.3 * rng.standard_normal(prob.n_params)
        errs.append(_rel(prob.value_and_grad(w)[1],
                         _fd_grad(lambda x: prob.value_and_grad(x)[0], w)))
        errs.append(_rel(prob.query_value_and_grad(w)[1],
                         _fd_grad(lambda x: prob.query_value_and_grad(x)[0], w)))
    err = max(errs)
    return CheckResult("loss_gradients_vs_fd", err <= 1e-5, err, 1e-5)


def check_mlp_hvp(seed: int = 0) -> CheckResult:
    prob, *_ = _small_problem("mlp", "attention", seed)
    rng = rng_from(seed, 22)
    w = 0.3 * rng.standard_normal(prob.n_params)
    v = rng.standard_normal(prob.n_params)
    h = 1e-6
    hv_fd = (prob.value_and_grad(w + h * v)[1] - prob.value_and_grad(w - h * v)[1]) / (2 * h)
    err = _rel(prob.hessian_vp(w, v), hv_fd)
    return CheckResult("mlp_hessian_vp_vs_fd", err <= 1e-5, err, 1e-5)


def check_attention_chain(seed: int = 0) -> CheckResult:
    prob, meta, episode, base, model = _small_problem("lr", "attention", seed)
    rng = rng_from(seed, 23)
    w = 0.3 * rng.standard_normal(prob.n_params)

    def r_of_theta(tv):
        prob2 = EpisodeObjective(base, meta.from_vector(tv), episode, model)
        return prob2.regularizer_eval(w).value

    err = _rel(prob.reg_theta_grad(w), _fd_grad(r_of_theta, meta.to_vector()))
    return CheckResult("attractor_chain_vs_fd", err <= 1e-5, err, 1e-5)


def check_rbp_vs_fd(epsilon: float = 0.0, seed: int = 0, episodes: int = 3) -> CheckResult:
    errs = []
    tight = SolverConfig(grad_tol=1e-11, max_steps=3000)
    for i in range(episodes):
        _, meta, episode, base, model = _small_problem("lr", "attention", seed + i)
        hg = rbp_hypergradient(
            meta, episode, base, solver_cfg=tight,
            rbp_cfg=RBPConfig(epsilon=epsilon, neumann_steps=400),
            model_cfg=model,
        )
        fd = fd_hypergradient(meta, episode, base, step=1e-4, model_cfg=model)
        errs.append(_rel(hg.grad, fd.grad))
    err = max(errs)
    return CheckResult("rbp_vs_fd_hypergradient", err <= 1e-4, err, 1e-4)


def run_checks(epsilon: float = 0.0, seed: int = 0) -> list[CheckResult]:
    """The full suite; ``epsilon`` is injected into the fixed-point-vs-FD
    comparison (non-zero values demonstrate the damping bias and fail)."""
    return [
        check_scalar_bilevel("rbp"),
        check_scalar_bilevel("tbptt"),
        check_damping_bias(),
        check_neumann_vs_direct(seed),
        check_loss_gradients(seed),
        check_mlp_hvp(seed),
        check_attention_chain(seed),
        check_rbp_vs_fd(epsilon=epsilon, seed=seed),
    ]
