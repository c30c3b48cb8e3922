"""Binds one episode, the frozen base classifier and the meta parameters into
flat-vector objectives.

``EpisodeObjective`` is what the solvers and the fixed-point gradient
machinery consume: episodic value/gradient, exact Hessian-vector products,
the query loss, and the partial derivative of the episodic gradient with
respect to the meta parameters (the only coupling is through the
regularizer, so that partial is assembled from the attractor pipeline).

Attention, memory and attractors depend on the support set and meta
parameters but not on the fast weights, so they are computed once per
episode at construction.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import attractor as att
from . import classifier as clf
from .blockfile import DimensionMismatchError
from .embeddings import Episode, examples_to_arrays
from .inner_solver import (
    SolverConfig,
    SolveResult,
    estimate_gd_alpha,
    minimize_gd,
    minimize_lbfgs,
)


@dataclass(frozen=True)
class ModelConfig:
    """Which fast classifier and which regularizer arm to run."""

    variant: str = clf.VARIANT_LR
    mode: str = att.MODE_ATTENTION
    fast_hidden: int = 40
    mask_base_in_support: bool = False
    use_bias: bool = False

    def __post_init__(self):
        if self.variant not in (clf.VARIANT_LR, clf.VARIANT_MLP):
            raise ValueError(f"unknown classifier variant {self.variant!r}")
        if self.mode not in att.MODES:
            raise ValueError(f"unknown attractor mode {self.mode!r}")


def _augment(X):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return np.concatenate([X, np.ones((len(X), 1))], axis=1)


class EpisodeObjective:
    """Flat-vector view of one episode's losses for a fixed meta state."""

    def __init__(self, base: clf.BaseClassifier, meta: att.MetaParams,
                 episode: Episode, cfg: ModelConfig = ModelConfig()):
        self.base = base
        self.meta = meta
        self.episode = episode
        self.cfg = cfg
        self.k_novel = episode.k_novel

        Xs, ys = examples_to_arrays(episode.support)
        Xq, yq = examples_to_arrays(episode.joint_query())
        if cfg.use_bias:
            Xs, Xq = _augment(Xs), _augment(Xq)
        self.dim = Xs.shape[1]
        if base.dim != self.dim or meta.dim != self.dim:
            raise DimensionMismatchError(
                f"feature dim {self.dim} vs base {base.dim} vs meta {meta.dim}"
            )
        if cfg.variant == clf.VARIANT_MLP and meta.variant != clf.VARIANT_MLP:
            raise DimensionMismatchError("MLP fast weights need MLP-variant meta params")
        self.Xs, self.ys = Xs, ys
        self.Xq, self.yq = Xq, yq
        self.support_base_logits = None if cfg.mask_base_in_support else Xs @ base.w_a
        self.query_base_logits = Xq @ base.w_a
        self._forward_attractors()

    # -- attractor pipeline (fixed per episode) -----------------------------

    def _forward_attractors(self):
        meta, cfg, kp = self.meta, self.cfg, self.k_novel
        d = self.dim
        mode = cfg.mode
        self._att = None
        if mode == att.MODE_ATTENTION:
            means = np.stack(
                [self.Xs[self.ys == l].mean(axis=0) for l in np.unique(self.ys)]
            )
            m_norm = np.linalg.norm(means, axis=1)
            w_norm = np.linalg.norm(self.base.w_a, axis=0)
            if np.any(m_norm == 0) or np.any(w_norm == 0):
                raise att.DegenerateInputError("zero-norm vector in cosine similarity")
            cos = (means @ self.base.w_a) / np.outer(m_norm, w_norm)
            A = att.softmax(meta.tau * cos, axis=1)
            self._att = (A, cos)
            mem, self._phi_cache = meta.phi.apply_with_cache(self.base.w_a.T)
            self.memory = mem
            self.u_main = att.assemble_attractors(mem, A, meta.u0)
        elif mode == att.MODE_STATIC:
            self.memory = None
            self.u_main = np.repeat(meta.u0[None, :], kp, axis=0)
        else:  # vanilla: fixed plain weight decay, no meta coupling
            self.memory = None
            self.u_main = np.zeros((kp, d))

        if cfg.variant == clf.VARIANT_MLP:
            h = cfg.fast_hidden
            if mode == att.MODE_ATTENTION:
                A, _ = self._att
                mem2, self._phi2_cache = meta.phi2.apply_with_cache(self.base.w_a.T)
                self.memory2 = mem2
                self.u_final = att.assemble_attractors(mem2, A, meta.u0_2)
            elif mode == att.MODE_STATIC:
                self.memory2 = None
                self.u_final = np.repeat(meta.u0_2[None, :], kp, axis=0)
            else:
                self.memory2 = None
                self.u_final = np.zeros((kp, h))
            self.c_hidden = meta.c1 if mode != att.MODE_VANILLA else np.zeros(d)

    def attractor_set(self) -> att.AttractorSet:
        A = self._att[0] if self._att else np.full(
            (self.k_novel, self.base.k_base), 1.0 / self.base.k_base
        )
        mem = self.memory if self.memory is not None else np.zeros(
            (self.base.k_base, self.dim)
        )
        return att.AttractorSet(memory=mem, attention=A, attractors=self.u_main,
                                mode="dynamic" if self.cfg.mode == att.MODE_ATTENTION else "static")

    # -- fast-weight layout --------------------------------------------------

    @property
    def n_params(self) -> int:
        d, kp = self.dim, self.k_novel
        if self.cfg.variant == clf.VARIANT_LR:
            return d * kp
        h = self.cfg.fast_hidden
        return d * h + h * kp + d * kp

    def unpack(self, w) -> clf.FastWeights:
        return clf.FastWeights.unflatten(
            w, self.cfg.variant, self.dim, self.k_novel, self.cfg.fast_hidden
        )

    def init_fast(self, seed: int = 0) -> np.ndarray:
        return clf.init_fast_weights(
            self.cfg.variant, self.dim, self.k_novel, self.cfg.fast_hidden, seed
        ).flatten()

    def _gammas(self):
        meta = self.meta
        if self.cfg.variant == clf.VARIANT_LR:
            return [meta.gamma]
        return [meta.gamma1, meta.gamma2, meta.gamma]

    def _reg_blocks(self, fw: clf.FastWeights):
        """(weight block, attractor rows, gamma) triples in flat-layout order."""
        if self.cfg.variant == clf.VARIANT_LR:
            return [(fw.w_b, self.u_main, self.meta.gamma)]
        u_hidden = np.repeat(self.c_hidden[None, :], self.cfg.fast_hidden, axis=0)
        return [
            (fw.w1, u_hidden, self.meta.gamma1),
            (fw.w2, self.u_final, self.meta.gamma2),
            (fw.w_sc, self.u_main, self.meta.gamma),
        ]

    def regularizer_eval(self, w):
        """Total penalty at ``w`` as a LossValue with a flat gradient."""
        fw = self.unpack(w)
        value, grads = 0.0, []
        self._block_evals = []
        for wb, u, gamma in self._reg_blocks(fw):
            ev = att.regularizer(wb, u, gamma)
            self._block_evals.append(ev)
            value += ev.value
            grads.append(ev.grad_w.ravel())
        return clf.LossValue(value=value, grad=np.concatenate(grads))

    # -- episodic objective ---------------------------------------------------

    def value_and_grad(self, w):
        fw = self.unpack(w)
        reg = self.regularizer_eval(w)
        sup = clf._FastPass(
            fw, self.Xs,
            self.ys if self.support_base_logits is not None else self.ys - self.base.k_base,
            self.support_base_logits,
        )
        ce, g = sup.value_and_grad()
        return ce + reg.value, g + reg.grad

    def grad(self, w):
        return self.value_and_grad(w)[1]

    def hessian_vp(self, w, v):
        """Exact episodic Hessian-vector product at ``w``."""
        fw = self.unpack(w)
        v = np.asarray(v, dtype=float)
        sup = clf._FastPass(
            fw, self.Xs,
            self.ys if self.support_base_logits is not None else self.ys - self.base.k_base,
            self.support_base_logits,
        )
        out = sup.hessian_vp(v)
        # Regularizer curvature: 2 diag(exp gamma) per column, block-wise.
        pos = 0
        pieces = []
        for (wb, _, gamma) in self._reg_blocks(fw):
            size = wb.size
            V = v[pos:pos + size].reshape(wb.shape)
            pieces.append((2.0 * np.exp(gamma)[:, None] * V).ravel())
            pos += size
        return out + np.concatenate(pieces)

    # -- query objective -------------------------------------------------------

    def query_value_and_grad(self, w):
        fw = self.unpack(w)
        qp = clf._FastPass(fw, self.Xq, self.yq, self.query_base_logits)
        return qp.value_and_grad()

    # -- meta coupling ----------------------------------------------------------

    def _chain_to_theta(self, du_main, du_final, dc_hidden, dgammas) -> np.ndarray:
        """Assemble a flat meta-gradient from per-block partials.

        ``du_main``/``du_final`` are partials w.r.t. the attractor rows of the
        feature-space and hidden-space pipelines, propagated here through the
        bias, the attention rows and the memory MLPs.
        """
        meta, cfg = self.meta, self.cfg
        g = meta.zeros_like()
        if cfg.mode == att.MODE_VANILLA:
            return g.to_vector()

        if cfg.variant == clf.VARIANT_LR:
            g.gamma = dgammas[0]
        else:
            g.gamma1, g.gamma2, g.gamma = dgammas
            g.c1 = dc_hidden

        dA = None
        g.u0 = du_main.sum(axis=0)
        if cfg.mode == att.MODE_ATTENTION:
            A, cos = self._att
            dA = du_main @ self.memory.T
            dmem = A.T @ du_main
            g.phi = meta.phi.backward(dmem, self._phi_cache)
        if cfg.variant == clf.VARIANT_MLP:
            g.u0_2 = du_final.sum(axis=0)
            if cfg.mode == att.MODE_ATTENTION:
                dA = dA + du_final @ self.memory2.T
                dmem2 = A.T @ du_final
                g.phi2 = meta.phi2.backward(dmem2, self._phi2_cache)
        if dA is not None:
            g.tau = att.attention_tau_backward(dA, A, cos)
        return g.to_vector()

    def theta_partial(self, w, g_fast) -> np.ndarray:
        """d/d(theta) of <g_fast, grad_w L_episodic(w, theta)> at fixed ``w``.

        Only the regularizer couples theta to the episodic gradient. This is
        the cross term the fixed-point hypergradient multiplies by -alpha.
        """
        if self.cfg.mode == att.MODE_VANILLA:
            return np.zeros(self.meta.n_params)
        fw = self.unpack(w)
        g_fast = np.asarray(g_fast, dtype=float)
        pos = 0
        dgammas, dus = [], []
        for wb, u, gamma in self._reg_blocks(fw):
            G = g_fast[pos:pos + wb.size].reshape(wb.shape)
            pos += wb.size
            slope = np.exp(gamma)
            diff = wb.T - u                                    # (k, d)
            dgammas.append(2.0 * slope * (G * diff.T).sum(axis=1))
            dus.append(-2.0 * G.T * slope[None, :])            # (k, d)
        if self.cfg.variant == clf.VARIANT_LR:
            return self._chain_to_theta(dus[0], None, None, dgammas)
        dc_hidden = dus[0].sum(axis=0)
        return self._chain_to_theta(dus[2], dus[1], dc_hidden, dgammas)

    def reg_theta_grad(self, w) -> np.ndarray:
        """d/d(theta) of the penalty value itself at fixed ``w`` (the full
        support -> attention -> attractors -> penalty chain)."""
        if self.cfg.mode == att.MODE_VANILLA:
            return np.zeros(self.meta.n_params)
        self.regularizer_eval(w)
        evals = self._block_evals
        dgammas = [ev.grad_gamma for ev in evals]
        if self.cfg.variant == clf.VARIANT_LR:
            return self._chain_to_theta(evals[0].grad_u, None, None, dgammas)
        dc_hidden = evals[0].grad_u.sum(axis=0)
        return self._chain_to_theta(evals[2].grad_u, evals[1].grad_u, dc_hidden, dgammas)


def solve_episode(
    problem: EpisodeObjective,
    cfg: SolverConfig | None = None,
    init_seed: int = 0,
    method: str = "lbfgs",
    unroll: tuple[int, float] | None = None,
) -> SolveResult:
    """Minimize the episodic objective from the seeded init.

    ``unroll=(T, alpha)`` runs exactly T fixed-step gradient steps instead of
    solving to tolerance (the protocol used to evaluate truncation-trained
    models).
    """
    cfg = cfg or SolverConfig()
    w0 = problem.init_fast(init_seed)
    if unroll is not None:
        t_steps, alpha = unroll
        w = w0
        for _ in range(int(t_steps)):
            w = w - alpha * problem.grad(w)
        gn = float(np.max(np.abs(problem.grad(w))))
        return SolveResult(w_star=w, iterations=int(t_steps), final_grad_norm=gn,
                           converged=False, status="unrolled")
    if method == "lbfgs":
        return minimize_lbfgs(problem.value_and_grad, w0, cfg)
    if method == "gd":
        if cfg.alpha is None:
            alpha = estimate_gd_alpha(lambda v: problem.hessian_vp(w0, v), w0.size)
            cfg = replace(cfg, alpha=alpha)
        return minimize_gd(problem.value_and_grad, w0, cfg)
    raise ValueError(f"unknown solver method {method!r}")
