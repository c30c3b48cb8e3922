"""Meta-training loop, evaluation metrics, and the prototype baselines.

Meta-training repeats: sample an episode plus a base query mini-batch, solve
the episodic objective, take the query loss on the joint query set, push it
back to the meta parameters through the fixed point (or a truncated unroll),
and apply one Adam update. Evaluation reports joint and individual accuracies
together with the signed degradation caused by joint prediction:

    delta_a = joint base accuracy  - individual base accuracy
    delta_b = joint novel accuracy - individual novel accuracy
    delta   = (delta_a + delta_b) / 2       (held exactly)

Half-widths are the normal approximation 1.96 * std / sqrt(n) over episodes,
matching plus-minus reporting conventions. Argmax ties resolve to the lowest
class index.
"""

from __future__ import annotations

import concurrent.futures
from dataclasses import dataclass, field, replace

import numpy as np

from . import attractor as att
from . import classifier as clf
from .embeddings import (
    SPLIT_BASE_TEST,
    SPLIT_BASE_TRAIN,
    SPLIT_BASE_VAL,
    EmbeddingTable,
    Episode,
    EpisodeConfig,
    SyntheticWorld,
    examples_to_arrays,
    generate_synthetic_world,
    sample_episode,
)
from .implicit_grad import RBPConfig, rbp_hypergradient, tbptt_hypergradient
from .inner_solver import SolverConfig, estimate_gd_alpha
from .objective import EpisodeObjective, ModelConfig, solve_episode
from .util import NonFiniteError, rng_from


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """Moment accumulators plus the step-decay learning-rate schedule."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    decay_factor: float = 1.0
    decay_step: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def current_lr(self) -> float:
        """Learning rate that the *next* update will use."""
        if self.decay_step is None or self.decay_factor == 1.0:
            return self.lr
        return self.lr * self.decay_factor ** (self.step // self.decay_step)


def init_adam(n_params: int, lr: float = 1e-3, decay_factor: float = 1.0,
              decay_step: int | None = None) -> AdamState:
    return AdamState(m=np.zeros(n_params), v=np.zeros(n_params), lr=lr,
                     decay_factor=decay_factor, decay_step=decay_step)


def adam_step(theta: np.ndarray, grad: np.ndarray, state: AdamState):
    """One bias-corrected Adam update; returns (new theta, new state)."""
    grad = np.asarray(grad, dtype=float)
    if grad.shape != theta.shape:
        raise ValueError("gradient shape does not match parameters")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("meta gradient is non-finite")
    lr = state.current_lr()
    t = state.step + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grad
    v = state.beta2 * state.v + (1 - state.beta2) * grad ** 2
    m_hat = m / (1 - state.beta1 ** t)
    v_hat = v / (1 - state.beta2 ** t)
    theta_new = theta - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return theta_new, replace(state, m=m, v=v, step=t)


# ---------------------------------------------------------------------------
# Desk-scale defaults: minutes-long runs that exercise every code path.

DESK_DIM = 16
DESK_BASE_CLASSES = 16
DESK_NOVEL_POOL = 16
DESK_SEPARATION = 5.0
DESK_STDDEV = 1.0
DESK_META_STEPS = 300
DESK_EVAL_EPISODES = 500


def desk_world(seed: int = 0, base_count: int = DESK_BASE_CLASSES) -> SyntheticWorld:
    return generate_synthetic_world(
        base_count=base_count,
        novel_pool=DESK_NOVEL_POOL,
        dim=DESK_DIM,
        separation=DESK_SEPARATION,
        stddev=DESK_STDDEV,
        seed=seed,
    )


def desk_episode_config(n_shots: int = 1, base_count: int = DESK_BASE_CLASSES) -> EpisodeConfig:
    # Equal base/novel proportion in the joint query set.
    return EpisodeConfig(
        n_shots=n_shots,
        k_novel=5,
        m_queries=5,
        k_base=base_count,
        dim=DESK_DIM,
        base_query_size=25,
    )


# ---------------------------------------------------------------------------
# Meta-training


@dataclass(frozen=True)
class MetaTrainConfig:
    episode: EpisodeConfig
    model: ModelConfig = ModelConfig()
    steps: int = DESK_META_STEPS
    meta_lr: float = 1e-3
    decay_factor: float = 0.1
    decay_step: int | None = None
    solver: SolverConfig = SolverConfig()
    rbp: RBPConfig = RBPConfig()
    grad_method: str = "rbp"          # "rbp" or "tbptt"
    tbptt_steps: int = 5
    tbptt_alpha: float | None = None  # None: calibrate on the first episode
    meta_batch: int = 1
    seed: int = 0
    base_split: int = SPLIT_BASE_VAL
    workers: int = 1

    def __post_init__(self):
        if self.steps < 0 or self.meta_batch < 1:
            raise ValueError("steps must be >= 0 and meta_batch >= 1")
        if self.grad_method not in ("rbp", "tbptt"):
            raise ValueError(f"unknown grad method {self.grad_method!r}")


def _episode_seed(seed: int, step: int, b: int) -> int:
    return int(rng_from(seed, step, b).integers(0, 2 ** 62))


def calibrate_unroll_alpha(source, base, meta, cfg: MetaTrainConfig) -> float:
    """Fixed unroll step: the contraction-safe rule evaluated once, at the
    seeded init of the first episode, then frozen (so the unrolled gradient
    stays exact in theta)."""
    ep = sample_episode(source, cfg.episode, _episode_seed(cfg.seed, 0, 0), cfg.base_split)
    prob = EpisodeObjective(base, meta, ep, cfg.model)
    w0 = prob.init_fast(_episode_seed(cfg.seed, 0, 1))
    return estimate_gd_alpha(lambda u: prob.hessian_vp(w0, u), w0.size)


def _one_hypergradient(meta, episode, base, cfg: MetaTrainConfig, init_seed, alpha_unroll):
    if cfg.grad_method == "rbp":
        return rbp_hypergradient(
            meta, episode, base,
            solver_cfg=cfg.solver, rbp_cfg=cfg.rbp, model_cfg=cfg.model,
            init_seed=init_seed,
        )
    return tbptt_hypergradient(
        meta, episode, base, cfg.tbptt_steps, alpha_unroll,
        model_cfg=cfg.model, init_seed=init_seed,
    )


def meta_train(source, base: clf.BaseClassifier, meta0: att.MetaParams,
               cfg: MetaTrainConfig, log_fn=None):
    """Run the meta-loop; returns (trained MetaParams, list of log records).

    The vanilla arm has nothing to learn (its regularizer is a fixed weight
    decay), so it returns the initial parameters untouched. Deterministic
    given (source, base, meta0, cfg).
    """
    records: list[dict] = []
    if cfg.model.mode == att.MODE_VANILLA or cfg.steps == 0:
        return meta0, records

    theta = meta0.to_vector()
    state = init_adam(theta.size, cfg.meta_lr, cfg.decay_factor, cfg.decay_step)
    alpha_unroll = cfg.tbptt_alpha
    if cfg.grad_method == "tbptt" and alpha_unroll is None:
        alpha_unroll = calibrate_unroll_alpha(source, base, meta0, cfg)

    meta = meta0
    for step in range(cfg.steps):
        grads = []
        losses = []
        residuals = []
        jobs = []
        for b in range(cfg.meta_batch):
            ep_seed = _episode_seed(cfg.seed, step, 2 * b)
            init_seed = _episode_seed(cfg.seed, step, 2 * b + 1)
            episode = sample_episode(source, cfg.episode, ep_seed, cfg.base_split)
            jobs.append((episode, init_seed))

        def run(job):
            episode, init_seed = job
            return _one_hypergradient(meta, episode, base, cfg, init_seed, alpha_unroll)

        if cfg.workers > 1 and len(jobs) > 1:
            with concurrent.futures.ThreadPoolExecutor(cfg.workers) as pool:
                results = list(pool.map(run, jobs))
        else:
            results = [run(j) for j in jobs]
        for hg in results:
            grads.append(hg.grad)
            losses.append(hg.query_loss)
            residuals.append(hg.neumann_residual)

        grad = np.mean(grads, axis=0)
        record = {
            "step": step,
            "query_loss": float(np.mean(losses)),
            "grad_norm": float(np.linalg.norm(grad)),
            "neumann_residual": float(np.mean(residuals)),
            "lr": state.current_lr(),
        }
        theta, state = adam_step(theta, grad, state)
        meta = meta0.from_vector(theta)
        records.append(record)
        if log_fn is not None:
            log_fn(record)
    return meta, records


# ---------------------------------------------------------------------------
# Evaluation


@dataclass(frozen=True)
class MetricsReport:
    acc_base_joint: float
    acc_novel_joint: float
    acc_both: float
    acc_base_individual: float
    acc_novel_individual: float
    delta_a: float
    delta_b: float
    delta: float
    episode_count: int
    hw_acc_base_joint: float = 0.0
    hw_acc_novel_joint: float = 0.0
    hw_acc_both: float = 0.0
    hw_acc_base_individual: float = 0.0
    hw_acc_novel_individual: float = 0.0
    hw_delta_a: float = 0.0
    hw_delta_b: float = 0.0
    hw_delta: float = 0.0

    FIELDS = (
        "acc_base_joint", "acc_novel_joint", "acc_both",
        "acc_base_individual", "acc_novel_individual",
        "delta_a", "delta_b", "delta", "episode_count",
        "hw_acc_base_joint", "hw_acc_novel_joint", "hw_acc_both",
        "hw_acc_base_individual", "hw_acc_novel_individual",
        "hw_delta_a", "hw_delta_b", "hw_delta",
    )


def _half_width(values: np.ndarray) -> float:
    if len(values) < 2:
        return 0.0
    return float(1.96 * values.std(ddof=1) / np.sqrt(len(values)))


_PER_EPISODE_KEYS = (
    "acc_base_joint", "acc_novel_joint", "acc_both",
    "acc_base_individual", "acc_novel_individual",
    "delta_a", "delta_b", "delta",
)


def _aggregate(per_episode: list[dict]) -> MetricsReport:
    cols = {k: np.array([row[k] for row in per_episode]) for k in _PER_EPISODE_KEYS}
    means = {k: float(v.mean()) for k, v in cols.items()}
    # Hold the identity delta = (delta_a + delta_b)/2 exactly at the
    # aggregate level, independent of float summation order.
    means["delta"] = (means["delta_a"] + means["delta_b"]) / 2.0
    hws = {f"hw_{k}": _half_width(v) for k, v in cols.items()}
    return MetricsReport(episode_count=len(per_episode), **means, **hws)


def _accuracy(pred: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(pred == y))


def episode_metrics(fw: clf.FastWeights, base: clf.BaseClassifier, episode: Episode) -> dict:
    """Accuracy bundle for one solved episode."""
    Xb, yb = examples_to_arrays(episode.query_base)
    Xn, yn = examples_to_arrays(episode.query_novel)
    k = base.k_base

    base_ind = _accuracy(np.argmax(base.logits(Xb), axis=1), yb)
    novel_ind = _accuracy(np.argmax(clf.fast_forward(fw, Xn), axis=1) + k, yn)
    jb = np.argmax(clf.joint_logits(base, fw, Xb), axis=1)
    jn = np.argmax(clf.joint_logits(base, fw, Xn), axis=1)
    base_joint = _accuracy(jb, yb)
    novel_joint = _accuracy(jn, yn)
    both = float(np.mean(np.concatenate([jb == yb, jn == yn])))
    da = base_joint - base_ind
    db = novel_joint - novel_ind
    return {
        "acc_base_joint": base_joint,
        "acc_novel_joint": novel_joint,
        "acc_both": both,
        "acc_base_individual": base_ind,
        "acc_novel_individual": novel_ind,
        "delta_a": da,
        "delta_b": db,
        "delta": (da + db) / 2.0,
    }


def evaluate(meta: att.MetaParams, base: clf.BaseClassifier, source,
             ep_cfg: EpisodeConfig, n_episodes: int,
             model_cfg: ModelConfig = ModelConfig(),
             solver_cfg: SolverConfig | None = None,
             seed: int = 0,
             base_split: int = SPLIT_BASE_TEST,
             workers: int = 1,
             unroll: tuple[int, float] | None = None) -> MetricsReport:
    """Solve and score ``n_episodes`` fresh episodes.

    Pure in (meta, base, source, seeds): reruns are bit-identical. Episodes
    are independent, so ``workers > 1`` maps them over a thread pool and
    gathers in index order. ``unroll=(T, alpha)`` evaluates at exactly T
    fixed-step GD iterations instead of full convergence.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")

    def one(i: int) -> dict:
        ep_seed = _episode_seed(seed, i, 0)
        init_seed = _episode_seed(seed, i, 1)
        episode = sample_episode(source, ep_cfg, ep_seed, base_split)
        problem = EpisodeObjective(base, meta, episode, model_cfg)
        res = solve_episode(problem, solver_cfg, init_seed=init_seed, unroll=unroll)
        return episode_metrics(problem.unpack(res.w_star), base, episode)

    if workers > 1:
        with concurrent.futures.ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(one, range(n_episodes)))
    else:
        rows = [one(i) for i in range(n_episodes)]
    return _aggregate(rows)


# ---------------------------------------------------------------------------
# Baselines


def baseline_imprint(episode: Episode, base: clf.BaseClassifier) -> clf.FastWeights:
    """Fast weights by prototypical averaging: column k' is the L2-normalized
    mean of that class's support features."""
    X, y = examples_to_arrays(episode.support)
    cols = []
    for label in sorted(set(y.tolist())):
        m = X[y == label].mean(axis=0)
        norm = np.linalg.norm(m)
        if norm == 0.0:
            raise att.DegenerateInputError(f"support mean of class {label} has zero norm")
        cols.append(m / norm)
    return clf.FastWeights(clf.VARIANT_LR, w_b=np.stack(cols, axis=1))


def base_prototypes(table: EmbeddingTable, split: int = SPLIT_BASE_TRAIN) -> np.ndarray:
    """Per-base-class feature means, row k = prototype of class k."""
    return np.stack([
        table.features(label, split).astype(float).mean(axis=0)
        for label in table.labels(split)
    ])


def world_prototypes(world: SyntheticWorld) -> np.ndarray:
    return world.class_means[: world.base_class_count].astype(float)


def baseline_protonet(episode: Episode, prototypes: np.ndarray) -> np.ndarray:
    """Nearest-prototype predictions over the joint query set.

    The bank is the K base prototypes followed by K' support means; labels
    are the prototype indices (novel prototype i maps to class K+i). Ties go
    to the lowest class index.
    """
    k = prototypes.shape[0]
    X, y = examples_to_arrays(episode.support)
    novel = np.stack([X[y == l].mean(axis=0) for l in sorted(set(y.tolist()))])
    bank = np.concatenate([prototypes, novel], axis=0)
    Q, _ = examples_to_arrays(episode.joint_query())
    d2 = ((Q[:, None, :] - bank[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)


def _protonet_metrics(episode: Episode, prototypes: np.ndarray) -> dict:
    k = prototypes.shape[0]
    X, ys = examples_to_arrays(episode.support)
    novel = np.stack([X[ys == l].mean(axis=0) for l in sorted(set(ys.tolist()))])
    bank = np.concatenate([prototypes, novel], axis=0)

    def nearest(Q, sub):
        d2 = ((Q[:, None, :] - bank[None, sub, :]) ** 2).sum(axis=2)
        return np.asarray(sub)[np.argmin(d2, axis=1)]

    Xb, yb = examples_to_arrays(episode.query_base)
    Xn, yn = examples_to_arrays(episode.query_novel)
    allidx = list(range(bank.shape[0]))
    base_ind = _accuracy(nearest(Xb, list(range(k))), yb)
    novel_ind = _accuracy(nearest(Xn, list(range(k, bank.shape[0]))), yn)
    jb, jn = nearest(Xb, allidx), nearest(Xn, allidx)
    da = _accuracy(jb, yb) - base_ind
    db = _accuracy(jn, yn) - novel_ind
    return {
        "acc_base_joint": _accuracy(jb, yb),
        "acc_novel_joint": _accuracy(jn, yn),
        "acc_both": float(np.mean(np.concatenate([jb == yb, jn == yn]))),
        "acc_base_individual": base_ind,
        "acc_novel_individual": novel_ind,
        "delta_a": da,
        "delta_b": db,
        "delta": (da + db) / 2.0,
    }


def evaluate_baseline(kind: str, base: clf.BaseClassifier, source,
                      ep_cfg: EpisodeConfig, n_episodes: int, seed: int = 0,
                      base_split: int = SPLIT_BASE_TEST,
                      prototypes: np.ndarray | None = None) -> MetricsReport:
    """Score the imprint or nearest-prototype baseline over fresh episodes."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    if kind not in ("imprint", "protonet"):
        raise ValueError(f"unknown baseline {kind!r}")
    if kind == "protonet" and prototypes is None:
        if isinstance(source, SyntheticWorld):
            prototypes = world_prototypes(source)
        else:
            prototypes = base_prototypes(source)
    rows = []
    for i in range(n_episodes):
        episode = sample_episode(source, ep_cfg, _episode_seed(seed, i, 0), base_split)
        if kind == "imprint":
            fw = baseline_imprint(episode, base)
            rows.append(episode_metrics(fw, base, episode))
        else:
            rows.append(_protonet_metrics(episode, prototypes))
    return _aggregate(rows)
