"""Canned desk-scale experiment pipelines.

These wire together world generation, base pretraining, meta-training and
evaluation with the pinned defaults used by the ablation and
truncation-comparison reproductions. Everything is seeded and runs in
minutes on one core.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attractor import MODE_ATTENTION, MetaParams, init_meta_params
from .classifier import BaseClassifier, pretrain_base
from .embeddings import EpisodeConfig, SyntheticWorld
from .meta import (
    DESK_EVAL_EPISODES,
    DESK_META_STEPS,
    MetaTrainConfig,
    MetricsReport,
    desk_episode_config,
    desk_world,
    evaluate,
    meta_train,
)
from .objective import ModelConfig
from .util import rng_from

# Pretraining defaults for the synthetic worlds.
PRETRAIN_PER_CLASS = 100
PRETRAIN_EPOCHS = 400
PRETRAIN_LR = 0.5
PRETRAIN_WEIGHT_DECAY = 1e-4

# Desk-scale meta-optimization: larger rate than the paper-scale 1e-3 since
# only 300 steps are taken; decays once at 2/3 of the run.
DESK_META_LR = 1e-2

# Truncation-comparison protocol: T unrolled steps with a deliberately
# conservative fixed step, so the truncated solve is far from convergence.
TBPTT_COMPARE_STEPS = 5
TBPTT_COMPARE_ALPHA = 0.05


def pretrain_data_from_world(world: SyntheticWorld, per_class: int, seed: int):
    rng = rng_from(seed, 1000)
    X = np.concatenate([
        world.sample_class(c, per_class, rng) for c in range(world.base_class_count)
    ])
    y = np.repeat(np.arange(world.base_class_count), per_class)
    return X, y


def build_desk_setup(seed: int = 0, n_shots: int = 1,
                     base_count: int | None = None, classifier: str = "lr"):
    """World + pretrained base + episode config at the pinned desk scale."""
    world = desk_world(seed) if base_count is None else desk_world(seed, base_count)
    X, y = pretrain_data_from_world(world, PRETRAIN_PER_CLASS, seed)
    base = pretrain_base((X, y), epochs=PRETRAIN_EPOCHS, lr=PRETRAIN_LR,
                         weight_decay=PRETRAIN_WEIGHT_DECAY, seed=seed)
    ep_cfg = desk_episode_config(n_shots=n_shots, base_count=world.base_class_count)
    return world, base, ep_cfg


def desk_train_config(ep_cfg: EpisodeConfig, model: ModelConfig, seed: int,
                      steps: int = DESK_META_STEPS, meta_lr: float = DESK_META_LR,
                      grad_method: str = "rbp", tbptt_steps: int = TBPTT_COMPARE_STEPS,
                      tbptt_alpha: float | None = None) -> MetaTrainConfig:
    return MetaTrainConfig(
        episode=ep_cfg,
        model=model,
        steps=steps,
        meta_lr=meta_lr,
        decay_factor=0.1,
        decay_step=max(1, steps * 2 // 3),
        seed=seed,
        grad_method=grad_method,
        tbptt_steps=tbptt_steps,
        tbptt_alpha=tbptt_alpha,
    )


@dataclass
class ArmResult:
    mode: str
    meta: MetaParams
    report: MetricsReport
    records: list


def run_arm(world, base: BaseClassifier, ep_cfg: EpisodeConfig, mode: str,
            classifier: str = "lr", seed: int = 0, steps: int = DESK_META_STEPS,
            eval_episodes: int = DESK_EVAL_EPISODES, meta_lr: float = DESK_META_LR,
            grad_method: str = "rbp", tbptt_alpha: float | None = None,
            tbptt_steps: int = TBPTT_COMPARE_STEPS, workers: int = 1,
            eval_seed_offset: int = 777) -> ArmResult:
    """Meta-train one ablation arm and evaluate it on fresh episodes."""
    model = ModelConfig(variant=classifier, mode=mode)
    meta0 = init_meta_params(world.dim, classifier, seed=seed)
    cfg = desk_train_config(ep_cfg, model, seed, steps=steps, meta_lr=meta_lr,
                            grad_method=grad_method, tbptt_steps=tbptt_steps,
                            tbptt_alpha=tbptt_alpha)
    meta, records = meta_train(world, base, meta0, cfg)
    report = evaluate(meta, base, world, ep_cfg, eval_episodes, model_cfg=model,
                      seed=seed + eval_seed_offset, workers=workers)
    return ArmResult(mode=mode, meta=meta, report=report, records=records)


def run_ablation(seed: int = 0, n_shots: int = 1, classifier: str = "lr",
                 steps: int = DESK_META_STEPS,
                 eval_episodes: int = DESK_EVAL_EPISODES,
                 workers: int = 1) -> dict[str, ArmResult]:
    """The three regularizer arms (vanilla / static / attention) on the
    default synthetic world, with shared seeds."""
    world, base, ep_cfg = build_desk_setup(seed=seed, n_shots=n_shots,
                                           classifier=classifier)
    return {
        mode: run_arm(world, base, ep_cfg, mode, classifier=classifier, seed=seed,
                      steps=steps, eval_episodes=eval_episodes, workers=workers)
        for mode in ("vanilla", "static", "attention")
    }


@dataclass
class TruncationComparison:
    """Accuracy of truncation-trained vs fixed-point-trained models when the
    inner problem is solved for exactly T steps vs to convergence."""

    tbptt_at_T: MetricsReport
    tbptt_converged: MetricsReport
    rbp_at_T: MetricsReport
    rbp_converged: MetricsReport
    t_steps: int
    alpha: float

    @property
    def tbptt_drop(self) -> float:
        return self.tbptt_at_T.acc_both - self.tbptt_converged.acc_both

    @property
    def rbp_drop(self) -> float:
        return self.rbp_at_T.acc_both - self.rbp_converged.acc_both


def run_truncation_comparison(seed: int = 0, n_shots: int = 1,
                              steps: int = DESK_META_STEPS,
                              eval_episodes: int = DESK_EVAL_EPISODES,
                              t_steps: int = TBPTT_COMPARE_STEPS,
                              alpha: float = TBPTT_COMPARE_ALPHA,
                              rbp_arm: ArmResult | None = None,
                              workers: int = 1) -> TruncationComparison:
    """Train one arm through T unrolled steps and one through the fixed
    point, then score both at T steps and at full convergence.

    ``rbp_arm`` lets a caller reuse an attention arm trained elsewhere with
    the same seed/config instead of retraining it.
    """
    world, base, ep_cfg = build_desk_setup(seed=seed, n_shots=n_shots)
    model = ModelConfig(variant="lr", mode=MODE_ATTENTION)
    tbptt = run_arm(world, base, ep_cfg, MODE_ATTENTION, seed=seed, steps=steps,
                    eval_episodes=1, grad_method="tbptt", tbptt_alpha=alpha,
                    tbptt_steps=t_steps)
    if rbp_arm is None:
        rbp_arm = run_arm(world, base, ep_cfg, MODE_ATTENTION, seed=seed,
                          steps=steps, eval_episodes=1)
    out = {}
    for name, meta in (("tbptt", tbptt.meta), ("rbp", rbp_arm.meta)):
        out[name + "_at_T"] = evaluate(
            meta, base, world, ep_cfg, eval_episodes, model_cfg=model,
            seed=seed + 777, unroll=(t_steps, alpha), workers=workers)
        out[name + "_converged"] = evaluate(
            meta, base, world, ep_cfg, eval_episodes, model_cfg=model,
            seed=seed + 777, workers=workers)
    return TruncationComparison(
        tbptt_at_T=out["tbptt_at_T"],
        tbptt_converged=out["tbptt_converged"],
        rbp_at_T=out["rbp_at_T"],
        rbp_converged=out["rbp_converged"],
        t_steps=t_steps,
        alpha=alpha,
    )
