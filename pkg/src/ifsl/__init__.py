"""Incremental few-shot learning with attractor-regularized episodic training.

A frozen base classifier is augmented, episode by episode, with fast weights
for a handful of novel classes. The fast weights are trained to convergence
under a meta-learned attractor penalty, and the meta parameters are updated
by backpropagating the joint base+novel query loss through the inner
optimization's fixed point with a damped Neumann series.
"""

from .attractor import (
    AttractorSet,
    DegenerateInputError,
    MetaParams,
    MLPWeights,
    RegularizerEval,
    assemble_attractors,
    compute_attention,
    init_meta_params,
    load_meta_params,
    memory_from_base,
    regularizer,
    save_meta_params,
    static_regularizer,
)
from .blockfile import (
    BadMagicError,
    DimensionMismatchError,
    FileFormatError,
    TruncatedFileError,
)
from .classifier import (
    BaseClassifier,
    FastWeights,
    LossValue,
    episodic_loss,
    fast_forward,
    init_fast_weights,
    joint_logits,
    joint_predict,
    load_base_classifier,
    pretrain_base,
    query_loss,
    save_base_classifier,
)
from .embeddings import (
    EmbeddingTable,
    Episode,
    EpisodeConfig,
    LabeledExample,
    SyntheticWorld,
    examples_to_arrays,
    generate_synthetic_world,
    load_embeddings,
    materialize_table,
    sample_episode,
    save_embeddings,
)
from .implicit_grad import (
    HyperGradient,
    RBPConfig,
    fd_hypergradient,
    fixed_point_hypergradient,
    neumann_rbp,
    rbp_hypergradient,
    scalar_bilevel_probe,
    tbptt_hypergradient,
    unrolled_hypergradient,
    vjp_step_map,
)
from .inner_solver import (
    SolveResult,
    SolverConfig,
    estimate_gd_alpha,
    minimize_gd,
    minimize_lbfgs,
    power_iteration_lambda_max,
    step_map_f,
)
from .meta import (
    AdamState,
    MetaTrainConfig,
    MetricsReport,
    adam_step,
    baseline_imprint,
    baseline_protonet,
    evaluate,
    evaluate_baseline,
    init_adam,
    meta_train,
)
from .objective import EpisodeObjective, ModelConfig, solve_episode
from .util import NonFiniteError

__version__ = "0.1.0"
