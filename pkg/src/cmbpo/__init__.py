"""Constrained model-based policy optimization toolkit.

Exact finite-CMDP analysis of model-based policy improvement bounds, a
probabilistic-ensemble training pipeline with uncertainty-budgeted model
usage, constrained trust-region policy updates, and desk-scale benchmark
tasks, driven by a config-file CLI.
"""

from .cmdp import (
    PolicyTable,
    StateDistribution,
    TabularCMDP,
    divergence_extrema,
    exact_return,
    exact_value_advantage,
    kl_discrete,
    pinsker_bound,
    stationary_distribution,
    tv_distance,
)
from .analysis import (
    BoundaryReport,
    LemmaReport,
    boundary_report,
    error_term_check,
    lemma_state_dist_check,
    random_instance,
    relative_performance,
    return_identity_check,
    safety_certificate,
)
from .dynamics import (
    EnsembleModel,
    GaussianPrediction,
    ModelTrainConfig,
    forward,
    load_ensemble,
    model_loss,
    model_loss_grad,
    predict_next,
    save_ensemble,
    train_ensemble,
)
from .uncertainty import (
    UncertaintyBudget,
    calibrate_budgets,
    ensemble_disagreement,
    gaussian_kl,
    horizon_gate,
    update_mixing,
)
from .rollouts import (
    ReplayBuffer,
    TaggedTrajectory,
    TransitionBatch,
    boltzmann_weights,
    branched_rollouts,
    mix_batches,
)
from .cpo import (
    CpoConfig,
    conjugate_gradient,
    cpo_step,
    fisher_vector_product,
    gae_advantages,
    line_search,
    normalize_advantages,
    surrogate_grads,
    value_fit,
)
from .policy import GaussianMlpPolicy, SoftmaxTablePolicy, ValueFunction
from .envs import EnvSpec, GridworldEnv, PointCircleEnv, hazard_gridworld, make_env
from .config import ExperimentConfig, load_config
from .training import Trainer, train

__version__ = "0.1.0"
