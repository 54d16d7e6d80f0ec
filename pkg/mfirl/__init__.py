"""mfirl - inverse reinforcement learning for mean-field games with latent contexts"""

from .core import (
    MeanField,
    MeanFieldFlow,
    PolicySlice,
    PolicyFlow,
    Trajectory,
    TrajectoryBatch,
    TabularEnv,
    Simulator,
    mkv_step,
    rollout,
    sample_trajectory,
    enumerate_trajectories,
    trajectory_log_prob,
    consistency_residual,
)
from .envs import build_env, build_random_env, describe
from .exceptions import (
    MfirlError,
    ContractViolationError,
    EnumerationCapError,
    NonConvergenceError,
    UnknownEnvironmentError,
    StaleCacheError,
    NonFiniteGradientError,
    DegenerateContextError,
    ConfigurationError,
    CheckpointIntegrityError,
    DataError,
)
from .solver import (
    Ermfne,
    DemonstrationSet,
    soft_best_response,
    solve_ermfne,
    solve_with_backoff,
    generate_demonstrations,
)
from .approximator import Mlp, FeatureCodec, AdamState, adam_step
from .mfairl import MfairlConfig, train_mfairl, empirical_mean_field, exact_sampler
from .pemmfirl import (
    PemmfirlConfig,
    PemmfirlState,
    ContextInferenceModel,
    infer_context,
    conditional_empirical_mean_field,
    kappa,
    meta_train,
    meta_test,
    meta_test_records,
    MetaTestRecord,
    align_contexts,
    slot_alignment,
    learned_equilibria,
)
from .metrics import policy_deviation, weighted_policy_deviation, expected_return_gap, EvaluationReport
from .config import ExperimentConfig, load_config

__version__ = "0.1.0"
__all__ = [
    "MeanField",
    "MeanFieldFlow",
    "PolicySlice",
    "PolicyFlow",
    "Trajectory",
    "TrajectoryBatch",
    "TabularEnv",
    "Simulator",
    "mkv_step",
    "rollout",
    "sample_trajectory",
    "enumerate_trajectories",
    "trajectory_log_prob",
    "consistency_residual",
    "build_env",
    "build_random_env",
    "describe",
    "MfirlError",
    "ContractViolationError",
    "EnumerationCapError",
    "NonConvergenceError",
    "UnknownEnvironmentError",
    "StaleCacheError",
    "NonFiniteGradientError",
    "DegenerateContextError",
    "ConfigurationError",
    "CheckpointIntegrityError",
    "DataError",
    "Ermfne",
    "DemonstrationSet",
    "soft_best_response",
    "solve_ermfne",
    "solve_with_backoff",
    "generate_demonstrations",
    "Mlp",
    "FeatureCodec",
    "AdamState",
    "adam_step",
    "MfairlConfig",
    "train_mfairl",
    "empirical_mean_field",
    "exact_sampler",
    "PemmfirlConfig",
    "PemmfirlState",
    "ContextInferenceModel",
    "infer_context",
    "conditional_empirical_mean_field",
    "kappa",
    "meta_train",
    "meta_test",
    "meta_test_records",
    "MetaTestRecord",
    "align_contexts",
    "slot_alignment",
    "learned_equilibria",
    "policy_deviation",
    "weighted_policy_deviation",
    "expected_return_gap",
    "EvaluationReport",
    "ExperimentConfig",
    "load_config",
]
