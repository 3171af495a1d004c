"""gradleak: gradient-leakage attacks, defenses and error bounds on
two-layer random networks.

The package treats the gradient a training client shares as the output of
a known forward map applied to the unknown batch, and studies how well the
batch can be recovered: a moment-based reconstruction attack, an
optimization-based gradient-matching attack, six defense transforms, the
Cramer-Rao limits each defense implies, a Gaussian-mechanism privacy
calculator, and a reproducible sweep harness tying them together.
"""
from .activations import Activation, HermiteMoments, hermite_moments, make_activation
from .bounds import (
    BoundReport,
    SensitivityEstimate,
    bound_under_defense,
    cramer_rao,
    dp_delta,
    dp_lambda_star,
    estimate_sensitivity,
    required_sigma,
)
from .defenses import (
    ClipDefense,
    DefenseRecord,
    DropoutDefense,
    LocalAggregationDefense,
    NoiseDefense,
    PruneRatioDefense,
    PruneThresholdDefense,
    SecureAggregationDefense,
    apply_clip,
    apply_dropout,
    apply_noise,
    apply_prune_ratio,
    apply_prune_threshold,
    compose,
    dp_sgd_preset,
    local_aggregation,
    secure_aggregate,
)
from .gradmatch import GradMatchConfig, OptimizerConfig, feature_regularizer, grad_match_attack, grad_match_loss
from .harness import (
    ExperimentConfig,
    TrialRecord,
    aggregate_rows,
    bound_for_observation,
    defense_score,
    run_trial,
    sweep,
    utility_loss,
)
from .metrics import min_perm_distance
from .network import (
    DataBatch,
    GradientObservation,
    NetworkParams,
    forward,
    gradient,
    gradient_input_vjp,
    input_jacobian,
    sample_batch,
    sample_params,
)
from .tensor_attack import (
    MomentEstimates,
    ReconstructionResult,
    TensorAttackConfig,
    build_moment_matrix,
    build_projected_tensor,
    decompose_tensor,
    estimate_subspace,
    score_reconstruction,
    tensor_attack,
)

__version__ = "0.1.0"
