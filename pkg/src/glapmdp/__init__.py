"""Linear adversarial MDP benchmark library.

Subpackages: `core` (model + exact oracles), `optdesign` (G-optimal design),
`policycover` (softmax policy nets), `featureest` (visitation estimation),
`glap` (exponential-weights policy hedge), `bench` (experiment harness).
"""

from .core import (
    LinearMDP,
    LossSequence,
    Policy,
    Simulator,
    Trajectory,
    VisitationProfile,
    exact_value,
    exact_visitation,
    exploratory_lambda,
    make_loss_sequence,
    make_random_mdp,
    make_random_tabular_mdp,
    make_tabular_mdp,
    policy_covariance,
    simulate_episode,
    validate_mdp,
)
from .featureest import (
    FeatureTable,
    certify_accuracy,
    collect_exploration_data,
    estimate_feature_visitations,
    estimate_transition_operator,
    exact_feature_table,
)
from .glap import GlapConfig, HedgeState, glap_init, glap_update, run_glap, sample_policy
from .optdesign import DesignWeights, g_optimal_design, mixed_design
from .policycover import (
    PolicyCover,
    SoftmaxPolicy,
    average_loss,
    best_policy_brute_force,
    build_cover,
    softmax_to_tabular,
)

__version__ = "0.1.0"
