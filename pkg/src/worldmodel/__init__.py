"""Object-based world modeling in semi-static environments.

A clustering approach to multi-object data association: objects are mixture
components that survive, move, and appear between epochs; detections carry
type and pose noise, clutter, and missed detections.  Inference is offered
as constrained blocked collapsed Gibbs sampling, iterated conditional modes,
Metropolis-Hastings over track partitions, and a two-stage combination.
"""

from .model import (
    Dataset,
    InvalidInputError,
    ModelConfig,
    Observation,
    Region,
    ViewFrame,
    fp_obs_log_density,
    obs_log_density,
    resolve_world_volume,
    survival_prob,
    transition_log_density,
)
from .tracks import (
    PoseBelief,
    Track,
    TypePosterior,
    kalman_filter,
    predictive_dormant,
    predictive_instantiated,
    predictive_new,
    rts_smooth,
    track_marginal_loglik,
    type_posterior_update,
    type_predictive,
)
from .association import (
    CorrespondenceVector,
    WorldState,
    case_log_weights,
    detection_prob,
    gibbs_sweep,
    global_log_score,
    sample_view,
    state_from_assignments,
    view_joint_log_prob,
)
from .icm import PayoffMatrix, build_payoff, icm_until_convergence, solve_assignment
from .mcmcda import (
    ChainState,
    ClusterSummary,
    mh_step,
    propose,
    run_mcmcda,
    two_stage,
)
from .simulator import SimConfig, default_model_config, generative_ddpmm_sample, simulate

__version__ = "0.1.0"
