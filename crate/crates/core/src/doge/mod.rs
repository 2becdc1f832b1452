//! Domain reweighting: alignment scores, the mirror-descent weight update,
//! the proxy training loops and curriculum extraction.

mod proxy;
mod scores;
mod trajectory;
mod weights;

pub use proxy::{
    combine_gradients, per_domain_gradients, reweighted_step, run_proxy_ood, run_proxy_universal,
    target_gradient_universal, DogeHyperparams, ProxyOutcome, TargetEstimate,
};
pub use scores::{generalization_scores, influence_decomposition, sum_gradients, GeneralizationScores, ScoreTarget};
pub use trajectory::{average_weights, Curriculum, Stage, TrajectoryStep, WeightTrajectory, WeightsFile};
pub use weights::{update_domain_weights, DomainWeights, SIMPLEX_TOL};
