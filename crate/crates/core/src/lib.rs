//! Multi-agent policy-gradient learning with a centralised critic marginalised
//! over the other agents' policies.

pub mod envs;
pub mod error;
pub mod estimators;
pub mod game;
pub mod nn;
pub mod policy;
pub mod rng;
pub mod trainer;
pub mod variance_lab;

pub use error::{Error, Result};
pub use estimators::{
    gradient_ctde, gradient_dt, gradient_perla, marginalized_q, marginalized_value, perla_td_error,
    sample_counterfactual_joint_actions, CounterfactualSamples, Critic, EstimatorKind,
};
pub use game::{
    discounted_return, rollout, Environment, GameSpec, JointAction, StepOutcome, Trajectory,
    Transition,
};
pub use nn::{adam_step, AdamState, MlpCritic};
pub use policy::{ActionDistribution, ObsKey, PolicyGradient, SoftmaxPolicy, StochasticPolicy};
pub use rng::SeededRng;
pub use trainer::{train, train_seed, Algo, TrainConfig, TrainingReport};
pub use variance_lab::{
    check_bounds, check_theorem1, measure_estimator_variance, BoundCheck, VarianceReport,
};
