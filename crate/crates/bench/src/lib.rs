//! Benchmark fixtures shared by the criterion targets.

use perla_core::envs::{EnvConfig, DEFAULT_COORDINATION_TABLE};
use perla_core::policy::SoftmaxPolicy;
use perla_core::trainer::{Algo, TrainConfig};

/// `n` uniform softmax agents over `actions` actions.
pub fn uniform_agents(n: usize, actions: usize) -> Vec<SoftmaxPolicy> {
    vec![SoftmaxPolicy::new(actions); n]
}

/// A short coordination-game run.
pub fn short_run(algo: Algo, k: usize) -> TrainConfig {
    let mut c = TrainConfig::new(
        EnvConfig::Coordination {
            payoff: DEFAULT_COORDINATION_TABLE,
        },
        algo,
    );
    c.k = k;
    c.total_steps = 640;
    c.eval_interval = 10;
    c
}
