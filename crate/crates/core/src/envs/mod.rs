//! Experiment environments and their configuration.

pub mod foraging;
pub mod matrix;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::game::Environment;

pub use foraging::{foraging_step, Foraging, ForagingSpec, ForagingState};
pub use matrix::{
    coordination_reward, penalty_game_reward, toy_team_reward, MatrixGame, MatrixGameSpec, Payoff,
    DEFAULT_COORDINATION_TABLE,
};

/// Environment selection as it appears in experiment configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvConfig {
    Coordination {
        #[serde(default = "default_table")]
        payoff: [[f64; 2]; 2],
    },
    Penalty {
        n_agents: usize,
        n_actions: usize,
    },
    ToyTeam,
    Foraging(ForagingSpec),
}

fn default_table() -> [[f64; 2]; 2] {
    DEFAULT_COORDINATION_TABLE
}

impl EnvConfig {
    pub fn build(&self, discount: f64) -> Result<Box<dyn Environment + Send>> {
        Ok(match self {
            EnvConfig::Coordination { payoff } => Box::new(MatrixGame::new(
                MatrixGameSpec::coordination(*payoff),
                discount,
            )?),
            EnvConfig::Penalty {
                n_agents,
                n_actions,
            } => Box::new(MatrixGame::new(
                MatrixGameSpec::penalty(*n_agents, *n_actions),
                discount,
            )?),
            EnvConfig::ToyTeam => Box::new(MatrixGame::new(MatrixGameSpec::toy_team(), discount)?),
            EnvConfig::Foraging(spec) => Box::new(Foraging::new(spec.clone(), discount)?),
        })
    }

    /// Short name used in result files.
    pub fn name(&self) -> &'static str {
        match self {
            EnvConfig::Coordination { .. } => "coordination",
            EnvConfig::Penalty { .. } => "penalty",
            EnvConfig::ToyTeam => "toy_team",
            EnvConfig::Foraging(_) => "foraging",
        }
    }

    pub fn n_agents(&self) -> usize {
        match self {
            EnvConfig::Coordination { .. } => 2,
            EnvConfig::Penalty { n_agents, .. } => *n_agents,
            EnvConfig::ToyTeam => 3,
            EnvConfig::Foraging(spec) => spec.n_agents,
        }
    }

    pub fn n_actions(&self) -> usize {
        match self {
            EnvConfig::Coordination { .. } | EnvConfig::ToyTeam => 2,
            EnvConfig::Penalty { n_actions, .. } => *n_actions,
            EnvConfig::Foraging(_) => foraging::N_ACTIONS,
        }
    }

    /// Whether evaluation should record per-agent action probabilities.
    pub fn is_matrix_game(&self) -> bool {
        !matches!(self, EnvConfig::Foraging(_))
    }
}
