//! Stateless one-shot matrix games.
//!
//! Action index 0 is `l` in the coordination game, `A` in the penalty game and
//! `0` in the toy team game. Every agent observes the constant vector `[1.0]`
//! and the global state features are the same constant.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{Environment, GameSpec, JointAction, StepOutcome};
use crate::rng::SeededRng;

pub const LEFT: usize = 0;
pub const RIGHT: usize = 1;

/// Default coordination payoffs, indexed `[agent 0][agent 1]`.
pub const DEFAULT_COORDINATION_TABLE: [[f64; 2]; 2] = [[1.0, -1.0], [-1.0, 0.5]];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Payoff {
    /// 2×2 coordination game table.
    Coordination([[f64; 2]; 2]),
    /// All-`A` pays 8, exactly one defector from `A` pays −12, anything else 0.
    Penalty,
    /// Three binary agents: all-0 pays 1, all-1 pays 3, anything else 0.
    ToyTeam,
    /// Dense tensor in row-major order, agent 0 most significant.
    Dense(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixGameSpec {
    pub n_agents: usize,
    pub n_actions: usize,
    pub payoff: Payoff,
}

impl MatrixGameSpec {
    pub fn coordination(table: [[f64; 2]; 2]) -> Self {
        Self {
            n_agents: 2,
            n_actions: 2,
            payoff: Payoff::Coordination(table),
        }
    }

    pub fn penalty(n_agents: usize, n_actions: usize) -> Self {
        Self {
            n_agents,
            n_actions,
            payoff: Payoff::Penalty,
        }
    }

    pub fn toy_team() -> Self {
        Self {
            n_agents: 3,
            n_actions: 2,
            payoff: Payoff::ToyTeam,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_agents < 2 || self.n_actions < 2 {
            return Err(Error::Config(format!(
                "matrix game needs ≥ 2 agents and ≥ 2 actions, got {} × {}",
                self.n_agents, self.n_actions
            )));
        }
        match &self.payoff {
            Payoff::Coordination(table) => {
                if self.n_agents != 2 || self.n_actions != 2 {
                    return Err(Error::Config(
                        "coordination game is 2 agents × 2 actions".into(),
                    ));
                }
                if table.iter().flatten().any(|x| !x.is_finite()) {
                    return Err(Error::Config("non-finite coordination payoff".into()));
                }
            }
            Payoff::ToyTeam => {
                if self.n_agents != 3 || self.n_actions != 2 {
                    return Err(Error::Config(
                        "toy team game is 3 agents × 2 actions".into(),
                    ));
                }
            }
            Payoff::Penalty => {}
            Payoff::Dense(values) => {
                let expected = self
                    .n_actions
                    .checked_pow(self.n_agents as u32)
                    .ok_or_else(|| Error::Config("payoff tensor too large".into()))?;
                if values.len() != expected {
                    return Err(Error::Config(format!(
                        "dense payoff has {} entries, expected {expected}",
                        values.len()
                    )));
                }
                if values.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Config("non-finite dense payoff".into()));
                }
            }
        }
        Ok(())
    }

    pub fn reward(&self, joint: &[usize]) -> Result<f64> {
        match &self.payoff {
            Payoff::Coordination(table) => coordination_reward(joint, table),
            Payoff::Penalty => penalty_game_reward(joint, self.n_agents, self.n_actions),
            Payoff::ToyTeam => toy_team_reward(joint),
            Payoff::Dense(values) => {
                check_range(joint, self.n_agents, self.n_actions)?;
                Ok(values[flat_index(joint, self.n_actions)])
            }
        }
    }

    /// Payoff tensor with `n_actions^n_agents` entries.
    pub fn materialise(&self) -> Result<Vec<f64>> {
        let total = self
            .n_actions
            .checked_pow(self.n_agents as u32)
            .ok_or_else(|| Error::Config("payoff tensor too large".into()))?;
        (0..total)
            .map(|idx| self.reward(&unflatten(idx, self.n_agents, self.n_actions)))
            .collect()
    }
}

fn check_range(joint: &[usize], n_agents: usize, n_actions: usize) -> Result<()> {
    if joint.len() != n_agents {
        return Err(Error::Input(format!(
            "joint action of length {} for {n_agents} agents",
            joint.len()
        )));
    }
    if let Some(&a) = joint.iter().find(|&&a| a >= n_actions) {
        return Err(Error::Input(format!(
            "action {a} out of range for {n_actions} actions"
        )));
    }
    Ok(())
}

/// Row-major index of a joint action, agent 0 most significant.
pub fn flat_index(joint: &[usize], n_actions: usize) -> usize {
    joint.iter().fold(0, |acc, &a| acc * n_actions + a)
}

pub fn unflatten(mut index: usize, n_agents: usize, n_actions: usize) -> Vec<usize> {
    let mut joint = vec![0; n_agents];
    for slot in joint.iter_mut().rev() {
        *slot = index % n_actions;
        index /= n_actions;
    }
    joint
}

pub fn coordination_reward(joint: &[usize], table: &[[f64; 2]; 2]) -> Result<f64> {
    check_range(joint, 2, 2)?;
    Ok(table[joint[0]][joint[1]])
}

pub fn penalty_game_reward(joint: &[usize], n_agents: usize, n_actions: usize) -> Result<f64> {
    check_range(joint, n_agents, n_actions)?;
    let on_a = joint.iter().filter(|&&a| a == 0).count();
    Ok(if on_a == n_agents {
        8.0
    } else if on_a + 1 == n_agents {
        -12.0
    } else {
        0.0
    })
}

pub fn toy_team_reward(joint: &[usize]) -> Result<f64> {
    check_range(joint, 3, 2)?;
    Ok(if joint.iter().all(|&a| a == 0) {
        1.0
    } else if joint.iter().all(|&a| a == 1) {
        3.0
    } else {
        0.0
    })
}

/// One-shot matrix game as an environment: every episode is a single step.
#[derive(Clone, Debug)]
pub struct MatrixGame {
    matrix: MatrixGameSpec,
    spec: GameSpec,
    done: bool,
}

impl MatrixGame {
    pub fn new(matrix: MatrixGameSpec, discount: f64) -> Result<Self> {
        matrix.validate()?;
        let spec = GameSpec::new(
            vec![matrix.n_actions; matrix.n_agents],
            vec![1; matrix.n_agents],
            discount,
            1,
        )?;
        Ok(Self {
            matrix,
            spec,
            done: false,
        })
    }

    pub fn matrix(&self) -> &MatrixGameSpec {
        &self.matrix
    }
}

impl Environment for MatrixGame {
    fn spec(&self) -> &GameSpec {
        &self.spec
    }

    fn reset(&mut self, _rng: &mut SeededRng) {
        self.done = false;
    }

    fn state_features(&self) -> Vec<f64> {
        vec![1.0]
    }

    fn observations(&self) -> Vec<Vec<f64>> {
        vec![vec![1.0]; self.matrix.n_agents]
    }

    fn step(&mut self, joint: &JointAction) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::Input("step after terminal; call reset".into()));
        }
        let reward = self.matrix.reward(joint.actions())?;
        self.done = true;
        Ok(StepOutcome {
            reward,
            terminal: true,
        })
    }

    fn one_shot_payoff(&self, joint: &[usize]) -> Option<f64> {
        self.matrix.reward(joint).ok()
    }
}
