//! Markov-game model, trajectories and rollouts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::StochasticPolicy;
use crate::rng::SeededRng;

/// Static description of a cooperative Markov game.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GameSpec {
    pub n_agents: usize,
    pub action_counts: Vec<usize>,
    pub observation_dims: Vec<usize>,
    pub discount: f64,
    pub horizon: usize,
}

impl GameSpec {
    pub fn new(
        action_counts: Vec<usize>,
        observation_dims: Vec<usize>,
        discount: f64,
        horizon: usize,
    ) -> Result<Self> {
        let spec = Self {
            n_agents: action_counts.len(),
            action_counts,
            observation_dims,
            discount,
            horizon,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_agents < 2 {
            return Err(Error::Config(format!(
                "a game needs at least 2 agents, got {}",
                self.n_agents
            )));
        }
        if self.action_counts.len() != self.n_agents || self.observation_dims.len() != self.n_agents
        {
            return Err(Error::Config(
                "per-agent vectors must have n_agents entries".into(),
            ));
        }
        if let Some(&a) = self.action_counts.iter().find(|&&a| a < 2) {
            return Err(Error::Config(format!(
                "every agent needs ≥ 2 actions, got {a}"
            )));
        }
        if !(0.0..1.0).contains(&self.discount) {
            return Err(Error::Config(format!(
                "discount must lie in [0, 1), got {}",
                self.discount
            )));
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be positive".into()));
        }
        Ok(())
    }
}

/// One action index per agent.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct JointAction(pub Vec<usize>);

impl JointAction {
    pub fn new(actions: Vec<usize>, action_counts: &[usize]) -> Result<Self> {
        let joint = JointAction(actions);
        joint.validate(action_counts)?;
        Ok(joint)
    }

    pub fn validate(&self, action_counts: &[usize]) -> Result<()> {
        if self.0.len() != action_counts.len() {
            return Err(Error::Input(format!(
                "joint action has {} entries for {} agents",
                self.0.len(),
                action_counts.len()
            )));
        }
        for (i, (&a, &n)) in self.0.iter().zip(action_counts).enumerate() {
            if a >= n {
                return Err(Error::Input(format!(
                    "agent {i} action {a} out of range [0, {n})"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn actions(&self) -> &[usize] {
        &self.0
    }

    /// The other agents' actions `a_{-i}`, in ascending agent order.
    pub fn others(&self, agent: usize) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != agent)
            .map(|(_, &a)| a)
            .collect()
    }

    /// Rebuild a joint action from agent `agent`'s action and `a_{-i}`.
    pub fn splice(agent: usize, own: usize, others: &[usize]) -> Vec<usize> {
        let mut joint = Vec::with_capacity(others.len() + 1);
        joint.extend_from_slice(&others[..agent]);
        joint.push(own);
        joint.extend_from_slice(&others[agent..]);
        joint
    }
}

/// One environment step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    /// Global state features seen by the centralised critic.
    pub state: Vec<f64>,
    pub observations: Vec<Vec<f64>>,
    pub joint_action: JointAction,
    pub reward: f64,
    /// `None` when `terminal`.
    pub next_state: Option<Vec<f64>>,
    pub next_observations: Option<Vec<Vec<f64>>>,
    pub terminal: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
    pub seed: u64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn rewards(&self) -> impl Iterator<Item = f64> + '_ {
        self.transitions.iter().map(|t| t.reward)
    }

    /// Every step's next state equals the following step's state.
    pub fn is_contiguous(&self) -> bool {
        self.transitions.windows(2).all(|w| {
            !w[0].terminal
                && w[0].next_state.as_ref() == Some(&w[1].state)
                && w[0].next_observations.as_ref() == Some(&w[1].observations)
        })
    }
}

/// Outcome of applying a joint action.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub terminal: bool,
}

/// A fully cooperative multi-agent environment.
pub trait Environment {
    fn spec(&self) -> &GameSpec;

    /// Start a new episode.
    fn reset(&mut self, rng: &mut SeededRng);

    /// Global state features of the current state.
    fn state_features(&self) -> Vec<f64>;

    /// One local observation per agent.
    fn observations(&self) -> Vec<Vec<f64>>;

    fn step(&mut self, joint: &JointAction) -> Result<StepOutcome>;

    /// Shared reward of a joint action when the game is a stateless one-shot
    /// game with a closed-form payoff; `None` otherwise.
    fn one_shot_payoff(&self, _joint: &[usize]) -> Option<f64> {
        None
    }
}

impl<E: Environment + ?Sized> Environment for Box<E> {
    fn spec(&self) -> &GameSpec {
        (**self).spec()
    }
    fn reset(&mut self, rng: &mut SeededRng) {
        (**self).reset(rng)
    }
    fn state_features(&self) -> Vec<f64> {
        (**self).state_features()
    }
    fn observations(&self) -> Vec<Vec<f64>> {
        (**self).observations()
    }
    fn step(&mut self, joint: &JointAction) -> Result<StepOutcome> {
        (**self).step(joint)
    }
    fn one_shot_payoff(&self, joint: &[usize]) -> Option<f64> {
        (**self).one_shot_payoff(joint)
    }
}

/// Check that a joint policy is compatible with a game.
pub fn check_joint_policy<P: StochasticPolicy>(spec: &GameSpec, joint_policy: &[P]) -> Result<()> {
    if joint_policy.len() != spec.n_agents {
        return Err(Error::Config(format!(
            "{} policies for {} agents",
            joint_policy.len(),
            spec.n_agents
        )));
    }
    for (i, (p, &n)) in joint_policy.iter().zip(&spec.action_counts).enumerate() {
        if p.n_actions() != n {
            return Err(Error::Config(format!(
                "policy of agent {i} has {} actions, environment expects {n}",
                p.n_actions()
            )));
        }
    }
    Ok(())
}

/// Sample every agent's action from its own policy at its local observation.
pub fn sample_joint_action<P: StochasticPolicy>(
    joint_policy: &[P],
    observations: &[Vec<f64>],
    rng: &mut SeededRng,
) -> Result<JointAction> {
    joint_policy
        .iter()
        .zip(observations)
        .map(|(p, o)| p.sample_action(o, rng))
        .collect::<Result<Vec<_>>>()
        .map(JointAction)
}

/// Reset `env` and play one episode of at most `horizon` steps.
///
/// Both the reset and the action draws consume `rng`.
pub fn rollout<E, P>(
    env: &mut E,
    joint_policy: &[P],
    horizon: usize,
    rng: &mut SeededRng,
) -> Result<Trajectory>
where
    E: Environment + ?Sized,
    P: StochasticPolicy,
{
    check_joint_policy(env.spec(), joint_policy)?;
    let seed = rng.seed();
    let mut transitions = Vec::with_capacity(horizon.min(1024));
    if horizon == 0 {
        return Ok(Trajectory { transitions, seed });
    }
    env.reset(rng);
    let mut state = env.state_features();
    let mut observations = env.observations();
    for _ in 0..horizon {
        let joint_action = sample_joint_action(joint_policy, &observations, rng)?;
        let outcome = env.step(&joint_action)?;
        if !outcome.reward.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite reward {}",
                outcome.reward
            )));
        }
        let (next_state, next_observations) = if outcome.terminal {
            (None, None)
        } else {
            (Some(env.state_features()), Some(env.observations()))
        };
        transitions.push(Transition {
            state: std::mem::take(&mut state),
            observations: std::mem::take(&mut observations),
            joint_action,
            reward: outcome.reward,
            next_state: next_state.clone(),
            next_observations: next_observations.clone(),
            terminal: outcome.terminal,
        });
        match (next_state, next_observations) {
            (Some(s), Some(o)) => {
                state = s;
                observations = o;
            }
            _ => break,
        }
    }
    Ok(Trajectory { transitions, seed })
}

/// `Σ_t γ^t r_t`.
pub fn discounted_return(trajectory: &Trajectory, discount: f64) -> f64 {
    let mut total = 0.0;
    let mut weight = 1.0;
    for r in trajectory.rewards() {
        total += weight * r;
        weight *= discount;
    }
    total
}
