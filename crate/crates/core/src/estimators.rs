//! Counterfactual joint-action sampling, critic marginalisation and the three
//! policy-gradient estimators.
//!
//! For agent `i` the marginalised action value is the mean of the centralised
//! critic over `k` draws of the other agents' actions from their current
//! policies, with agent `i`'s own action held fixed:
//!
//! ```text
//! Q̂_i(s, a_i) = (1/k) Σ_j Q(s, a_i, a_{-i}^{(j)}),   a_{-i}^{(j)} ~ π_{-i}(· | τ_{-i})
//! ```
//!
//! The CT-DE estimator weights each score by the critic at the executed joint
//! action, the decentralised estimator by the exact marginal `Q̃_i(s, a_i)`,
//! and the marginalised estimator by `Q̂_i`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{Environment, JointAction, Trajectory, Transition};
use crate::policy::{PolicyGradient, StochasticPolicy};
use crate::rng::SeededRng;

/// Which gradient estimator to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EstimatorKind {
    /// Critic at the executed joint action.
    Ctde,
    /// Exact marginal critic (needs an enumeration oracle).
    Dt,
    /// Monte-Carlo marginal critic with `k` counterfactual samples.
    Perla { k: usize },
}

impl EstimatorKind {
    pub fn validate(&self) -> Result<()> {
        match self {
            EstimatorKind::Perla { k: 0 } => Err(Error::Input("PERLA needs k ≥ 1".into())),
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            EstimatorKind::Ctde => "ctde".into(),
            EstimatorKind::Dt => "dt".into(),
            EstimatorKind::Perla { k } => format!("perla_k{k}"),
        }
    }

    /// Marginalisation sample count; CT-DE behaves as one pinned sample.
    pub fn k(&self) -> Option<usize> {
        match self {
            EstimatorKind::Ctde => Some(1),
            EstimatorKind::Dt => None,
            EstimatorKind::Perla { k } => Some(*k),
        }
    }
}

/// `k` draws of the other agents' actions for agent `agent`.
#[derive(Clone, Debug, PartialEq)]
pub struct CounterfactualSamples {
    pub agent: usize,
    /// Agent `agent`'s own action at the observation set (held fixed).
    pub own_action: usize,
    /// `k` tuples of `N - 1` actions, other agents in ascending order.
    pub others: Vec<Vec<usize>>,
    pub observations: Vec<Vec<f64>>,
}

impl CounterfactualSamples {
    /// One sample equal to the executed `a_{-i}`.
    pub fn pinned(agent: usize, joint: &JointAction, observations: &[Vec<f64>]) -> Self {
        Self {
            agent,
            own_action: joint.0[agent],
            others: vec![joint.others(agent)],
            observations: observations.to_vec(),
        }
    }

    pub fn k(&self) -> usize {
        self.others.len()
    }

    /// Joint action of sample `j` with agent `agent` playing `own`.
    pub fn joint(&self, j: usize, own: usize) -> Vec<usize> {
        JointAction::splice(self.agent, own, &self.others[j])
    }
}

/// Centralised critic queried at a state, for an agent, at a full joint action.
///
/// A value-style critic that does not condition on the querying agent's own
/// action simply ignores `joint[agent]`.
pub trait Critic {
    fn evaluate(&self, state: &[f64], agent: usize, joint: &[usize]) -> Result<f64>;
}

impl<C: Critic + ?Sized> Critic for &C {
    fn evaluate(&self, state: &[f64], agent: usize, joint: &[usize]) -> Result<f64> {
        (**self).evaluate(state, agent, joint)
    }
}

/// Critic that returns a closed-form one-shot payoff regardless of the state.
pub struct PayoffCritic<F: Fn(&[usize]) -> Result<f64>>(pub F);

impl<F: Fn(&[usize]) -> Result<f64>> Critic for PayoffCritic<F> {
    fn evaluate(&self, _state: &[f64], _agent: usize, joint: &[usize]) -> Result<f64> {
        (self.0)(joint)
    }
}

/// Draw `k` independent tuples `a_{-i}`, each component from `π_j(· | τ_j)`.
pub fn sample_counterfactual_joint_actions<P: StochasticPolicy>(
    joint_policy: &[P],
    observations: &[Vec<f64>],
    agent: usize,
    own_action: usize,
    k: usize,
    rng: &mut SeededRng,
) -> Result<CounterfactualSamples> {
    if agent >= joint_policy.len() {
        return Err(Error::Input(format!(
            "agent {agent} out of range for {} agents",
            joint_policy.len()
        )));
    }
    if k == 0 {
        return Err(Error::Input(
            "need at least one counterfactual sample".into(),
        ));
    }
    if observations.len() != joint_policy.len() {
        return Err(Error::Input(format!(
            "{} observations for {} agents",
            observations.len(),
            joint_policy.len()
        )));
    }
    let dists = joint_policy
        .iter()
        .zip(observations)
        .enumerate()
        .filter(|&(j, _)| j != agent)
        .map(|(_, (p, o))| p.action_probabilities(o))
        .collect::<Result<Vec<_>>>()?;
    let others = (0..k)
        .map(|_| dists.iter().map(|d| d.sample(rng)).collect())
        .collect();
    Ok(CounterfactualSamples {
        agent,
        own_action,
        others,
        observations: observations.to_vec(),
    })
}

/// `Q̂_i(s, a_i)`: mean critic value over the counterfactual tuples.
pub fn marginalized_q<C: Critic + ?Sized>(
    critic: &C,
    state: &[f64],
    own_action: usize,
    samples: &CounterfactualSamples,
) -> Result<f64> {
    if samples.k() == 0 {
        return Err(Error::Input("empty counterfactual sample set".into()));
    }
    let mut total = 0.0;
    for j in 0..samples.k() {
        total += critic.evaluate(state, samples.agent, &samples.joint(j, own_action))?;
    }
    Ok(total / samples.k() as f64)
}

/// Marginalised value at `state`, with the agent's own recorded action.
pub fn marginalized_value<C: Critic + ?Sized>(
    critic: &C,
    state: &[f64],
    samples: &CounterfactualSamples,
) -> Result<f64> {
    marginalized_q(critic, state, samples.own_action, samples)
}

/// One-step TD error with both value terms marginalised:
/// `r + γ · V̂(s', samples_next) · [not terminal] − V̂(s, samples_current)`.
pub fn perla_td_error<C: Critic + ?Sized>(
    critic: &C,
    transition: &Transition,
    samples_current: &CounterfactualSamples,
    samples_next: Option<&CounterfactualSamples>,
    discount: f64,
) -> Result<f64> {
    let current = marginalized_value(critic, &transition.state, samples_current)?;
    let bootstrap = if transition.terminal {
        0.0
    } else {
        let next_state = transition
            .next_state
            .as_ref()
            .ok_or_else(|| Error::Input("non-terminal transition without next state".into()))?;
        let samples = samples_next.ok_or_else(|| {
            Error::Input("non-terminal transition needs next-state samples".into())
        })?;
        marginalized_value(critic, next_state, samples)?
    };
    Ok(transition.reward + discount * bootstrap - current)
}

fn weighted_score_sum<P: StochasticPolicy + ?Sized>(
    trajectory: &Trajectory,
    weights: &[f64],
    policy: &P,
    agent: usize,
    discount: f64,
) -> Result<PolicyGradient> {
    if weights.len() != trajectory.len() {
        return Err(Error::Input(format!(
            "{} critic values for a trajectory of {} steps",
            weights.len(),
            trajectory.len()
        )));
    }
    let mut grad = PolicyGradient::zeros();
    let mut gamma_t = 1.0;
    for (tr, &w) in trajectory.transitions.iter().zip(weights) {
        let obs = tr
            .observations
            .get(agent)
            .ok_or_else(|| Error::Input(format!("agent {agent} missing from transition")))?;
        let score = policy.log_prob_gradient(obs, tr.joint_action.0[agent])?;
        grad.add_scaled(&score, gamma_t * w);
        gamma_t *= discount;
    }
    Ok(grad)
}

/// `g^C = Σ_t γ^t Q(s^t, a^t) ∇ log π_i(a_i^t | τ_i^t)`.
pub fn gradient_ctde<P: StochasticPolicy + ?Sized>(
    trajectory: &Trajectory,
    q_values_per_step: &[f64],
    policy: &P,
    agent: usize,
    discount: f64,
) -> Result<PolicyGradient> {
    weighted_score_sum(trajectory, q_values_per_step, policy, agent, discount)
}

/// `g^D = Σ_t γ^t Q̃(s^t, a_i^t) ∇ log π_i(a_i^t | τ_i^t)`.
pub fn gradient_dt<P: StochasticPolicy + ?Sized>(
    trajectory: &Trajectory,
    qtilde_values_per_step: &[f64],
    policy: &P,
    agent: usize,
    discount: f64,
) -> Result<PolicyGradient> {
    weighted_score_sum(trajectory, qtilde_values_per_step, policy, agent, discount)
}

/// `g^P = Σ_t γ^t Q̂(s^t, a_i^t) ∇ log π_i(a_i^t | τ_i^t)` with fresh samples per step.
pub fn gradient_perla<C, P>(
    trajectory: &Trajectory,
    critic: &C,
    joint_policy: &[P],
    agent: usize,
    k: usize,
    discount: f64,
    rng: &mut SeededRng,
) -> Result<PolicyGradient>
where
    C: Critic + ?Sized,
    P: StochasticPolicy,
{
    let weights = trajectory
        .transitions
        .iter()
        .map(|tr| {
            let own = tr.joint_action.0[agent];
            let samples = sample_counterfactual_joint_actions(
                joint_policy,
                &tr.observations,
                agent,
                own,
                k,
                rng,
            )?;
            marginalized_q(critic, &tr.state, own, &samples)
        })
        .collect::<Result<Vec<_>>>()?;
    let policy = joint_policy
        .get(agent)
        .ok_or_else(|| Error::Input(format!("agent {agent} out of range")))?;
    weighted_score_sum(trajectory, &weights, policy, agent, discount)
}

/// Critic values at the executed joint actions of a trajectory.
pub fn executed_q_values<C: Critic + ?Sized>(
    trajectory: &Trajectory,
    critic: &C,
    agent: usize,
) -> Result<Vec<f64>> {
    trajectory
        .transitions
        .iter()
        .map(|tr| critic.evaluate(&tr.state, agent, &tr.joint_action.0))
        .collect()
}

/// Largest joint-action space [`exact_qtilde`] will enumerate.
pub const MAX_ENUMERATION: usize = 1 << 20;

/// Exact `Q̃_i(a_i) = E_{a_{-i} ~ π_{-i}}[r(a_i, a_{-i})]` for one-shot games.
pub fn exact_qtilde<E, P>(
    env: &E,
    joint_policy: &[P],
    observations: &[Vec<f64>],
    agent: usize,
    own_action: usize,
) -> Result<f64>
where
    E: Environment + ?Sized,
    P: StochasticPolicy,
{
    let counts = &env.spec().action_counts;
    if agent >= counts.len() || joint_policy.len() != counts.len() {
        return Err(Error::Input("agent or policy count mismatch".into()));
    }
    let probe: Vec<usize> = vec![0; counts.len()];
    if env.one_shot_payoff(&probe).is_none() {
        return Err(Error::Unsupported(
            "exact marginal critic needs a one-shot closed-form payoff".into(),
        ));
    }
    let other_counts: Vec<usize> = counts
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != agent)
        .map(|(_, &n)| n)
        .collect();
    let total = other_counts
        .iter()
        .try_fold(1usize, |acc, &n| acc.checked_mul(n))
        .filter(|&t| t <= MAX_ENUMERATION)
        .ok_or_else(|| Error::Unsupported("joint action space too large to enumerate".into()))?;
    let dists = joint_policy
        .iter()
        .zip(observations)
        .enumerate()
        .filter(|&(j, _)| j != agent)
        .map(|(_, (p, o))| p.action_probabilities(o))
        .collect::<Result<Vec<_>>>()?;
    let mut others = vec![0usize; other_counts.len()];
    let mut expectation = 0.0;
    for mut idx in 0..total {
        let mut prob = 1.0;
        for (slot, (&n, d)) in others.iter_mut().zip(other_counts.iter().zip(&dists)).rev() {
            *slot = idx % n;
            idx /= n;
            prob *= d.prob(*slot);
        }
        if prob == 0.0 {
            continue;
        }
        let joint = JointAction::splice(agent, own_action, &others);
        let r = env
            .one_shot_payoff(&joint)
            .ok_or_else(|| Error::Unsupported("payoff undefined".into()))?;
        expectation += prob * r;
    }
    Ok(expectation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::foraging::{Foraging, ForagingSpec};
    use crate::envs::matrix::{toy_team_reward, MatrixGame, MatrixGameSpec};
    use crate::policy::{ActionDistribution, ObsKey, SigmoidPolicy, SoftmaxPolicy};

    fn toy_critic() -> PayoffCritic<fn(&[usize]) -> Result<f64>> {
        PayoffCritic(toy_team_reward as fn(&[usize]) -> Result<f64>)
    }

    fn one_step(joint: Vec<usize>, reward: f64) -> Trajectory {
        Trajectory {
            transitions: vec![Transition {
                state: vec![1.0],
                observations: vec![vec![1.0]; joint.len()],
                joint_action: JointAction(joint),
                reward,
                next_state: None,
                next_observations: None,
                terminal: true,
            }],
            seed: 0,
        }
    }

    fn peaked(n: usize, action: usize) -> SoftmaxPolicy {
        let mut p = SoftmaxPolicy::new(n);
        let mut row = vec![-1e3; n];
        row[action] = 0.0;
        p.set_logits(&[1.0], row).unwrap();
        p
    }

    #[test]
    fn deterministic_others_give_identical_tuples() {
        let pols = vec![peaked(3, 2), peaked(3, 1), peaked(3, 0)];
        let obs = vec![vec![1.0]; 3];
        let s =
            sample_counterfactual_joint_actions(&pols, &obs, 0, 2, 50, &mut SeededRng::new(0, 0))
                .unwrap();
        assert_eq!(s.k(), 50);
        assert!(s.others.iter().all(|t| t == &vec![1, 0]));
    }

    #[test]
    fn sampling_errors() {
        let pols = vec![SoftmaxPolicy::new(2), SoftmaxPolicy::new(2)];
        let obs = vec![vec![1.0]; 2];
        let mut rng = SeededRng::new(0, 0);
        assert!(sample_counterfactual_joint_actions(&pols, &obs, 2, 0, 1, &mut rng).is_err());
        assert!(sample_counterfactual_joint_actions(&pols, &obs, 0, 0, 0, &mut rng).is_err());
        let one = sample_counterfactual_joint_actions(&pols, &obs, 1, 0, 1, &mut rng).unwrap();
        assert_eq!(one.k(), 1);
        assert_eq!(one.others[0].len(), 1);
    }

    #[test]
    fn uniform_pair_frequencies() {
        let pols = vec![SoftmaxPolicy::new(2); 3];
        let obs = vec![vec![1.0]; 3];
        let s = sample_counterfactual_joint_actions(
            &pols,
            &obs,
            0,
            0,
            10_000,
            &mut SeededRng::new(5, 0),
        )
        .unwrap();
        for a in 0..2 {
            for b in 0..2 {
                let f = s.others.iter().filter(|t| **t == vec![a, b]).count() as f64 / 1e4;
                assert!((f - 0.25).abs() <= 0.02, "({a},{b}) freq {f}");
            }
        }
    }

    #[test]
    fn marginalized_q_single_sample_is_single_query() {
        let s = CounterfactualSamples {
            agent: 0,
            own_action: 1,
            others: vec![vec![1, 1]],
            observations: vec![vec![1.0]; 3],
        };
        assert_eq!(marginalized_q(&toy_critic(), &[1.0], 1, &s).unwrap(), 3.0);
        assert_eq!(marginalized_q(&toy_critic(), &[1.0], 0, &s).unwrap(), 0.0);
    }

    #[test]
    fn marginalized_q_converges_to_exact_toy_marginal() {
        let pols = vec![SoftmaxPolicy::new(2); 3];
        let obs = vec![vec![1.0]; 3];
        let s = sample_counterfactual_joint_actions(
            &pols,
            &obs,
            0,
            0,
            200_000,
            &mut SeededRng::new(6, 0),
        )
        .unwrap();
        let q0 = marginalized_q(&toy_critic(), &[1.0], 0, &s).unwrap();
        let q1 = marginalized_q(&toy_critic(), &[1.0], 1, &s).unwrap();
        // 4 equiprobable tuples; binomial sd of q0 ≈ 0.001, of q1 ≈ 0.003
        assert!((q0 - 0.25).abs() < 0.01, "{q0}");
        assert!((q1 - 0.75).abs() < 0.03, "{q1}");
    }

    #[test]
    fn marginalized_value_of_zero_critic() {
        let zero = PayoffCritic(|_: &[usize]| Ok(0.0));
        let s = CounterfactualSamples {
            agent: 1,
            own_action: 0,
            others: vec![vec![0], vec![1]],
            observations: vec![vec![1.0]; 2],
        };
        assert_eq!(marginalized_value(&zero, &[1.0], &s).unwrap(), 0.0);
    }

    #[test]
    fn td_error_terminal_zero_critic_is_reward() {
        let zero = PayoffCritic(|_: &[usize]| Ok(0.0));
        let tr = &one_step(vec![1, 1], 0.5).transitions[0];
        let s = CounterfactualSamples::pinned(0, &tr.joint_action, &tr.observations);
        assert_eq!(perla_td_error(&zero, tr, &s, None, 0.99).unwrap(), 0.5);
    }

    #[test]
    fn td_error_constant_critic() {
        let c = 2.0;
        let constant = PayoffCritic(move |_: &[usize]| Ok(c));
        let tr = Transition {
            state: vec![0.0],
            observations: vec![vec![0.0]; 2],
            joint_action: JointAction(vec![0, 1]),
            reward: 0.0,
            next_state: Some(vec![1.0]),
            next_observations: Some(vec![vec![1.0]; 2]),
            terminal: false,
        };
        let s = CounterfactualSamples::pinned(0, &tr.joint_action, &tr.observations);
        let gamma = 0.9;
        let d = perla_td_error(&constant, &tr, &s, Some(&s), gamma).unwrap();
        assert!((d - (gamma - 1.0) * c).abs() < 1e-15);
        assert!(perla_td_error(&constant, &tr, &s, None, gamma).is_err());
    }

    #[test]
    fn ctde_gradient_examples() {
        let pol = SigmoidPolicy::new(0.0);
        let t = one_step(vec![1, 1, 1], 3.0);
        let g = gradient_ctde(&t, &[3.0], &pol, 0, 0.99).unwrap();
        assert_eq!(g.scalar(), Some(1.5));
        let t = one_step(vec![0, 1, 0], 0.0);
        let g = gradient_ctde(&t, &[0.0], &pol, 0, 0.99).unwrap();
        assert_eq!(g.scalar(), Some(0.0));
        assert!(gradient_ctde(&t, &[0.0, 1.0], &pol, 0, 0.99).is_err());
    }

    #[test]
    fn dt_gradient_examples() {
        let pol = SigmoidPolicy::new(0.0);
        let g0 = gradient_dt(&one_step(vec![0, 1, 1], 0.0), &[0.25], &pol, 0, 1.0).unwrap();
        let g1 = gradient_dt(&one_step(vec![1, 0, 1], 0.0), &[0.75], &pol, 0, 1.0).unwrap();
        assert_eq!(g0.scalar(), Some(-0.125));
        assert_eq!(g1.scalar(), Some(0.375));
        assert_eq!(
            0.5 * g0.scalar().unwrap() + 0.5 * g1.scalar().unwrap(),
            0.125
        );
    }

    #[test]
    fn perla_with_deterministic_others_equals_ctde() {
        let pols = vec![SoftmaxPolicy::new(2), peaked(2, 1), peaked(2, 1)];
        let t = one_step(vec![1, 1, 1], 3.0);
        let q = executed_q_values(&t, &toy_critic(), 0).unwrap();
        let ctde = gradient_ctde(&t, &q, &pols[0], 0, 0.99).unwrap();
        for k in [1, 7, 40] {
            let p = gradient_perla(
                &t,
                &toy_critic(),
                &pols,
                0,
                k,
                0.99,
                &mut SeededRng::new(k as u64, 0),
            )
            .unwrap();
            assert_eq!(p, ctde);
        }
    }

    #[test]
    fn exact_qtilde_toy_and_unsupported() {
        let env = MatrixGame::new(MatrixGameSpec::toy_team(), 0.99).unwrap();
        let pols = vec![SoftmaxPolicy::new(2); 3];
        let obs = vec![vec![1.0]; 3];
        assert!((exact_qtilde(&env, &pols, &obs, 0, 0).unwrap() - 0.25).abs() < 1e-15);
        assert!((exact_qtilde(&env, &pols, &obs, 0, 1).unwrap() - 0.75).abs() < 1e-15);
        let forage = Foraging::new(
            ForagingSpec {
                rows: 3,
                cols: 3,
                n_agents: 2,
                n_foods: 1,
                agent_levels: vec![1, 1],
                food_levels: vec![2],
                cooperative_only: true,
                max_steps: 5,
                layout_seed: None,
            },
            0.9,
        )
        .unwrap();
        let fp = vec![SoftmaxPolicy::new(6); 2];
        let fo = forage_obs(&forage);
        assert!(matches!(
            exact_qtilde(&forage, &fp, &fo, 0, 0),
            Err(Error::Unsupported(_))
        ));
    }

    fn forage_obs(env: &Foraging) -> Vec<Vec<f64>> {
        env.observations()
    }

    #[test]
    fn estimator_kind_validation() {
        assert!(EstimatorKind::Perla { k: 0 }.validate().is_err());
        assert!(EstimatorKind::Perla { k: 3 }.validate().is_ok());
        assert_eq!(EstimatorKind::Ctde.k(), Some(1));
        let _ = (ActionDistribution::uniform(2), ObsKey::unit());
    }
}
