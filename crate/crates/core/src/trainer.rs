//! Multi-agent PPO with a shared centralised critic, in two flavours.
//!
//! `PerlaMappo` evaluates the critic at `K` counterfactual draws of the other
//! agents' actions and averages; `Mappo` evaluates it once at the executed
//! joint action. Both share every other line of code, so a PERLA run with
//! `pin_samples` set is the MAPPO run.
//!
//! Each iteration collects at least `batch_size` transitions, computes policy
//! advantages with the current critic, takes `ppo_epochs` Adam steps on the
//! critic (fresh counterfactual samples per step) and then `ppo_epochs` clipped
//! surrogate steps per agent.

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envs::EnvConfig;
use crate::error::{Error, Result};
use crate::estimators::{
    perla_td_error, sample_counterfactual_joint_actions, CounterfactualSamples, Critic,
};
use crate::game::{rollout, Environment, JointAction, Trajectory};
use crate::nn::{AdamState, MlpCritic};
use crate::policy::{ObsKey, PolicyGradient, SoftmaxPolicy, StochasticPolicy};
use crate::rng::{purpose, SeededRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algo {
    PerlaMappo,
    Mappo,
}

impl Algo {
    pub fn name(&self) -> &'static str {
        match self {
            Algo::PerlaMappo => "perla_mappo",
            Algo::Mappo => "mappo",
        }
    }
}

/// What the policy update multiplies the score function by.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageMode {
    /// Marginalised action value `Q̂_i(s, a_i)` minus its per-agent batch mean.
    MarginalQ,
    /// The one-step marginalised TD error itself.
    TdError,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActorOptimizer {
    Sgd,
    Adam,
}

mod defaults {
    pub fn k() -> usize {
        100
    }
    pub fn discount() -> f64 {
        0.99
    }
    pub fn actor_lr() -> f64 {
        0.01
    }
    pub fn critic_lr() -> f64 {
        5e-3
    }
    pub fn ppo_epochs() -> usize {
        5
    }
    pub fn clip() -> f64 {
        0.2
    }
    pub fn entropy_coef() -> f64 {
        0.01
    }
    pub fn batch_size() -> usize {
        64
    }
    pub fn total_steps() -> usize {
        32_000
    }
    pub fn eval_interval() -> usize {
        10
    }
    pub fn eval_episodes() -> usize {
        1
    }
    pub fn seeds() -> Vec<u64> {
        vec![0]
    }
    pub fn critic_hidden() -> Vec<usize> {
        vec![64]
    }
    pub fn advantage() -> super::AdvantageMode {
        super::AdvantageMode::MarginalQ
    }
    pub fn actor_optimizer() -> super::ActorOptimizer {
        super::ActorOptimizer::Adam
    }
    pub fn actor_eps() -> f64 {
        1e-5
    }
    pub fn max_grad_norm() -> Option<f64> {
        Some(10.0)
    }
    pub fn yes() -> bool {
        true
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub env: EnvConfig,
    pub algo: Algo,
    /// Counterfactual samples per agent per step (ignored by `Mappo`).
    #[serde(default = "defaults::k")]
    pub k: usize,
    #[serde(default = "defaults::discount")]
    pub discount: f64,
    #[serde(default = "defaults::actor_lr")]
    pub actor_lr: f64,
    #[serde(default = "defaults::critic_lr")]
    pub critic_lr: f64,
    #[serde(default = "defaults::ppo_epochs")]
    pub ppo_epochs: usize,
    #[serde(default = "defaults::clip")]
    pub clip: f64,
    #[serde(default = "defaults::entropy_coef")]
    pub entropy_coef: f64,
    /// Minimum transitions collected per iteration.
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    /// Episode cap; the environment's own horizon when absent.
    #[serde(default)]
    pub horizon: Option<usize>,
    #[serde(default = "defaults::total_steps")]
    pub total_steps: usize,
    /// Evaluate every this many iterations (and after the last one).
    #[serde(default = "defaults::eval_interval")]
    pub eval_interval: usize,
    #[serde(default = "defaults::eval_episodes")]
    pub eval_episodes: usize,
    #[serde(default = "defaults::seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "defaults::critic_hidden")]
    pub critic_hidden: Vec<usize>,
    #[serde(default = "defaults::advantage")]
    pub advantage: AdvantageMode,
    #[serde(default = "defaults::yes")]
    pub normalize_advantages: bool,
    #[serde(default = "defaults::actor_optimizer")]
    pub actor_optimizer: ActorOptimizer,
    #[serde(default = "defaults::actor_eps")]
    pub actor_eps: f64,
    #[serde(default = "defaults::max_grad_norm")]
    pub max_grad_norm: Option<f64>,
    /// Huber threshold for the critic loss; squared loss when absent.
    #[serde(default)]
    pub huber_delta: Option<f64>,
    /// Use the executed `a_{-i}` as the single counterfactual sample.
    #[serde(default)]
    pub pin_samples: bool,
}

impl TrainConfig {
    pub fn new(env: EnvConfig, algo: Algo) -> Self {
        Self {
            env,
            algo,
            k: defaults::k(),
            discount: defaults::discount(),
            actor_lr: defaults::actor_lr(),
            critic_lr: defaults::critic_lr(),
            ppo_epochs: defaults::ppo_epochs(),
            clip: defaults::clip(),
            entropy_coef: defaults::entropy_coef(),
            batch_size: defaults::batch_size(),
            horizon: None,
            total_steps: defaults::total_steps(),
            eval_interval: defaults::eval_interval(),
            eval_episodes: defaults::eval_episodes(),
            seeds: defaults::seeds(),
            critic_hidden: defaults::critic_hidden(),
            advantage: defaults::advantage(),
            normalize_advantages: true,
            actor_optimizer: defaults::actor_optimizer(),
            actor_eps: defaults::actor_eps(),
            max_grad_norm: defaults::max_grad_norm(),
            huber_delta: None,
            pin_samples: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return bad(format!("clip must lie in (0, 1), got {}", self.clip));
        }
        if !(0.0..1.0).contains(&self.discount) {
            return bad(format!(
                "discount must lie in [0, 1), got {}",
                self.discount
            ));
        }
        for (name, lr) in [("actor_lr", self.actor_lr), ("critic_lr", self.critic_lr)] {
            if !(lr.is_finite() && lr > 0.0) {
                return bad(format!("{name} must be positive, got {lr}"));
            }
        }
        if !(self.entropy_coef.is_finite() && self.entropy_coef >= 0.0) {
            return bad(format!(
                "entropy_coef must be non-negative, got {}",
                self.entropy_coef
            ));
        }
        if !(self.actor_eps.is_finite() && self.actor_eps > 0.0) {
            return bad("actor_eps must be positive".into());
        }
        if self.ppo_epochs == 0 || self.batch_size == 0 || self.total_steps == 0 {
            return bad("ppo_epochs, batch_size and total_steps must be positive".into());
        }
        if self.eval_interval == 0 || self.eval_episodes == 0 {
            return bad("eval_interval and eval_episodes must be positive".into());
        }
        if self.horizon == Some(0) {
            return bad("horizon must be positive".into());
        }
        if self.seeds.is_empty() {
            return bad("seed list is empty".into());
        }
        if self.critic_hidden.iter().any(|&h| h == 0) {
            return bad("critic hidden widths must be positive".into());
        }
        if let Some(g) = self.max_grad_norm {
            if !(g.is_finite() && g > 0.0) {
                return bad("max_grad_norm must be positive".into());
            }
        }
        if let Some(d) = self.huber_delta {
            if !(d.is_finite() && d > 0.0) {
                return bad("huber_delta must be positive".into());
            }
        }
        if self.pin_samples && self.k != 1 {
            return bad("pinned samples require k = 1".into());
        }
        Ok(())
    }

    /// Whether counterfactual samples are the executed actions.
    pub fn pinned(&self) -> bool {
        self.algo == Algo::Mappo || self.pin_samples
    }

    pub fn effective_k(&self) -> usize {
        if self.pinned() {
            1
        } else {
            self.k
        }
    }
}

/// Shared critic `C(s, i, a)`: state features, agent one-hot and one one-hot
/// per agent action, fed to an MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct CentralCritic {
    pub net: MlpCritic,
    state_dim: usize,
    action_counts: Vec<usize>,
}

impl CentralCritic {
    pub fn input_dim(state_dim: usize, action_counts: &[usize]) -> usize {
        state_dim + action_counts.len() + action_counts.iter().sum::<usize>()
    }

    pub fn new(
        state_dim: usize,
        action_counts: &[usize],
        hidden: &[usize],
        rng: &mut SeededRng,
    ) -> Self {
        let net = MlpCritic::new(Self::input_dim(state_dim, action_counts), hidden, rng);
        Self {
            net,
            state_dim,
            action_counts: action_counts.to_vec(),
        }
    }

    pub fn from_net(net: MlpCritic, state_dim: usize, action_counts: &[usize]) -> Result<Self> {
        if net.input_dim() != Self::input_dim(state_dim, action_counts) {
            return Err(Error::Config(
                "critic input width does not match the game".into(),
            ));
        }
        Ok(Self {
            net,
            state_dim,
            action_counts: action_counts.to_vec(),
        })
    }

    pub fn encode(&self, state: &[f64], agent: usize, joint: &[usize]) -> Result<Vec<f64>> {
        let n = self.action_counts.len();
        if state.len() != self.state_dim || joint.len() != n || agent >= n {
            return Err(Error::Input(format!(
                "critic query with state width {}, agent {agent}, {} actions",
                state.len(),
                joint.len()
            )));
        }
        let mut x = Vec::with_capacity(self.net.input_dim());
        x.extend_from_slice(state);
        x.extend((0..n).map(|j| (j == agent) as u8 as f64));
        for (&a, &count) in joint.iter().zip(&self.action_counts) {
            if a >= count {
                return Err(Error::Input(format!("action {a} out of range for {count}")));
            }
            x.extend((0..count).map(|b| (b == a) as u8 as f64));
        }
        Ok(x)
    }
}

impl Critic for CentralCritic {
    fn evaluate(&self, state: &[f64], agent: usize, joint: &[usize]) -> Result<f64> {
        self.net.forward(&self.encode(state, agent, joint)?)
    }
}

/// A critic prediction that is a weighted sum of network outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct CriticExample {
    pub inputs: Vec<(Vec<f64>, f64)>,
    pub target: f64,
}

impl CriticExample {
    pub fn single(input: Vec<f64>, target: f64) -> Self {
        Self {
            inputs: vec![(input, 1.0)],
            target,
        }
    }

    pub fn predict(&self, net: &MlpCritic) -> Result<f64> {
        self.inputs
            .iter()
            .try_fold(0.0, |acc, (x, w)| Ok(acc + w * net.forward(x)?))
    }
}

/// Encoded, de-duplicated queries whose weighted sum is a marginalised value.
fn marginal_inputs(
    critic: &CentralCritic,
    state: &[f64],
    samples: &CounterfactualSamples,
    own: usize,
) -> Result<Vec<(Vec<f64>, f64)>> {
    let mut counts: BTreeMap<&[usize], usize> = BTreeMap::new();
    for t in &samples.others {
        *counts.entry(t.as_slice()).or_default() += 1;
    }
    let k = samples.k() as f64;
    counts
        .into_iter()
        .map(|(others, c)| {
            let joint = JointAction::splice(samples.agent, own, others);
            Ok((critic.encode(state, samples.agent, &joint)?, c as f64 / k))
        })
        .collect()
}

fn bits(x: &[f64]) -> Vec<u64> {
    x.iter().map(|v| v.to_bits()).collect()
}

/// Network outputs memoised by exact input.
struct ForwardCache<'a> {
    net: &'a MlpCritic,
    seen: HashMap<Vec<u64>, f64>,
}

impl<'a> ForwardCache<'a> {
    fn new(net: &'a MlpCritic) -> Self {
        Self {
            net,
            seen: HashMap::new(),
        }
    }

    fn forward(&mut self, x: &[f64]) -> Result<f64> {
        let key = bits(x);
        if let Some(&y) = self.seen.get(&key) {
            return Ok(y);
        }
        let y = self.net.forward(x)?;
        self.seen.insert(key, y);
        Ok(y)
    }

    fn weighted(&mut self, inputs: &[(Vec<f64>, f64)]) -> Result<f64> {
        inputs
            .iter()
            .try_fold(0.0, |acc, (x, w)| Ok(acc + w * self.forward(x)?))
    }
}

/// One Adam step on the mean (squared or Huber) error; returns the pre-step loss.
///
/// Repeated inputs are evaluated and back-propagated once with their summed
/// output gradient.
pub fn critic_update(
    net: &mut MlpCritic,
    batch: &[CriticExample],
    adam: &mut AdamState,
    huber_delta: Option<f64>,
) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let m = batch.len() as f64;
    let mut loss = 0.0;
    let mut slots: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut unique: Vec<(&[f64], f64)> = Vec::new();
    {
        let mut cache = ForwardCache::new(net);
        for ex in batch {
            let pred = cache.weighted(&ex.inputs)?;
            let err = pred - ex.target;
            let (l, dl) = match huber_delta {
                Some(d) if err.abs() > d => (d * (err.abs() - 0.5 * d), d * err.signum()),
                Some(_) => (0.5 * err * err, err),
                None => (err * err, 2.0 * err),
            };
            loss += l / m;
            for (x, w) in &ex.inputs {
                let slot = *slots.entry(bits(x)).or_insert_with(|| {
                    unique.push((x.as_slice(), 0.0));
                    unique.len() - 1
                });
                unique[slot].1 += dl * w / m;
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("critic loss {loss}")));
    }
    let mut grad = vec![0.0; net.n_params()];
    for (x, g) in unique {
        net.accumulate_backward(x, g, &mut grad)?;
    }
    adam.step(net.params_mut(), &grad)?;
    Ok(loss)
}

/// Counterfactual samples for every (agent, step) of one trajectory.
struct StepSamples {
    current: CounterfactualSamples,
    /// Samples at the next observations and the agent's own next action.
    next: Option<CounterfactualSamples>,
}

fn draw_step_samples<P: StochasticPolicy>(
    trajectory: &Trajectory,
    joint_policy: &[P],
    k: usize,
    pinned: bool,
    rng: &mut SeededRng,
) -> Result<Vec<Vec<StepSamples>>> {
    let n = joint_policy.len();
    let steps = &trajectory.transitions;
    let mut out: Vec<Vec<StepSamples>> = (0..n).map(|_| Vec::with_capacity(steps.len())).collect();
    for (t, tr) in steps.iter().enumerate() {
        // Actions at the next step: executed if it was played, drawn otherwise.
        let next_joint = match (tr.terminal, steps.get(t + 1)) {
            (true, _) => None,
            (false, Some(nx)) => Some(nx.joint_action.0.clone()),
            (false, None) => {
                let obs = tr.next_observations.as_ref().ok_or_else(|| {
                    Error::Input("non-terminal step without next observations".into())
                })?;
                Some(
                    joint_policy
                        .iter()
                        .zip(obs)
                        .map(|(p, o)| p.sample_action(o, rng))
                        .collect::<Result<Vec<_>>>()?,
                )
            }
        };
        for (i, per_agent) in out.iter_mut().enumerate() {
            let own = tr.joint_action.0[i];
            let current = if pinned {
                CounterfactualSamples::pinned(i, &tr.joint_action, &tr.observations)
            } else {
                sample_counterfactual_joint_actions(joint_policy, &tr.observations, i, own, k, rng)?
            };
            let next = match &next_joint {
                None => None,
                Some(nj) => {
                    let obs = tr.next_observations.as_ref().unwrap();
                    let nj = JointAction(nj.clone());
                    Some(if pinned {
                        CounterfactualSamples::pinned(i, &nj, obs)
                    } else {
                        sample_counterfactual_joint_actions(joint_policy, obs, i, nj.0[i], k, rng)?
                    })
                }
            };
            per_agent.push(StepSamples { current, next });
        }
    }
    Ok(out)
}

/// Marginalised TD errors `δ[agent][step]` for one trajectory.
///
/// With `pinned`, each agent's single sample is the executed `a_{-i}` (the
/// MAPPO critic query); otherwise `k` fresh draws per agent per step.
pub fn compute_advantages<C, P>(
    trajectory: &Trajectory,
    critic: &C,
    joint_policy: &[P],
    k: usize,
    discount: f64,
    pinned: bool,
    rng: &mut SeededRng,
) -> Result<Vec<Vec<f64>>>
where
    C: Critic + ?Sized,
    P: StochasticPolicy,
{
    if trajectory.is_empty() {
        return Err(Error::Input("empty trajectory".into()));
    }
    let samples = draw_step_samples(trajectory, joint_policy, k, pinned, rng)?;
    samples
        .iter()
        .map(|per_agent| {
            per_agent
                .iter()
                .zip(&trajectory.transitions)
                .map(|(s, tr)| perla_td_error(critic, tr, &s.current, s.next.as_ref(), discount))
                .collect()
        })
        .collect()
}

/// One entry of a PPO batch.
#[derive(Clone, Debug, PartialEq)]
pub struct PpoSample {
    pub observation: Vec<f64>,
    pub action: usize,
    pub old_log_prob: f64,
    pub advantage: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PpoSettings {
    pub epochs: usize,
    pub clip: f64,
    pub entropy_coef: f64,
    pub max_grad_norm: Option<f64>,
}

/// Per-row optimiser state for a tabular softmax actor.
#[derive(Clone, Debug)]
pub struct ActorState {
    kind: ActorOptimizer,
    lr: f64,
    eps: f64,
    rows: BTreeMap<ObsKey, AdamState>,
}

impl ActorState {
    pub fn new(kind: ActorOptimizer, lr: f64, eps: f64) -> Self {
        Self {
            kind,
            lr,
            eps,
            rows: BTreeMap::new(),
        }
    }

    /// Move `policy` uphill along `gradient`.
    pub fn ascend(&mut self, policy: &mut SoftmaxPolicy, gradient: &PolicyGradient) -> Result<()> {
        match self.kind {
            ActorOptimizer::Sgd => policy.apply_gradient(gradient, self.lr),
            ActorOptimizer::Adam => {
                let mut step = PolicyGradient::zeros();
                for (key, row) in gradient.rows() {
                    let state = self.rows.entry(key.clone()).or_insert_with(|| {
                        let mut s = AdamState::new(row.len(), self.lr);
                        s.eps = self.eps;
                        s
                    });
                    // Adam descends; feed it the negated gradient and read back the move.
                    let mut delta = vec![0.0; row.len()];
                    let neg: Vec<f64> = row.iter().map(|g| -g).collect();
                    state.step(&mut delta, &neg)?;
                    step.add_row_scaled(key, &delta, 1.0);
                }
                policy.apply_gradient(&step, 1.0)
            }
        }
    }
}

/// Gradient of the clipped surrogate plus entropy bonus over `batch`.
pub fn ppo_gradient(
    policy: &SoftmaxPolicy,
    batch: &[PpoSample],
    clip: f64,
    entropy_coef: f64,
) -> Result<PolicyGradient> {
    let mut grad = PolicyGradient::zeros();
    if batch.is_empty() {
        return Ok(grad);
    }
    let scale = 1.0 / batch.len() as f64;
    for s in batch {
        if !s.advantage.is_finite() || !s.old_log_prob.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite advantage {} or old log-prob {}",
                s.advantage, s.old_log_prob
            )));
        }
        let ratio = (policy.log_prob(&s.observation, s.action)? - s.old_log_prob).exp();
        let active = if s.advantage >= 0.0 {
            ratio < 1.0 + clip
        } else {
            ratio > 1.0 - clip
        };
        if active && s.advantage != 0.0 {
            let score = policy.log_prob_gradient(&s.observation, s.action)?;
            grad.add_scaled(&score, scale * ratio * s.advantage);
        }
        if entropy_coef > 0.0 {
            grad.add_scaled(
                &policy.entropy_gradient(&s.observation)?,
                scale * entropy_coef,
            );
        }
    }
    Ok(grad)
}

/// `epochs` ascent steps on the clipped surrogate with entropy bonus.
pub fn ppo_update(
    policy: &mut SoftmaxPolicy,
    batch: &[PpoSample],
    settings: &PpoSettings,
    optimizer: &mut ActorState,
) -> Result<()> {
    for _ in 0..settings.epochs {
        let mut grad = ppo_gradient(policy, batch, settings.clip, settings.entropy_coef)?;
        if let Some(max) = settings.max_grad_norm {
            let norm = grad.norm();
            if norm > max {
                grad.scale(max / norm);
            }
        }
        optimizer.ascend(policy, &grad)?;
    }
    Ok(())
}

/// Evaluation of one seed at one point of training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iteration: usize,
    pub step: usize,
    pub greedy_return: f64,
    pub stochastic_return: f64,
    /// Mean critic loss of the preceding iteration (0 before training).
    pub critic_loss: f64,
    /// Per-agent action probabilities at the initial observation (matrix games).
    pub action_probabilities: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    pub records: Vec<EvalRecord>,
    pub policies: Vec<SoftmaxPolicy>,
    pub critic: CentralCritic,
    /// Every training batch's trajectories in order, when requested.
    pub trajectories: Option<Vec<Trajectory>>,
    pub wall_clock_secs: f64,
}

impl SeedRun {
    pub fn final_record(&self) -> &EvalRecord {
        self.records
            .last()
            .expect("a run always records its final evaluation")
    }
}

/// Cross-seed aggregate at one evaluation point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRecord {
    pub iteration: usize,
    pub step: usize,
    pub mean_greedy_return: f64,
    pub mean_stochastic_return: f64,
    pub per_seed_greedy_return: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingReport {
    pub config: TrainConfig,
    pub runs: Vec<SeedRun>,
    pub aggregate: Vec<AggregateRecord>,
    pub wall_clock_secs: f64,
}

fn greedy_action(policy: &SoftmaxPolicy, obs: &[f64]) -> Result<usize> {
    Ok(policy.action_probabilities(obs)?.argmax())
}

fn evaluate(
    env: &mut (dyn Environment + Send),
    policies: &[SoftmaxPolicy],
    horizon: usize,
    episodes: usize,
    greedy: bool,
    rng: &mut SeededRng,
) -> Result<f64> {
    let mut total = 0.0;
    for _ in 0..episodes {
        env.reset(rng);
        for _ in 0..horizon {
            let obs = env.observations();
            let joint = policies
                .iter()
                .zip(&obs)
                .map(|(p, o)| {
                    if greedy {
                        greedy_action(p, o)
                    } else {
                        p.sample_action(o, rng)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let out = env.step(&JointAction(joint))?;
            total += out.reward;
            if out.terminal {
                break;
            }
        }
    }
    Ok(total / episodes as f64)
}

fn check_finite(iteration: usize, policies: &[SoftmaxPolicy], critic: &MlpCritic) -> Result<()> {
    if let Some(i) = policies.iter().position(|p| !p.is_finite()) {
        return Err(Error::Diverged {
            iteration,
            what: format!("policy of agent {i}"),
        });
    }
    if !critic.is_finite() {
        return Err(Error::Diverged {
            iteration,
            what: "critic".into(),
        });
    }
    Ok(())
}

fn normalise(values: &mut [f64], centre: bool, scale: bool) {
    if values.is_empty() {
        return;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if centre {
        values.iter_mut().for_each(|v| *v -= mean);
    }
    if scale && values.len() > 1 {
        let m = if centre { 0.0 } else { mean };
        let sd = (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
        if sd > 1e-8 {
            values.iter_mut().for_each(|v| *v /= sd);
        }
    }
}

/// Train one seed. With `keep_trajectories`, every collected batch is returned.
pub fn train_seed(config: &TrainConfig, seed: u64, keep_trajectories: bool) -> Result<SeedRun> {
    config.validate()?;
    let started = Instant::now();
    let mut env = config.env.build(config.discount)?;
    let mut eval_env = config.env.build(config.discount)?;
    let spec = env.spec().clone();
    let horizon = config.horizon.unwrap_or(spec.horizon);
    let root = SeededRng::new(seed, 0);
    let mut rollout_rng = root.derive(purpose::ROLLOUT, 0);
    let mut cf_rng = root.derive(purpose::COUNTERFACTUAL, 0);
    let mut init_rng = root.derive(purpose::INIT, 0);

    env.reset(&mut root.derive(purpose::RESET, 0));
    let state_dim = env.state_features().len();
    let mut critic = CentralCritic::new(
        state_dim,
        &spec.action_counts,
        &config.critic_hidden,
        &mut init_rng,
    );
    let mut critic_adam = AdamState::new(critic.net.n_params(), config.critic_lr);
    let mut policies: Vec<SoftmaxPolicy> = spec
        .action_counts
        .iter()
        .map(|&n| SoftmaxPolicy::new(n))
        .collect();
    let mut actors: Vec<ActorState> = (0..spec.n_agents)
        .map(|_| ActorState::new(config.actor_optimizer, config.actor_lr, config.actor_eps))
        .collect();
    let ppo = PpoSettings {
        epochs: config.ppo_epochs,
        clip: config.clip,
        entropy_coef: config.entropy_coef,
        max_grad_norm: config.max_grad_norm,
    };
    let k = config.effective_k();
    let pinned = config.pinned();
    let matrix = config.env.is_matrix_game();

    let mut records = Vec::new();
    let mut kept = keep_trajectories.then(Vec::new);
    let mut steps = 0usize;
    let mut iteration = 0usize;

    let record = |iteration: usize,
                  steps: usize,
                  loss: f64,
                  policies: &[SoftmaxPolicy],
                  eval_env: &mut Box<dyn Environment + Send>|
     -> Result<EvalRecord> {
        let mut rng = root.derive(purpose::EVALUATION, iteration as u64);
        let greedy = evaluate(
            eval_env.as_mut(),
            policies,
            horizon,
            config.eval_episodes,
            true,
            &mut rng,
        )?;
        let stochastic = evaluate(
            eval_env.as_mut(),
            policies,
            horizon,
            config.eval_episodes,
            false,
            &mut rng,
        )?;
        let action_probabilities = if matrix {
            eval_env.reset(&mut rng);
            let obs = eval_env.observations();
            Some(
                policies
                    .iter()
                    .zip(&obs)
                    .map(|(p, o)| {
                        p.action_probabilities(o)
                            .map(|d| d.probabilities().to_vec())
                    })
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        Ok(EvalRecord {
            iteration,
            step: steps,
            greedy_return: greedy,
            stochastic_return: stochastic,
            critic_loss: loss,
            action_probabilities,
        })
    };

    records.push(record(0, 0, 0.0, &policies, &mut eval_env)?);

    while steps < config.total_steps {
        iteration += 1;
        // Rollout.
        let mut batch: Vec<Trajectory> = Vec::new();
        let mut collected = 0;
        while collected < config.batch_size {
            let traj = rollout(&mut env, &policies, horizon, &mut rollout_rng)?;
            if traj.is_empty() {
                return Err(Error::Config("rollout produced no transitions".into()));
            }
            collected += traj.len();
            batch.push(traj);
        }
        steps += collected;

        // Old log-probabilities and policy advantages with the pre-update critic.
        let n = spec.n_agents;
        let mut ppo_batches: Vec<Vec<PpoSample>> = vec![Vec::with_capacity(collected); n];
        let mut cache = ForwardCache::new(&critic.net);
        for traj in &batch {
            let samples = draw_step_samples(traj, &policies, k, pinned, &mut cf_rng)?;
            for (i, per_agent) in samples.iter().enumerate() {
                for (s, tr) in per_agent.iter().zip(&traj.transitions) {
                    let own = tr.joint_action.0[i];
                    let q_hat =
                        cache.weighted(&marginal_inputs(&critic, &tr.state, &s.current, own)?)?;
                    let advantage = match config.advantage {
                        AdvantageMode::MarginalQ => q_hat,
                        AdvantageMode::TdError => {
                            let boot = match (&s.next, &tr.next_state) {
                                (Some(ns), Some(next_state)) => cache.weighted(
                                    &marginal_inputs(&critic, next_state, ns, ns.own_action)?,
                                )?,
                                _ => 0.0,
                            };
                            tr.reward + config.discount * boot - q_hat
                        }
                    };
                    ppo_batches[i].push(PpoSample {
                        observation: tr.observations[i].clone(),
                        action: own,
                        old_log_prob: policies[i].log_prob(&tr.observations[i], own)?,
                        advantage,
                    });
                }
            }
        }
        for b in &mut ppo_batches {
            let mut adv: Vec<f64> = b.iter().map(|s| s.advantage).collect();
            let centre = config.advantage == AdvantageMode::MarginalQ;
            normalise(&mut adv, centre, config.normalize_advantages);
            for (s, a) in b.iter_mut().zip(adv) {
                s.advantage = a;
            }
        }

        // Critic: one Adam step per epoch on fresh samples, targets held fixed within a step.
        let mut loss_sum = 0.0;
        for _ in 0..config.ppo_epochs {
            let mut examples = Vec::with_capacity(collected * n);
            let mut cache = ForwardCache::new(&critic.net);
            for traj in &batch {
                let samples = draw_step_samples(traj, &policies, k, pinned, &mut cf_rng)?;
                for per_agent in &samples {
                    for (s, tr) in per_agent.iter().zip(&traj.transitions) {
                        let boot =
                            match (&s.next, &tr.next_state) {
                                (Some(ns), Some(next_state)) => cache.weighted(
                                    &marginal_inputs(&critic, next_state, ns, ns.own_action)?,
                                )?,
                                _ => 0.0,
                            };
                        examples.push(CriticExample {
                            inputs: marginal_inputs(
                                &critic,
                                &tr.state,
                                &s.current,
                                s.current.own_action,
                            )?,
                            target: tr.reward + config.discount * boot,
                        });
                    }
                }
            }
            loss_sum += critic_update(
                &mut critic.net,
                &examples,
                &mut critic_adam,
                config.huber_delta,
            )?;
        }
        let last_loss = loss_sum / config.ppo_epochs as f64;

        for ((policy, actor), b) in policies.iter_mut().zip(&mut actors).zip(&ppo_batches) {
            ppo_update(policy, b, &ppo, actor)?;
        }
        check_finite(iteration, &policies, &critic.net)?;

        if let Some(k) = kept.as_mut() {
            k.extend(batch);
        }
        if iteration % config.eval_interval == 0 || steps >= config.total_steps {
            records.push(record(
                iteration,
                steps,
                last_loss,
                &policies,
                &mut eval_env,
            )?);
        }
    }

    Ok(SeedRun {
        seed,
        records,
        policies,
        critic,
        trajectories: kept,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

/// Train every configured seed in parallel and aggregate the evaluations.
pub fn train(config: &TrainConfig) -> Result<TrainingReport> {
    config.validate()?;
    let started = Instant::now();
    let runs = config
        .seeds
        .par_iter()
        .map(|&s| train_seed(config, s, false))
        .collect::<Result<Vec<_>>>()?;
    let aggregate = aggregate(&runs);
    Ok(TrainingReport {
        config: config.clone(),
        runs,
        aggregate,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

fn aggregate(runs: &[SeedRun]) -> Vec<AggregateRecord> {
    let mut by_iter: BTreeMap<usize, Vec<&EvalRecord>> = BTreeMap::new();
    for r in runs {
        for rec in &r.records {
            by_iter.entry(rec.iteration).or_default().push(rec);
        }
    }
    let mut out: Vec<AggregateRecord> = by_iter
        .into_iter()
        .map(|(iteration, recs)| {
            let n = recs.len() as f64;
            AggregateRecord {
                iteration,
                step: recs.iter().map(|r| r.step).max().unwrap_or(0),
                mean_greedy_return: recs.iter().map(|r| r.greedy_return).sum::<f64>() / n,
                mean_stochastic_return: recs.iter().map(|r| r.stochastic_return).sum::<f64>() / n,
                per_seed_greedy_return: recs.iter().map(|r| r.greedy_return).collect(),
            }
        })
        .collect();
    out.sort_by_key(|r| (r.step, r.iteration));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::matrix::toy_team_reward;
    use crate::estimators::PayoffCritic;
    use crate::game::Transition;

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

    #[test]
    fn zero_critic_terminal_gives_reward() {
        let zero = PayoffCritic(|_: &[usize]| Ok(0.0));
        let pols = vec![SoftmaxPolicy::new(2); 2];
        for pinned in [true, false] {
            let d = compute_advantages(
                &one_step(vec![1, 0], -1.0),
                &zero,
                &pols,
                4,
                0.99,
                pinned,
                &mut SeededRng::new(0, 0),
            )
            .unwrap();
            assert_eq!(d, vec![vec![-1.0], vec![-1.0]]);
        }
    }

    #[test]
    fn empty_trajectory_rejected() {
        let zero = PayoffCritic(|_: &[usize]| Ok(0.0));
        let pols = vec![SoftmaxPolicy::new(2); 2];
        let empty = Trajectory {
            transitions: vec![],
            seed: 0,
        };
        assert!(compute_advantages(
            &empty,
            &zero,
            &pols,
            1,
            0.9,
            false,
            &mut SeededRng::new(0, 0)
        )
        .is_err());
    }

    #[test]
    fn pinned_matches_executed_query() {
        let critic = PayoffCritic(toy_team_reward as fn(&[usize]) -> Result<f64>);
        let pols = vec![SoftmaxPolicy::new(2); 3];
        let d = compute_advantages(
            &one_step(vec![1, 1, 0], 0.0),
            &critic,
            &pols,
            1,
            0.99,
            true,
            &mut SeededRng::new(0, 0),
        )
        .unwrap();
        // r − Q(1,1,0) = 0 − 0 for everyone
        assert_eq!(d, vec![vec![0.0]; 3]);
    }

    #[test]
    fn toy_delta_approaches_r_minus_qtilde() {
        let critic = PayoffCritic(toy_team_reward as fn(&[usize]) -> Result<f64>);
        let pols = vec![SoftmaxPolicy::new(2); 3];
        let d = compute_advantages(
            &one_step(vec![1, 1, 1], 3.0),
            &critic,
            &pols,
            10_000,
            0.99,
            false,
            &mut SeededRng::new(3, 0),
        )
        .unwrap();
        // Q̃(1) = 0.75 for every agent; sd of the 10^4-sample mean ≈ 0.013
        for row in d {
            assert!((row[0] - 2.25).abs() < 0.06, "{row:?}");
        }
    }

    #[test]
    fn ppo_zero_advantage_no_entropy_is_noop() {
        let mut pol = SoftmaxPolicy::new(3);
        pol.set_logits(&[1.0], vec![0.3, -0.2, 0.1]).unwrap();
        let before = pol.clone();
        let batch: Vec<PpoSample> = (0..3)
            .map(|a| PpoSample {
                observation: vec![1.0],
                action: a,
                old_log_prob: pol.log_prob(&[1.0], a).unwrap(),
                advantage: 0.0,
            })
            .collect();
        let settings = PpoSettings {
            epochs: 5,
            clip: 0.2,
            entropy_coef: 0.0,
            max_grad_norm: None,
        };
        for kind in [ActorOptimizer::Sgd, ActorOptimizer::Adam] {
            let mut p = before.clone();
            ppo_update(
                &mut p,
                &batch,
                &settings,
                &mut ActorState::new(kind, 0.1, 1e-5),
            )
            .unwrap();
            assert_eq!(p, before);
        }
    }

    #[test]
    fn ppo_clipped_sample_contributes_nothing() {
        let pol = SoftmaxPolicy::new(2);
        let clip = 0.2;
        // π_new(0) = 0.5; choose old so that ρ = 1 + 2ε
        let old = (0.5f64 / (1.0 + 2.0 * clip)).ln();
        let batch = vec![PpoSample {
            observation: vec![1.0],
            action: 0,
            old_log_prob: old,
            advantage: 1.0,
        }];
        let g = ppo_gradient(&pol, &batch, clip, 0.0).unwrap();
        assert_eq!(g.norm(), 0.0);
    }

    #[test]
    fn ppo_positive_advantage_raises_probability() {
        let mut pol = SoftmaxPolicy::new(3);
        let p0 = pol.action_probabilities(&[1.0]).unwrap().prob(2);
        let batch = vec![PpoSample {
            observation: vec![1.0],
            action: 2,
            old_log_prob: pol.log_prob(&[1.0], 2).unwrap(),
            advantage: 1.0,
        }];
        let settings = PpoSettings {
            epochs: 1,
            clip: 0.2,
            entropy_coef: 0.0,
            max_grad_norm: None,
        };
        ppo_update(
            &mut pol,
            &batch,
            &settings,
            &mut ActorState::new(ActorOptimizer::Sgd, 0.1, 1e-5),
        )
        .unwrap();
        assert!(pol.action_probabilities(&[1.0]).unwrap().prob(2) > p0);
    }

    #[test]
    fn ppo_rejects_non_finite_advantage() {
        let pol = SoftmaxPolicy::new(2);
        let batch = vec![PpoSample {
            observation: vec![1.0],
            action: 0,
            old_log_prob: 0.5f64.ln(),
            advantage: f64::NAN,
        }];
        assert!(matches!(
            ppo_gradient(&pol, &batch, 0.2, 0.0),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn critic_update_examples() {
        let mut rng = SeededRng::new(1, 0);
        let mut net = MlpCritic::new(3, &[8], &mut rng);
        let xs = [vec![1.0, 0.0, 0.5], vec![0.0, 1.0, -0.5]];
        let exact: Vec<CriticExample> = xs
            .iter()
            .map(|x| CriticExample::single(x.clone(), net.forward(x).unwrap()))
            .collect();
        let before = net.clone();
        let mut adam = AdamState::new(net.n_params(), 1e-3);
        assert_eq!(
            critic_update(&mut net, &exact, &mut adam, None).unwrap(),
            0.0
        );
        assert_eq!(net, before);

        let mut zero = MlpCritic::zeros(3, &[4]);
        let mut adam = AdamState::new(zero.n_params(), 1e-3);
        let loss = critic_update(
            &mut zero,
            &[CriticExample::single(xs[0].clone(), 2.5)],
            &mut adam,
            None,
        )
        .unwrap();
        assert_eq!(loss, 6.25);
    }

    #[test]
    fn critic_loss_non_increasing_on_fixed_batch() {
        let mut rng = SeededRng::new(2, 0);
        let mut net = MlpCritic::new(4, &[16], &mut rng);
        let batch: Vec<CriticExample> = (0..8)
            .map(|i| {
                let x: Vec<f64> = (0..4).map(|j| ((i * 4 + j) as f64 * 0.37).sin()).collect();
                CriticExample::single(x, (i as f64 * 0.5).cos())
            })
            .collect();
        let mut adam = AdamState::new(net.n_params(), 1e-3);
        let mut prev = f64::INFINITY;
        for _ in 0..100 {
            let loss = critic_update(&mut net, &batch, &mut adam, None).unwrap();
            assert!(loss <= prev + 1e-6, "{loss} > {prev}");
            prev = loss;
        }
    }

    #[test]
    fn critic_encoding_layout() {
        let c = CentralCritic::new(1, &[2, 3], &[4], &mut SeededRng::new(0, 0));
        let x = c.encode(&[0.5], 1, &[1, 2]).unwrap();
        assert_eq!(x, vec![0.5, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        assert!(c.encode(&[0.5], 2, &[1, 2]).is_err());
        assert!(c.encode(&[0.5], 0, &[2, 2]).is_err());
    }

    #[test]
    fn config_validation() {
        let base = TrainConfig::new(EnvConfig::ToyTeam, Algo::PerlaMappo);
        assert!(base.validate().is_ok());
        let mut c = base.clone();
        c.k = 0;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.clip = 1.0;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.discount = 1.0;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.seeds.clear();
        assert!(c.validate().is_err());
        let mut c = base;
        c.pin_samples = true;
        assert!(c.validate().is_err());
        c.k = 1;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn training_is_deterministic_and_valid() {
        let mut c = TrainConfig::new(
            EnvConfig::Penalty {
                n_agents: 2,
                n_actions: 3,
            },
            Algo::PerlaMappo,
        );
        c.k = 8;
        c.total_steps = 640;
        c.seeds = vec![4];
        let a = train_seed(&c, 4, true).unwrap();
        let b = train_seed(&c, 4, true).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.policies, b.policies);
        assert_eq!(a.trajectories, b.trajectories);
        assert_eq!(a.records.first().unwrap().step, 0);
        assert!(a.records.windows(2).all(|w| w[0].step < w[1].step));
        for rec in &a.records {
            for p in rec.action_probabilities.as_ref().unwrap() {
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(p.iter().all(|&x| x >= 0.0));
            }
        }
    }

    #[test]
    fn pinned_perla_equals_mappo() {
        let mut c = TrainConfig::new(
            EnvConfig::Coordination {
                payoff: crate::envs::DEFAULT_COORDINATION_TABLE,
            },
            Algo::Mappo,
        );
        c.total_steps = 640;
        let mappo = train_seed(&c, 9, true).unwrap();
        c.algo = Algo::PerlaMappo;
        c.k = 1;
        c.pin_samples = true;
        let perla = train_seed(&c, 9, true).unwrap();
        assert_eq!(mappo.trajectories, perla.trajectories);
        assert_eq!(mappo.records, perla.records);
        assert_eq!(mappo.policies, perla.policies);
    }
}
