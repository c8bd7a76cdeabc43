//! Monte-Carlo measurement of policy-gradient estimator variance on the
//! three-agent toy team game.
//!
//! Agent 0 plays `SigmoidPolicy(θ)`, agents 1 and 2 play uniformly, and the
//! critic is the exact payoff. One trial is one single-step episode and one
//! estimator evaluation; every trial draws from its own rng stream so the
//! parallel and serial results coincide exactly.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envs::matrix::{toy_team_reward, MatrixGame, MatrixGameSpec};
use crate::error::{Error, Result};
use crate::estimators::{
    exact_qtilde, gradient_ctde, gradient_dt, gradient_perla, marginalized_q,
    sample_counterfactual_joint_actions, EstimatorKind, PayoffCritic,
};
use crate::game::{JointAction, Trajectory, Transition};
use crate::policy::{sigmoid, SigmoidPolicy, SoftmaxPolicy, StochasticPolicy};
use crate::rng::{purpose, SeededRng};

/// 97.5% standard normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;
/// 99.5% standard normal quantile.
pub const Z99: f64 = 2.575_829_303_548_901;

/// Toy-game action value; the game is stateless and one-shot, so `Q = r`.
pub fn analytic_q_toy(joint: &[usize]) -> Result<f64> {
    toy_team_reward(joint)
}

/// `Q̃(a_1)` with the two other agents uniform.
pub fn analytic_qtilde_toy(a1: usize) -> Result<f64> {
    if a1 > 1 {
        return Err(Error::Input(format!("toy action {a1} out of range")));
    }
    let mut total = 0.0;
    for a2 in 0..2 {
        for a3 in 0..2 {
            total += 0.25 * toy_team_reward(&[a1, a2, a3])?;
        }
    }
    Ok(total)
}

/// Exact moments of the toy game at a given `θ`, by enumeration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyMoments {
    pub theta: f64,
    pub mean_gradient: f64,
    pub var_dt: f64,
    /// `Var(g^P(k)) − Var(g^D) = excess / k`.
    pub excess: f64,
    pub var_q: f64,
    pub var_qtilde: f64,
}

impl ToyMoments {
    pub fn at(theta: f64) -> Result<Self> {
        let pol = SigmoidPolicy::new(theta);
        let p1 = sigmoid(theta);
        let pa = [1.0 - p1, p1];
        let qt = [analytic_qtilde_toy(0)?, analytic_qtilde_toy(1)?];
        let mut mean_g = 0.0;
        let mut second_g = 0.0;
        let mut excess = 0.0;
        let mut mean_q = 0.0;
        let mut second_q = 0.0;
        let mut mean_qt = 0.0;
        let mut second_qt = 0.0;
        for a1 in 0..2 {
            let score = pol.score(a1);
            let g = qt[a1] * score;
            mean_g += pa[a1] * g;
            second_g += pa[a1] * g * g;
            mean_qt += pa[a1] * qt[a1];
            second_qt += pa[a1] * qt[a1] * qt[a1];
            let mut cond_second = 0.0;
            for a2 in 0..2 {
                for a3 in 0..2 {
                    let q = toy_team_reward(&[a1, a2, a3])?;
                    cond_second += 0.25 * q * q;
                    mean_q += pa[a1] * 0.25 * q;
                    second_q += pa[a1] * 0.25 * q * q;
                }
            }
            let cond_var = cond_second - qt[a1] * qt[a1];
            excess += pa[a1] * score * score * cond_var;
        }
        Ok(Self {
            theta,
            mean_gradient: mean_g,
            var_dt: second_g - mean_g * mean_g,
            excess,
            var_q: second_q - mean_q * mean_q,
            var_qtilde: second_qt - mean_qt * mean_qt,
        })
    }

    pub fn var_perla(&self, k: usize) -> f64 {
        self.var_dt + self.excess / k as f64
    }

    pub fn var_ctde(&self) -> f64 {
        self.var_perla(1)
    }

    /// `(1/k)·Var(Q) + ((k−1)/k)·Var(Q̃)`.
    pub fn var_qhat(&self, k: usize) -> f64 {
        let k = k as f64;
        self.var_q / k + (k - 1.0) / k * self.var_qtilde
    }
}

/// Summary of `trials` independent estimator evaluations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub kind: EstimatorKind,
    pub k: Option<usize>,
    pub trials: usize,
    pub theta: f64,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub mean_ci95: Vec<f64>,
    pub variance_ci95: Vec<f64>,
}

impl VarianceReport {
    /// Sum of per-parameter variances.
    pub fn total_variance(&self) -> f64 {
        self.variance.iter().sum()
    }

    pub fn total_variance_ci95(&self) -> f64 {
        self.variance_ci95.iter().map(|h| h * h).sum::<f64>().sqrt()
    }

    /// 99% half-width of the mean of parameter `p`.
    pub fn mean_ci99(&self, p: usize) -> f64 {
        self.mean_ci95[p] / Z95 * Z99
    }
}

/// Sample mean, unbiased variance and normal-theory 95% half-widths of both.
pub fn moments(values: &[f64]) -> Result<(f64, f64, f64, f64)> {
    if values.len() < 2 {
        return Err(Error::Input("need at least two values".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let m2 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    let m4 = values.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    let var = m2 / (n - 1.0);
    let var_of_var = ((m4 - var * var * (n - 3.0) / (n - 1.0)) / n).max(0.0);
    Ok((mean, var, Z95 * (var / n).sqrt(), Z95 * var_of_var.sqrt()))
}

fn toy_policies(theta: f64) -> (SigmoidPolicy, Vec<Box<dyn StochasticPolicy + Sync>>) {
    let agent = SigmoidPolicy::new(theta);
    let joint: Vec<Box<dyn StochasticPolicy + Sync>> = vec![
        Box::new(agent),
        Box::new(SoftmaxPolicy::new(2)),
        Box::new(SoftmaxPolicy::new(2)),
    ];
    (agent, joint)
}

fn toy_episode(joint: Vec<usize>, reward: f64) -> Trajectory {
    Trajectory {
        transitions: vec![Transition {
            state: vec![1.0],
            observations: vec![vec![1.0]; 3],
            joint_action: JointAction(joint),
            reward,
            next_state: None,
            next_observations: None,
            terminal: true,
        }],
        seed: 0,
    }
}

/// One estimator evaluation on a freshly sampled toy episode.
pub fn toy_gradient_trial(kind: EstimatorKind, theta: f64, rng: &mut SeededRng) -> Result<f64> {
    kind.validate()?;
    let (agent, joint_policy) = toy_policies(theta);
    let obs = vec![vec![1.0]; 3];
    let joint = crate::game::sample_joint_action(&joint_policy, &obs, rng)?;
    let reward = toy_team_reward(&joint.0)?;
    let episode = toy_episode(joint.0.clone(), reward);
    let critic = PayoffCritic(analytic_q_toy);
    let g = match kind {
        EstimatorKind::Ctde => gradient_ctde(&episode, &[reward], &agent, 0, 1.0)?,
        EstimatorKind::Dt => {
            let env = MatrixGame::new(MatrixGameSpec::toy_team(), 0.0)?;
            let qt = exact_qtilde(&env, &joint_policy, &obs, 0, joint.0[0])?;
            gradient_dt(&episode, &[qt], &agent, 0, 1.0)?
        }
        EstimatorKind::Perla { k } => {
            gradient_perla(&episode, &critic, &joint_policy, 0, k, 1.0, rng)?
        }
    };
    g.scalar()
        .ok_or_else(|| Error::Numeric("toy gradient is not a scalar".into()))
}

fn trial_values<F>(trials: usize, rng: &SeededRng, stream: u64, f: F) -> Result<Vec<f64>>
where
    F: Fn(&mut SeededRng) -> Result<f64> + Sync,
{
    let base = rng.derive(purpose::TRIAL, stream);
    (0..trials)
        .into_par_iter()
        .map(|t| f(&mut base.derive(purpose::TRIAL, t as u64)))
        .collect()
}

/// Empirical mean and variance of an estimator's gradient for `θ`.
pub fn measure_estimator_variance(
    kind: EstimatorKind,
    trials: usize,
    theta: f64,
    rng: &SeededRng,
) -> Result<VarianceReport> {
    kind.validate()?;
    if trials < 2 {
        return Err(Error::Input("need at least two trials".into()));
    }
    if !theta.is_finite() {
        return Err(Error::Input(format!("theta {theta}")));
    }
    let stream = match kind {
        EstimatorKind::Ctde => 1,
        EstimatorKind::Dt => 2,
        EstimatorKind::Perla { k } => 1_000 + k as u64,
    };
    let values = trial_values(trials, rng, stream, |r| toy_gradient_trial(kind, theta, r))?;
    let (mean, var, mean_h, var_h) = moments(&values)?;
    Ok(VarianceReport {
        kind,
        k: match kind {
            EstimatorKind::Dt => None,
            other => other.k(),
        },
        trials,
        theta,
        mean: vec![mean],
        variance: vec![var],
        mean_ci95: vec![mean_h],
        variance_ci95: vec![var_h],
    })
}

/// Measured `Var(Q̂_k)` against its decomposition into `Var(Q)` and `Var(Q̃)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Check {
    pub k: usize,
    pub trials: usize,
    pub measured: f64,
    pub predicted: f64,
    pub residual: f64,
    /// Bootstrap 95% half-width of the measured variance.
    pub ci95: f64,
}

/// Percentile-bootstrap 95% half-width of the sample variance.
pub fn bootstrap_variance_ci(values: &[f64], resamples: usize, rng: &SeededRng) -> Result<f64> {
    if values.len() < 2 || resamples < 2 {
        return Err(Error::Input(
            "bootstrap needs two values and two resamples".into(),
        ));
    }
    let n = values.len();
    let mut vars: Vec<f64> = (0..resamples)
        .into_par_iter()
        .map(|b| {
            let mut r = rng.derive(purpose::BOOTSTRAP, b as u64);
            let (mut s, mut s2) = (0.0, 0.0);
            for _ in 0..n {
                let v = values[r.below(n)];
                s += v;
                s2 += v * v;
            }
            let mean = s / n as f64;
            (s2 - n as f64 * mean * mean) / (n as f64 - 1.0)
        })
        .collect();
    vars.sort_by(f64::total_cmp);
    let q = |p: f64| vars[((p * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    Ok((q(0.975) - q(0.025)) / 2.0)
}

pub const BOOTSTRAP_RESAMPLES: usize = 200;

/// `|Var̂(Q̂_k) − [(1/k)Var(Q) + ((k−1)/k)Var(Q̃)]|` at `θ = 0`.
pub fn check_theorem1(k: usize, trials: usize, rng: &SeededRng) -> Result<Theorem1Check> {
    if k == 0 || trials < 2 {
        return Err(Error::Input("need k ≥ 1 and at least two trials".into()));
    }
    let moments_at = ToyMoments::at(0.0)?;
    let critic = PayoffCritic(analytic_q_toy);
    let values = trial_values(trials, rng, 10_000 + k as u64, |r| {
        let (_, joint_policy) = toy_policies(0.0);
        let obs = vec![vec![1.0]; 3];
        let a1 = joint_policy[0].sample_action(&obs[0], r)?;
        let samples = sample_counterfactual_joint_actions(&joint_policy, &obs, 0, a1, k, r)?;
        marginalized_q(&critic, &[1.0], a1, &samples)
    })?;
    let (_, measured, _, _) = moments(&values)?;
    let ci95 = bootstrap_variance_ci(
        &values,
        BOOTSTRAP_RESAMPLES,
        &rng.derive(purpose::BOOTSTRAP, k as u64),
    )?;
    let predicted = moments_at.var_qhat(k);
    Ok(Theorem1Check {
        k,
        trials,
        measured,
        predicted,
        residual: (measured - predicted).abs(),
        ci95,
    })
}

/// Measured excess variance over the decentralised estimator against
/// `B²C²·Σγ^{2t} / k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub kind: EstimatorKind,
    pub theta: f64,
    /// Sup-norm of the score.
    pub b: f64,
    /// Sup of `|Q|`.
    pub c: f64,
    pub gamma: f64,
    /// `Σ_t γ^{2t}` over the episode; 1 for the one-step toy game.
    pub discount_sum: f64,
    pub k: usize,
    pub bound: f64,
    pub measured_excess: f64,
    /// 95% half-width of the measured excess.
    pub ci_slack: f64,
    pub satisfied: bool,
}

/// Compare `kind` (`Ctde` or `Perla`) with the decentralised estimator.
pub fn check_bounds(
    kind: EstimatorKind,
    trials: usize,
    theta: f64,
    rng: &SeededRng,
) -> Result<BoundCheck> {
    let k = match kind {
        EstimatorKind::Dt => {
            return Err(Error::Input("bound compares CT-DE or PERLA with DT".into()))
        }
        other => other.k().unwrap_or(1),
    };
    let ours = measure_estimator_variance(kind, trials, theta, rng)?;
    let dt = measure_estimator_variance(EstimatorKind::Dt, trials, theta, rng)?;
    let p1 = sigmoid(theta);
    let b = p1.max(1.0 - p1);
    let c = 3.0;
    let discount_sum = 1.0;
    let bound = b * b * c * c * discount_sum / k as f64;
    let measured_excess = ours.total_variance() - dt.total_variance();
    let ci_slack = ours.total_variance_ci95().hypot(dt.total_variance_ci95());
    Ok(BoundCheck {
        kind,
        theta,
        b,
        c,
        gamma: 0.0,
        discount_sum,
        k,
        bound,
        measured_excess,
        ci_slack,
        satisfied: bound >= 0.0 && measured_excess <= bound + ci_slack,
    })
}

/// Least-squares line `y = slope·x + intercept`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Input("fit needs two or more paired points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Numeric("all x values equal".into()));
    }
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 {
        1.0
    } else {
        sxy * sxy / (sxx * syy)
    };
    Ok(LinearFit {
        slope,
        intercept: my - slope * mx,
        r_squared,
    })
}
