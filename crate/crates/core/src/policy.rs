//! Stochastic policies with closed-form score functions.
//!
//! Two parameterisations are provided: a tabular softmax over discretised
//! observation keys, and a single-parameter logistic policy over two actions.
//! Gradients are returned as sparse row maps so that tabular policies only
//! carry the rows an observation actually touches.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Exact key of an observation vector (bit pattern of every component).
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ObsKey(pub Vec<u64>);

impl ObsKey {
    pub fn of(observation: &[f64]) -> Self {
        // -0.0 and 0.0 must land in the same row.
        ObsKey(
            observation
                .iter()
                .map(|&x| if x == 0.0 { 0u64 } else { x.to_bits() })
                .collect(),
        )
    }

    /// Key used by parameterisations that ignore the observation.
    pub fn unit() -> Self {
        ObsKey(Vec::new())
    }
}

/// Probability vector over an agent's actions.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionDistribution {
    probabilities: Vec<f64>,
}

impl ActionDistribution {
    pub fn new(probabilities: Vec<f64>) -> Result<Self> {
        if probabilities.is_empty() {
            return Err(Error::Input("empty action distribution".into()));
        }
        if probabilities.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Numeric(format!(
                "invalid probabilities {probabilities:?}"
            )));
        }
        let total: f64 = probabilities.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Numeric(format!(
                "probabilities sum to {total}, not 1"
            )));
        }
        Ok(Self { probabilities })
    }

    pub fn deterministic(n_actions: usize, action: usize) -> Self {
        let mut probabilities = vec![0.0; n_actions];
        probabilities[action] = 1.0;
        Self { probabilities }
    }

    pub fn uniform(n_actions: usize) -> Self {
        Self {
            probabilities: vec![1.0 / n_actions as f64; n_actions],
        }
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn prob(&self, action: usize) -> f64 {
        self.probabilities[action]
    }

    pub fn len(&self) -> usize {
        self.probabilities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probabilities.is_empty()
    }

    /// Inverse-CDF draw; consumes exactly one uniform.
    pub fn sample(&self, rng: &mut SeededRng) -> usize {
        let u = rng.uniform();
        let mut acc = 0.0;
        for (a, &p) in self.probabilities.iter().enumerate() {
            acc += p;
            if u < acc {
                return a;
            }
        }
        // u landed in the rounding gap above the cumulative sum
        self.probabilities
            .iter()
            .rposition(|&p| p > 0.0)
            .unwrap_or(self.probabilities.len() - 1)
    }

    /// Lowest-index action of maximal probability.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (a, &p) in self.probabilities.iter().enumerate() {
            if p > self.probabilities[best] {
                best = a;
            }
        }
        best
    }

    pub fn entropy(&self) -> f64 {
        -self
            .probabilities
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }
}

/// Sparse gradient over policy parameters, one dense row per observation key.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PolicyGradient {
    rows: BTreeMap<ObsKey, Vec<f64>>,
}

impl PolicyGradient {
    pub fn zeros() -> Self {
        Self::default()
    }

    pub fn from_row(key: ObsKey, row: Vec<f64>) -> Self {
        let mut rows = BTreeMap::new();
        rows.insert(key, row);
        Self { rows }
    }

    pub fn rows(&self) -> impl Iterator<Item = (&ObsKey, &Vec<f64>)> {
        self.rows.iter()
    }

    pub fn row(&self, key: &ObsKey) -> Option<&[f64]> {
        self.rows.get(key).map(Vec::as_slice)
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &PolicyGradient, scale: f64) {
        for (key, row) in &other.rows {
            let dst = self
                .rows
                .entry(key.clone())
                .or_insert_with(|| vec![0.0; row.len()]);
            for (d, s) in dst.iter_mut().zip(row) {
                *d += scale * s;
            }
        }
    }

    pub fn add_row_scaled(&mut self, key: &ObsKey, row: &[f64], scale: f64) {
        let dst = self
            .rows
            .entry(key.clone())
            .or_insert_with(|| vec![0.0; row.len()]);
        for (d, s) in dst.iter_mut().zip(row) {
            *d += scale * s;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for row in self.rows.values_mut() {
            for x in row {
                *x *= factor;
            }
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.rows.values().flatten().map(|x| x * x).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.rows
            .values()
            .flatten()
            .fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Value of a single-parameter gradient (the logistic policy).
    pub fn scalar(&self) -> Option<f64> {
        match self.rows.get(&ObsKey::unit()) {
            Some(row) if row.len() == 1 && self.rows.len() == 1 => Some(row[0]),
            _ => None,
        }
    }

    /// Every component, flattened in key order.
    pub fn flatten(&self) -> Vec<f64> {
        self.rows.values().flatten().copied().collect()
    }
}

/// A stochastic decentralised policy acting on a local observation.
pub trait StochasticPolicy {
    fn n_actions(&self) -> usize;

    fn action_probabilities(&self, observation: &[f64]) -> Result<ActionDistribution>;

    /// Score function: gradient of `log π(action | observation)` w.r.t. the parameters.
    fn log_prob_gradient(&self, observation: &[f64], action: usize) -> Result<PolicyGradient>;

    fn sample_action(&self, observation: &[f64], rng: &mut SeededRng) -> Result<usize> {
        Ok(self.action_probabilities(observation)?.sample(rng))
    }

    fn log_prob(&self, observation: &[f64], action: usize) -> Result<f64> {
        check_action(action, self.n_actions())?;
        Ok(self.action_probabilities(observation)?.prob(action).ln())
    }
}

impl<P: StochasticPolicy + ?Sized> StochasticPolicy for &P {
    fn n_actions(&self) -> usize {
        (**self).n_actions()
    }
    fn action_probabilities(&self, observation: &[f64]) -> Result<ActionDistribution> {
        (**self).action_probabilities(observation)
    }
    fn log_prob_gradient(&self, observation: &[f64], action: usize) -> Result<PolicyGradient> {
        (**self).log_prob_gradient(observation, action)
    }
}

impl<P: StochasticPolicy + ?Sized> StochasticPolicy for Box<P> {
    fn n_actions(&self) -> usize {
        (**self).n_actions()
    }
    fn action_probabilities(&self, observation: &[f64]) -> Result<ActionDistribution> {
        (**self).action_probabilities(observation)
    }
    fn log_prob_gradient(&self, observation: &[f64], action: usize) -> Result<PolicyGradient> {
        (**self).log_prob_gradient(observation, action)
    }
}

fn check_action(action: usize, n_actions: usize) -> Result<()> {
    if action >= n_actions {
        return Err(Error::Input(format!(
            "action {action} out of range for {n_actions} actions"
        )));
    }
    Ok(())
}

/// Numerically stable softmax of `logits / temperature`.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("non-finite logits {logits:?}")));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .map(|&x| ((x - max) / temperature).exp())
        .collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Tabular softmax policy: one logit row per observation key.
///
/// Observations never seen before map to an all-zero row, i.e. the uniform
/// distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxPolicy {
    n_actions: usize,
    temperature: f64,
    logits: BTreeMap<ObsKey, Vec<f64>>,
}

impl SoftmaxPolicy {
    pub fn new(n_actions: usize) -> Self {
        Self::with_temperature(n_actions, 1.0)
    }

    pub fn with_temperature(n_actions: usize, temperature: f64) -> Self {
        assert!(n_actions >= 1, "softmax policy needs at least one action");
        assert!(
            temperature > 0.0 && temperature.is_finite(),
            "temperature must be positive"
        );
        Self {
            n_actions,
            temperature,
            logits: BTreeMap::new(),
        }
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn logits(&self, observation: &[f64]) -> Vec<f64> {
        self.logits
            .get(&ObsKey::of(observation))
            .cloned()
            .unwrap_or_else(|| vec![0.0; self.n_actions])
    }

    pub fn set_logits(&mut self, observation: &[f64], row: Vec<f64>) -> Result<()> {
        if row.len() != self.n_actions {
            return Err(Error::Input(format!(
                "logit row of length {} for {} actions",
                row.len(),
                self.n_actions
            )));
        }
        self.logits.insert(ObsKey::of(observation), row);
        Ok(())
    }

    pub fn n_rows(&self) -> usize {
        self.logits.len()
    }

    pub fn rows(&self) -> impl Iterator<Item = (&ObsKey, &Vec<f64>)> {
        self.logits.iter()
    }

    /// `θ += step · gradient`.
    pub fn apply_gradient(&mut self, gradient: &PolicyGradient, step: f64) -> Result<()> {
        for (key, row) in gradient.rows() {
            if row.len() != self.n_actions {
                return Err(Error::Input(format!(
                    "gradient row of length {} for {} actions",
                    row.len(),
                    self.n_actions
                )));
            }
            let dst = self
                .logits
                .entry(key.clone())
                .or_insert_with(|| vec![0.0; row.len()]);
            for (d, g) in dst.iter_mut().zip(row) {
                *d += step * g;
            }
        }
        Ok(())
    }

    /// Gradient of the policy entropy at `observation` w.r.t. that logit row.
    pub fn entropy_gradient(&self, observation: &[f64]) -> Result<PolicyGradient> {
        let p = self.action_probabilities(observation)?;
        let h = p.entropy();
        let row = p
            .probabilities()
            .iter()
            .map(|&pa| {
                if pa > 0.0 {
                    -pa * (pa.ln() + h) / self.temperature
                } else {
                    0.0
                }
            })
            .collect();
        Ok(PolicyGradient::from_row(ObsKey::of(observation), row))
    }

    pub fn is_finite(&self) -> bool {
        self.logits.values().flatten().all(|x| x.is_finite())
    }
}

impl StochasticPolicy for SoftmaxPolicy {
    fn n_actions(&self) -> usize {
        self.n_actions
    }

    fn action_probabilities(&self, observation: &[f64]) -> Result<ActionDistribution> {
        let probs = match self.logits.get(&ObsKey::of(observation)) {
            Some(row) => softmax(row, self.temperature)?,
            None => return Ok(ActionDistribution::uniform(self.n_actions)),
        };
        Ok(ActionDistribution {
            probabilities: probs,
        })
    }

    fn log_prob_gradient(&self, observation: &[f64], action: usize) -> Result<PolicyGradient> {
        check_action(action, self.n_actions)?;
        let p = self.action_probabilities(observation)?;
        let row = p
            .probabilities()
            .iter()
            .enumerate()
            .map(|(a, &pa)| ((a == action) as u8 as f64 - pa) / self.temperature)
            .collect();
        Ok(PolicyGradient::from_row(ObsKey::of(observation), row))
    }
}

/// Two-action policy with `P(action = 1) = σ(θ)`, independent of the observation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmoidPolicy {
    pub theta: f64,
}

impl SigmoidPolicy {
    pub fn new(theta: f64) -> Self {
        Self { theta }
    }

    pub fn p_one(&self) -> f64 {
        sigmoid(self.theta)
    }

    /// Score of `action` as a plain scalar.
    pub fn score(&self, action: usize) -> f64 {
        let s = self.p_one();
        if action == 1 {
            1.0 - s
        } else {
            -s
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl StochasticPolicy for SigmoidPolicy {
    fn n_actions(&self) -> usize {
        2
    }

    fn action_probabilities(&self, _observation: &[f64]) -> Result<ActionDistribution> {
        if !self.theta.is_finite() {
            return Err(Error::Numeric(format!("non-finite theta {}", self.theta)));
        }
        let p1 = self.p_one();
        Ok(ActionDistribution {
            probabilities: vec![1.0 - p1, p1],
        })
    }

    fn log_prob_gradient(&self, _observation: &[f64], action: usize) -> Result<PolicyGradient> {
        check_action(action, 2)?;
        Ok(PolicyGradient::from_row(
            ObsKey::unit(),
            vec![self.score(action)],
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn uniform_softmax_for_zero_logits() {
        let p = SoftmaxPolicy::new(3).action_probabilities(&[0.0]).unwrap();
        for &x in p.probabilities() {
            assert!(close(x, 1.0 / 3.0, 1e-15));
        }
    }

    #[test]
    fn softmax_of_ln2() {
        let mut pol = SoftmaxPolicy::new(3);
        pol.set_logits(&[1.0], vec![2f64.ln(), 0.0, 0.0]).unwrap();
        let p = pol.action_probabilities(&[1.0]).unwrap();
        assert!(close(p.prob(0), 0.5, 1e-12));
        assert!(close(p.prob(1), 0.25, 1e-12));
        assert!(close(p.prob(2), 0.25, 1e-12));
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let p = SigmoidPolicy::new(0.0).action_probabilities(&[]).unwrap();
        assert_eq!(p.prob(1), 0.5);
    }

    #[test]
    fn non_finite_logits_are_rejected() {
        let mut pol = SoftmaxPolicy::new(2);
        pol.set_logits(&[0.0], vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(
            pol.action_probabilities(&[0.0]),
            Err(Error::Numeric(_))
        ));
        assert!(SigmoidPolicy::new(f64::INFINITY)
            .action_probabilities(&[])
            .is_err());
    }

    #[test]
    fn score_of_uniform_softmax() {
        let g = SoftmaxPolicy::new(3).log_prob_gradient(&[0.0], 0).unwrap();
        let row = g.row(&ObsKey::of(&[0.0])).unwrap();
        assert!(close(row[0], 2.0 / 3.0, 1e-15));
        assert!(close(row[1], -1.0 / 3.0, 1e-15));
        assert!(close(row[2], -1.0 / 3.0, 1e-15));
    }

    #[test]
    fn score_is_zero_off_the_observation_row() {
        let mut pol = SoftmaxPolicy::new(2);
        pol.set_logits(&[1.0], vec![0.3, -0.2]).unwrap();
        let g = pol.log_prob_gradient(&[2.0], 1).unwrap();
        assert!(g.row(&ObsKey::of(&[1.0])).is_none());
        assert_eq!(g.rows().count(), 1);
    }

    #[test]
    fn sigmoid_scores() {
        let pol = SigmoidPolicy::new(0.0);
        assert_eq!(pol.log_prob_gradient(&[], 1).unwrap().scalar(), Some(0.5));
        assert_eq!(pol.log_prob_gradient(&[], 0).unwrap().scalar(), Some(-0.5));
    }

    #[test]
    fn out_of_range_action() {
        assert!(SoftmaxPolicy::new(2).log_prob_gradient(&[], 2).is_err());
        assert!(SigmoidPolicy::new(0.0).log_prob_gradient(&[], 3).is_err());
    }

    #[test]
    fn deterministic_distribution_always_samples_its_action() {
        let d = ActionDistribution::deterministic(3, 0);
        let mut rng = SeededRng::new(9, 0);
        for _ in 0..1000 {
            assert_eq!(d.sample(&mut rng), 0);
        }
    }

    #[test]
    fn uniform_binary_frequency() {
        let pol = SoftmaxPolicy::new(2);
        let mut rng = SeededRng::new(11, 0);
        let n = 100_000;
        let zeros = (0..n)
            .filter(|_| pol.sample_action(&[0.0], &mut rng).unwrap() == 0)
            .count();
        let freq = zeros as f64 / n as f64;
        assert!((freq - 0.5).abs() <= 0.01, "freq {freq}");
    }

    #[test]
    fn sampling_replays_with_seed() {
        let mut pol = SoftmaxPolicy::new(4);
        pol.set_logits(&[0.0], vec![0.1, 0.7, -0.3, 0.2]).unwrap();
        let draw = |seed| {
            let mut rng = SeededRng::new(seed, 3);
            (0..50)
                .map(|_| pol.sample_action(&[0.0], &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
    }

    #[test]
    fn entropy_gradient_matches_finite_differences() {
        let mut pol = SoftmaxPolicy::new(3);
        let obs = [0.5];
        pol.set_logits(&obs, vec![0.4, -1.1, 0.2]).unwrap();
        let g = pol.entropy_gradient(&obs).unwrap();
        let row = g.row(&ObsKey::of(&obs)).unwrap().to_vec();
        let h = 1e-6;
        for a in 0..3 {
            let mut plus = pol.clone();
            let mut minus = pol.clone();
            let mut l = pol.logits(&obs);
            l[a] += h;
            plus.set_logits(&obs, l.clone()).unwrap();
            l[a] -= 2.0 * h;
            minus.set_logits(&obs, l).unwrap();
            let fd = (plus.action_probabilities(&obs).unwrap().entropy()
                - minus.action_probabilities(&obs).unwrap().entropy())
                / (2.0 * h);
            assert!(close(row[a], fd, 1e-8), "{} vs {}", row[a], fd);
        }
    }
}
