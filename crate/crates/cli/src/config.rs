//! Experiment definitions read from TOML.

use std::path::{Path, PathBuf};

use perla_core::envs::EnvConfig;
use perla_core::trainer::{Algo, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Train,
    ScaleSweep,
    Variance,
    KAblation,
}

/// Agent and action counts for a penalty-game scaling sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub n_agents: Vec<usize>,
    pub n_actions: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VarianceConfig {
    pub trials: usize,
    pub k: Vec<usize>,
    #[serde(default)]
    pub theta: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub k: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub id: String,
    pub kind: ExperimentKind,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub parallel: Option<usize>,
    /// Algorithms to run; defaults to the one named in `[train]`.
    #[serde(default)]
    pub algos: Vec<Algo>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub variance: Option<VarianceConfig>,
    #[serde(default)]
    pub ablation: Option<AblationConfig>,
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, String), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
        let cfg = Self::parse(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        Ok((cfg, text))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.id.is_empty() || self.id.contains(['/', '\\', ',']) {
            return Err(invalid("id must be non-empty without '/', '\\' or ','"));
        }
        if self.parallel == Some(0) {
            return Err(invalid("parallel must be at least 1"));
        }
        let needs_train = self.kind != ExperimentKind::Variance;
        if needs_train != self.train.is_some() {
            return Err(invalid(if needs_train {
                "missing [train] section"
            } else {
                "variance experiments take no [train] section"
            }));
        }
        if (self.kind == ExperimentKind::ScaleSweep) != self.sweep.is_some() {
            return Err(invalid(
                "[sweep] is required for, and only for, scale_sweep",
            ));
        }
        if (self.kind == ExperimentKind::Variance) != self.variance.is_some() {
            return Err(invalid(
                "[variance] is required for, and only for, variance",
            ));
        }
        if (self.kind == ExperimentKind::KAblation) != self.ablation.is_some() {
            return Err(invalid(
                "[ablation] is required for, and only for, k_ablation",
            ));
        }
        if let Some(t) = &self.train {
            t.validate().map_err(|e| invalid(format!("[train]: {e}")))?;
        }
        if let Some(s) = &self.sweep {
            if s.n_agents.is_empty() || s.n_actions.is_empty() {
                return Err(invalid("sweep axes must be non-empty"));
            }
            if s.n_agents.iter().any(|&n| !(2..=20).contains(&n)) {
                return Err(invalid("sweep agent counts must lie in 2..=20"));
            }
            if s.n_actions.iter().any(|&a| !(3..=15).contains(&a)) {
                return Err(invalid("sweep action counts must lie in 3..=15"));
            }
            let t = self.train.as_ref().unwrap();
            if !matches!(t.env, EnvConfig::Penalty { .. }) {
                return Err(invalid("scale_sweep runs on the penalty game"));
            }
        }
        if let Some(v) = &self.variance {
            if v.trials < 2 {
                return Err(invalid("variance trials must be at least 2"));
            }
            if v.k.is_empty() || v.k.contains(&0) {
                return Err(invalid("variance k list must be non-empty and positive"));
            }
            if v.theta.iter().any(|t| !t.is_finite()) {
                return Err(invalid("theta values must be finite"));
            }
        }
        if let Some(a) = &self.ablation {
            if a.k.is_empty() || a.k.contains(&0) {
                return Err(invalid("ablation k list must be non-empty and positive"));
            }
        }
        Ok(())
    }

    pub fn algos(&self) -> Vec<Algo> {
        if !self.algos.is_empty() {
            return self.algos.clone();
        }
        self.train.iter().map(|t| t.algo).collect()
    }

    pub fn seeds(&self) -> Vec<u64> {
        match (&self.train, &self.variance) {
            (Some(t), _) => t.seeds.clone(),
            (None, Some(v)) => vec![v.seed],
            _ => Vec::new(),
        }
    }

    pub fn thetas(&self) -> Vec<f64> {
        match &self.variance {
            Some(v) if !v.theta.is_empty() => v.theta.clone(),
            _ => vec![0.0],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TRAIN: &str = r#"
id = "coord"
kind = "train"
algos = ["perla_mappo", "mappo"]

[train]
algo = "perla_mappo"
seeds = [0, 1]
total_steps = 128

[train.env]
kind = "coordination"
"#;

    #[test]
    fn parses_train_config() {
        let c = ExperimentConfig::parse(TRAIN).unwrap();
        assert_eq!(c.kind, ExperimentKind::Train);
        assert_eq!(c.algos(), vec![Algo::PerlaMappo, Algo::Mappo]);
        assert_eq!(c.seeds(), vec![0, 1]);
        assert_eq!(c.train.unwrap().k, 100);
    }

    #[test]
    fn unknown_key_rejected_with_location() {
        let text = TRAIN.replace("total_steps = 128", "total_steps = 128\nbogus = 1");
        let err = ExperimentConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
        assert!(err.contains("line"), "{err}");
    }

    #[test]
    fn empty_seed_list_rejected() {
        let text = TRAIN.replace("seeds = [0, 1]", "seeds = []");
        assert!(matches!(
            ExperimentConfig::parse(&text),
            Err(CliError::Validation(_))
        ));
    }

    #[test]
    fn sections_must_match_kind() {
        let text = TRAIN.replace("kind = \"train\"", "kind = \"k_ablation\"");
        assert!(ExperimentConfig::parse(&text).is_err());
        let v = "id = \"v\"\nkind = \"variance\"\n[variance]\ntrials = 10\nk = []\n";
        assert!(ExperimentConfig::parse(v).is_err());
        let v = "id = \"v\"\nkind = \"variance\"\n[variance]\ntrials = 10\nk = [1, 2]\n";
        let c = ExperimentConfig::parse(v).unwrap();
        assert_eq!(c.thetas(), vec![0.0]);
    }

    #[test]
    fn sweep_needs_penalty_game() {
        let text = TRAIN.replace("kind = \"train\"", "kind = \"scale_sweep\"")
            + "\n[sweep]\nn_agents = [2, 3]\nn_actions = [3]\n";
        assert!(ExperimentConfig::parse(&text).is_err());
    }
}
