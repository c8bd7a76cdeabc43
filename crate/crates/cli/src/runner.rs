//! Expands an experiment config into independent jobs, runs them and persists
//! the rows.

use std::path::{Path, PathBuf};

use perla_core::envs::EnvConfig;
use perla_core::estimators::EstimatorKind;
use perla_core::rng::SeededRng;
use perla_core::trainer::{train_seed, Algo, SeedRun, TrainConfig};
use perla_core::variance_lab::{measure_estimator_variance, ToyMoments, VarianceReport};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, ExperimentKind};
use crate::error::CliError;
use crate::results::{check_rows, sort_rows, write_atomic, write_csv, ResultRow};

#[derive(Clone, Debug)]
pub enum Job {
    Train {
        experiment: String,
        config: TrainConfig,
        seed: u64,
    },
    Variance {
        experiment: String,
        kind: EstimatorKind,
        trials: usize,
        theta: f64,
        seed: u64,
    },
}

impl Job {
    pub fn experiment(&self) -> &str {
        match self {
            Job::Train { experiment, .. } | Job::Variance { experiment, .. } => experiment,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Job::Train { seed, .. } | Job::Variance { seed, .. } => *seed,
        }
    }
}

fn estimator_label(kind: EstimatorKind) -> &'static str {
    match kind {
        EstimatorKind::Ctde => "ctde",
        EstimatorKind::Dt => "dt",
        EstimatorKind::Perla { .. } => "perla",
    }
}

fn estimator_k(kind: EstimatorKind) -> usize {
    match kind {
        EstimatorKind::Dt => 0,
        other => other.k().unwrap_or(1),
    }
}

pub fn variance_experiment(id: &str, kind: EstimatorKind, theta: f64) -> String {
    format!(
        "{id}/{}/k{}/theta{theta}",
        estimator_label(kind),
        estimator_k(kind)
    )
}

/// Every job of an experiment, in a fixed order.
pub fn expand(cfg: &ExperimentConfig) -> Vec<Job> {
    let id = &cfg.id;
    let mut jobs = Vec::new();
    let mut push_train = |experiment: String, config: TrainConfig| {
        for &seed in &config.seeds {
            jobs.push(Job::Train {
                experiment: experiment.clone(),
                config: config.clone(),
                seed,
            });
        }
    };
    match cfg.kind {
        ExperimentKind::Train => {
            for algo in cfg.algos() {
                let mut c = cfg.train.clone().unwrap();
                c.algo = algo;
                push_train(format!("{id}/{}", algo.name()), c);
            }
        }
        ExperimentKind::ScaleSweep => {
            let sweep = cfg.sweep.as_ref().unwrap();
            for algo in cfg.algos() {
                for &n in &sweep.n_agents {
                    for &a in &sweep.n_actions {
                        let mut c = cfg.train.clone().unwrap();
                        c.algo = algo;
                        c.env = EnvConfig::Penalty {
                            n_agents: n,
                            n_actions: a,
                        };
                        push_train(format!("{id}/{}/n{n}_a{a}", algo.name()), c);
                    }
                }
            }
        }
        ExperimentKind::KAblation => {
            let ks = &cfg.ablation.as_ref().unwrap().k;
            for algo in cfg.algos() {
                let grid: Vec<usize> = if algo == Algo::Mappo {
                    vec![1]
                } else {
                    ks.clone()
                };
                for k in grid {
                    let mut c = cfg.train.clone().unwrap();
                    c.algo = algo;
                    c.k = k;
                    push_train(format!("{id}/{}/k{k}", algo.name()), c);
                }
            }
        }
        ExperimentKind::Variance => {
            let v = cfg.variance.as_ref().unwrap();
            for theta in cfg.thetas() {
                let mut kinds = vec![EstimatorKind::Dt, EstimatorKind::Ctde];
                kinds.extend(v.k.iter().map(|&k| EstimatorKind::Perla { k }));
                for kind in kinds {
                    jobs.push(Job::Variance {
                        experiment: variance_experiment(id, kind, theta),
                        kind,
                        trials: v.trials,
                        theta,
                        seed: v.seed,
                    });
                }
            }
        }
    }
    jobs
}

fn train_rows(experiment: &str, config: &TrainConfig, run: &SeedRun) -> Vec<ResultRow> {
    let base = ResultRow {
        experiment: experiment.to_string(),
        env: config.env.name().to_string(),
        algo: config.algo.name().to_string(),
        n_agents: config.env.n_agents(),
        n_actions: config.env.n_actions(),
        k: config.effective_k(),
        seed: run.seed,
        step: 0,
        metric: String::new(),
        value: 0.0,
    };
    let mut rows = Vec::new();
    for rec in &run.records {
        let mut push = |metric: String, value: f64| {
            rows.push(ResultRow {
                step: rec.step,
                metric,
                value,
                ..base.clone()
            })
        };
        push("greedy_return".into(), rec.greedy_return);
        push("stochastic_return".into(), rec.stochastic_return);
        push("critic_loss".into(), rec.critic_loss);
        if let Some(probs) = &rec.action_probabilities {
            for (i, p) in probs.iter().enumerate() {
                for (a, &v) in p.iter().enumerate() {
                    push(format!("agent{i}_p{a}"), v);
                }
            }
        }
    }
    rows
}

fn variance_rows(experiment: &str, report: &VarianceReport, seed: u64) -> Vec<ResultRow> {
    let base = ResultRow {
        experiment: experiment.to_string(),
        env: "toy_team".into(),
        algo: estimator_label(report.kind).into(),
        n_agents: 3,
        n_actions: 2,
        k: estimator_k(report.kind),
        seed,
        step: 0,
        metric: String::new(),
        value: 0.0,
    };
    let mut rows = vec![
        ("mean", report.mean[0]),
        ("mean_ci95", report.mean_ci95[0]),
        ("variance", report.total_variance()),
        ("variance_ci95", report.total_variance_ci95()),
        ("trials", report.trials as f64),
    ];
    if let Ok(m) = ToyMoments::at(report.theta) {
        let analytic = match report.kind {
            EstimatorKind::Dt => m.var_dt,
            EstimatorKind::Ctde => m.var_ctde(),
            EstimatorKind::Perla { k } => m.var_perla(k),
        };
        rows.push(("analytic_variance", analytic));
    }
    rows.into_iter()
        .map(|(metric, value)| ResultRow {
            metric: metric.into(),
            value,
            ..base.clone()
        })
        .collect()
}

fn failure_row(job: &Job) -> ResultRow {
    let (env, algo, n_agents, n_actions, k) = match job {
        Job::Train { config, .. } => (
            config.env.name().to_string(),
            config.algo.name().to_string(),
            config.env.n_agents(),
            config.env.n_actions(),
            config.effective_k(),
        ),
        Job::Variance { kind, .. } => (
            "toy_team".into(),
            estimator_label(*kind).to_string(),
            3,
            2,
            estimator_k(*kind),
        ),
    };
    ResultRow {
        experiment: job.experiment().to_string(),
        env,
        algo,
        n_agents,
        n_actions,
        k,
        seed: job.seed(),
        step: 0,
        metric: "failed".into(),
        value: 1.0,
    }
}

/// Run one job; failures become a marker row plus the error text.
pub fn run_job(job: &Job) -> (Vec<ResultRow>, Option<String>) {
    let out = match job {
        Job::Train {
            experiment,
            config,
            seed,
        } => train_seed(config, *seed, false).map(|run| train_rows(experiment, config, &run)),
        Job::Variance {
            experiment,
            kind,
            trials,
            theta,
            seed,
        } => measure_estimator_variance(*kind, *trials, *theta, &SeededRng::new(*seed, 0))
            .map(|r| variance_rows(experiment, &r, *seed)),
    };
    match out {
        Ok(rows) => (rows, None),
        Err(e) => (
            vec![failure_row(job)],
            Some(format!("{} seed {}: {e}", job.experiment(), job.seed())),
        ),
    }
}

/// Run jobs on a pool of `parallel` threads; rows come back sorted.
pub fn run_jobs(jobs: &[Job], parallel: usize) -> Result<(Vec<ResultRow>, Vec<String>), CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel.max(1))
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let results: Vec<_> = pool.install(|| jobs.par_iter().map(run_job).collect());
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (r, f) in results {
        rows.extend(r);
        failures.extend(f);
    }
    sort_rows(&mut rows);
    Ok((rows, failures))
}

/// Add excess-over-DT and bound rows next to each variance measurement.
pub fn add_bound_rows(rows: &mut Vec<ResultRow>) {
    let mut extra = Vec::new();
    for r in rows
        .iter()
        .filter(|r| r.metric == "variance" && r.algo != "dt")
    {
        let theta_tag = r.experiment.rsplit('/').next().unwrap_or_default();
        let prefix = r.experiment.split('/').next().unwrap_or_default();
        let dt = rows.iter().find(|d| {
            d.metric == "variance"
                && d.algo == "dt"
                && d.experiment.starts_with(&format!("{prefix}/"))
                && d.experiment.ends_with(&format!("/{theta_tag}"))
        });
        let theta: f64 = theta_tag.trim_start_matches("theta").parse().unwrap_or(0.0);
        if let Some(dt) = dt {
            let p1 = perla_core::policy::sigmoid(theta);
            let b = p1.max(1.0 - p1);
            extra.push(ResultRow {
                metric: "excess_variance".into(),
                value: r.value - dt.value,
                ..r.clone()
            });
            extra.push(ResultRow {
                metric: "bound".into(),
                value: b * b * 9.0 / r.k.max(1) as f64,
                ..r.clone()
            });
        }
    }
    rows.extend(extra);
    sort_rows(rows);
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub id: String,
    pub kind: ExperimentKind,
    pub config_sha256: String,
    pub seeds: Vec<u64>,
    pub algos: Vec<String>,
    pub jobs: usize,
    pub rows: usize,
    pub failures: Vec<String>,
    pub csv: String,
    pub version: String,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub csv_path: PathBuf,
    pub manifest_path: PathBuf,
    pub rows: Vec<ResultRow>,
    pub failures: Vec<String>,
}

pub fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Run a parsed experiment and persist `<out>/<id>.csv` plus its manifest.
pub fn execute(
    cfg: &ExperimentConfig,
    config_text: &str,
    out_dir: &Path,
    parallel: usize,
) -> Result<RunOutcome, CliError> {
    let jobs = expand(cfg);
    let (mut rows, failures) = run_jobs(&jobs, parallel)?;
    if cfg.kind == ExperimentKind::Variance {
        add_bound_rows(&mut rows);
    }
    check_rows(&rows).map_err(|e| CliError::Runtime(e.to_string()))?;
    let csv_path = out_dir.join(format!("{}.csv", cfg.id));
    write_csv(&csv_path, &rows)?;
    let manifest = Manifest {
        id: cfg.id.clone(),
        kind: cfg.kind,
        config_sha256: sha256_hex(config_text),
        seeds: cfg.seeds(),
        algos: cfg.algos().iter().map(|a| a.name().to_string()).collect(),
        jobs: jobs.len(),
        rows: rows.len(),
        failures: failures.clone(),
        csv: format!("{}.csv", cfg.id),
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let manifest_path = out_dir.join(format!("{}.manifest.json", cfg.id));
    let json =
        serde_json::to_vec_pretty(&manifest).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_atomic(&manifest_path, &json)?;
    Ok(RunOutcome {
        csv_path,
        manifest_path,
        rows,
        failures,
    })
}

/// Resolve the output directory: explicit flag or environment, then config, then `results`.
pub fn resolve_out_dir(flag: Option<&Path>, cfg: &ExperimentConfig) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("results"))
}

/// Load, validate and run the experiment at `config_path`.
pub fn run_experiment(
    config_path: &Path,
    out_dir: Option<&Path>,
    parallel: Option<usize>,
) -> Result<RunOutcome, CliError> {
    let (cfg, text) = ExperimentConfig::load(config_path)?;
    if parallel == Some(0) {
        return Err(CliError::Validation("--parallel must be at least 1".into()));
    }
    let out = resolve_out_dir(out_dir, &cfg);
    let threads = parallel.or(cfg.parallel).unwrap_or(1);
    execute(&cfg, &text, &out, threads)
}
