//! Cross-seed statistics and charts from a results CSV.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use perla_core::variance_lab::linear_fit;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::chart::{LineChart, Point, Series};
use crate::error::CliError;
use crate::results::{read_csv, write_atomic, ResultRow};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub experiment: String,
    pub env: String,
    pub algo: String,
    pub n_agents: usize,
    pub n_actions: usize,
    pub k: usize,
    pub metric: String,
    pub step: usize,
    pub n_seeds: usize,
    pub mean: f64,
    /// Student-t 95% half-width across seeds; 0 for a single seed.
    pub ci95: f64,
}

/// Mean and t-based 95% half-width.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    let t = StudentsT::new(0.0, 1.0, n as f64 - 1.0)
        .map(|d| d.inverse_cdf(0.975))
        .unwrap_or(f64::NAN);
    (mean, t * (var / n as f64).sqrt())
}

type GroupKey = (String, String, String, usize, usize, usize, String, usize);

pub fn summarize_rows(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<GroupKey, Vec<f64>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((
                r.experiment.clone(),
                r.env.clone(),
                r.algo.clone(),
                r.n_agents,
                r.n_actions,
                r.k,
                r.metric.clone(),
                r.step,
            ))
            .or_default()
            .push(r.value);
    }
    groups
        .into_iter()
        .map(
            |((experiment, env, algo, n_agents, n_actions, k, metric, step), v)| {
                let (mean, ci95) = mean_ci95(&v);
                SummaryRow {
                    experiment,
                    env,
                    algo,
                    n_agents,
                    n_actions,
                    k,
                    metric,
                    step,
                    n_seeds: v.len(),
                    mean,
                    ci95,
                }
            },
        )
        .collect()
}

/// Learning-curve charts: one per metric, one series per experiment.
pub fn curve_charts(summary: &[SummaryRow]) -> Vec<(String, LineChart)> {
    let mut by_metric: BTreeMap<&str, BTreeMap<&str, Vec<Point>>> = BTreeMap::new();
    for s in summary {
        by_metric
            .entry(&s.metric)
            .or_default()
            .entry(&s.experiment)
            .or_default()
            .push(Point {
                x: s.step as f64,
                y: s.mean,
                spread: s.ci95,
            });
    }
    by_metric
        .into_iter()
        .filter(|(_, series)| series.values().any(|p| p.len() > 1))
        .map(|(metric, series)| {
            let chart = LineChart {
                title: metric.to_string(),
                x_label: "environment steps".into(),
                y_label: metric.to_string(),
                log_x: false,
                log_y: false,
                series: series
                    .into_iter()
                    .map(|(name, points)| Series {
                        name: name.to_string(),
                        points,
                    })
                    .collect(),
                annotation: None,
            };
            (metric.to_string(), chart)
        })
        .collect()
}

/// Log-log plot of PERLA variance and its excess over DT against `k`, with
/// the fitted log-log slope of the excess.
pub fn variance_chart(summary: &[SummaryRow]) -> Option<LineChart> {
    let perla = |metric: &str| -> Vec<Point> {
        let mut pts: Vec<Point> = summary
            .iter()
            .filter(|s| s.algo == "perla" && s.metric == metric)
            .map(|s| Point {
                x: s.k as f64,
                y: s.mean,
                spread: 0.0,
            })
            .collect();
        pts.sort_by(|a, b| a.x.total_cmp(&b.x));
        pts
    };
    let variance = perla("variance");
    if variance.len() < 2 {
        return None;
    }
    let excess: Vec<Point> = perla("excess_variance")
        .into_iter()
        .filter(|p| p.y > 0.0)
        .collect();
    let annotation = if excess.len() >= 2 {
        let lx: Vec<f64> = excess.iter().map(|p| p.x.ln()).collect();
        let ly: Vec<f64> = excess.iter().map(|p| p.y.ln()).collect();
        linear_fit(&lx, &ly)
            .ok()
            .map(|f| format!("excess slope {:.2} (R² {:.3})", f.slope, f.r_squared))
    } else {
        None
    };
    let mut series = vec![Series {
        name: "Var(g^P(k))".into(),
        points: variance,
    }];
    if !excess.is_empty() {
        series.push(Series {
            name: "Var(g^P(k)) − Var(g^D)".into(),
            points: excess,
        });
    }
    Some(LineChart {
        title: "PERLA gradient variance against k".into(),
        x_label: "k".into(),
        y_label: "variance".into(),
        log_x: true,
        log_y: true,
        series,
        annotation,
    })
}

#[derive(Debug)]
pub struct SummaryOutcome {
    pub summary_path: PathBuf,
    pub charts: Vec<PathBuf>,
    pub rows: Vec<SummaryRow>,
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("results");
    path.with_file_name(format!("{stem}{suffix}"))
}

fn safe(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '_' {
                c
            } else {
                '-'
            }
        })
        .collect()
}

/// Summarise `csv_path` into `<stem>.summary.csv` and, with `plot`, SVG charts.
pub fn summarize(csv_path: &Path, plot: bool) -> Result<SummaryOutcome, CliError> {
    let rows = read_csv(csv_path)?;
    let summary = summarize_rows(&rows);
    let mut w = csv::Writer::from_writer(Vec::new());
    for s in &summary {
        w.serialize(s)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let summary_path = sibling(csv_path, ".summary.csv");
    write_atomic(&summary_path, &bytes)?;
    let mut charts = Vec::new();
    if plot {
        for (metric, chart) in curve_charts(&summary) {
            let p = sibling(csv_path, &format!(".{}.svg", safe(&metric)));
            write_atomic(&p, chart.to_svg().as_bytes())?;
            charts.push(p);
        }
        if let Some(chart) = variance_chart(&summary) {
            let p = sibling(csv_path, ".variance_vs_k.svg");
            write_atomic(&p, chart.to_svg().as_bytes())?;
            charts.push(p);
        }
    }
    Ok(SummaryOutcome {
        summary_path,
        charts,
        rows: summary,
    })
}

/// Plain-text table of the last step of every group.
pub fn render_table(summary: &[SummaryRow]) -> String {
    let mut last: BTreeMap<(&str, &str), &SummaryRow> = BTreeMap::new();
    for s in summary {
        let e = last.entry((&s.experiment, &s.metric)).or_insert(s);
        if s.step >= e.step {
            *e = s;
        }
    }
    let mut out = format!(
        "{:<40} {:<22} {:>9} {:>6} {:>12} {:>12}\n",
        "experiment", "metric", "step", "seeds", "mean", "ci95"
    );
    for s in last.values() {
        out.push_str(&format!(
            "{:<40} {:<22} {:>9} {:>6} {:>12.6} {:>12.6}\n",
            s.experiment, s.metric, s.step, s.n_seeds, s.mean, s.ci95
        ));
    }
    out
}
