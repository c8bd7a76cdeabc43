use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use perla_cli::config::{ExperimentConfig, ExperimentKind, VarianceConfig};
use perla_cli::runner::{execute, run_experiment};
use perla_cli::summarize::{render_table, summarize, summarize_rows};
use perla_cli::CliError;

#[derive(Parser)]
#[command(
    name = "perla",
    version,
    about = "Run and summarise multi-agent learning experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every job of an experiment config and write CSV plus manifest.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides the config's `out_dir`).
        #[arg(long, env = "PERLA_OUT_DIR")]
        out: Option<PathBuf>,
        #[arg(long)]
        parallel: Option<usize>,
    },
    /// Per-step mean and 95% CI across seeds; optional SVG charts.
    Summarize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        plot: bool,
    },
    /// Measure toy-game estimator variances.
    Variance {
        #[arg(long)]
        trials: usize,
        /// Comma-separated PERLA sample counts.
        #[arg(long, value_delimiter = ',', required = true)]
        k: Vec<usize>,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        theta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, env = "PERLA_OUT_DIR")]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run {
            config,
            out,
            parallel,
        } => {
            let outcome = run_experiment(&config, out.as_deref(), parallel)?;
            println!(
                "wrote {} rows to {} ({})",
                outcome.rows.len(),
                outcome.csv_path.display(),
                outcome.manifest_path.display()
            );
            print!("{}", render_table(&summarize_rows(&outcome.rows)));
            if !outcome.failures.is_empty() {
                return Err(CliError::Runtime(outcome.failures.join("; ")));
            }
        }
        Command::Summarize { input, plot } => {
            let outcome = summarize(&input, plot)?;
            print!("{}", render_table(&outcome.rows));
            println!("summary: {}", outcome.summary_path.display());
            for c in &outcome.charts {
                println!("chart: {}", c.display());
            }
        }
        Command::Variance {
            trials,
            k,
            theta,
            seed,
            out,
        } => {
            let cfg = ExperimentConfig {
                id: "variance".into(),
                kind: ExperimentKind::Variance,
                out_dir: None,
                parallel: None,
                algos: Vec::new(),
                train: None,
                sweep: None,
                variance: Some(VarianceConfig {
                    trials,
                    k,
                    theta: vec![theta],
                    seed,
                }),
                ablation: None,
            };
            cfg.validate()?;
            let text = toml::to_string(&cfg).map_err(|e| CliError::Runtime(e.to_string()))?;
            let out = out.unwrap_or_else(|| PathBuf::from("results"));
            let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
            let outcome = execute(&cfg, &text, &out, threads)?;
            print!("{}", render_table(&summarize_rows(&outcome.rows)));
            println!("wrote {}", outcome.csv_path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
