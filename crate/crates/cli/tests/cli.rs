use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use perla_cli::config::ExperimentConfig;
use perla_cli::results::{read_csv, ResultRow};

fn perla() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_perla"));
    c.env_remove("PERLA_OUT_DIR");
    c
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = r#"
id = "tiny"
kind = "train"
algos = ["perla_mappo", "mappo"]

[train]
algo = "perla_mappo"
k = 4
batch_size = 16
total_steps = 160
eval_interval = 5
seeds = [0, 1]

[train.env]
kind = "coordination"
"#;

#[test]
fn train_run_writes_csv_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.toml", TINY);
    let out = dir.path().join("out");
    let o = perla()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = read_csv(&out.join("tiny.csv")).unwrap();
    for exp in ["tiny/perla_mappo", "tiny/mappo"] {
        for seed in [0, 1] {
            let steps: Vec<usize> = rows
                .iter()
                .filter(|r| r.experiment == exp && r.seed == seed && r.metric == "greedy_return")
                .map(|r| r.step)
                .collect();
            assert_eq!(steps.first(), Some(&0), "{exp} seed {seed}");
            assert!(steps.windows(2).all(|w| w[0] < w[1]));
            assert!(*steps.last().unwrap() >= 160);
        }
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("tiny.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seeds"], serde_json::json!([0, 1]));
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn rerun_is_byte_identical_and_parallel_matches_serial() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.toml", TINY);
    let run = |out: &str, parallel: &str| {
        let o = perla()
            .args(["run", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(dir.path().join(out))
            .args(["--parallel", parallel])
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        (
            std::fs::read(dir.path().join(out).join("tiny.csv")).unwrap(),
            std::fs::read(dir.path().join(out).join("tiny.manifest.json")).unwrap(),
        )
    };
    let a = run("a", "1");
    let b = run("a", "1");
    let c = run("c", "3");
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[test]
fn empty_seed_list_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "bad.toml",
        &TINY.replace("seeds = [0, 1]", "seeds = []"),
    );
    let o = perla()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(!dir.path().join("tiny.csv").exists());
}

#[test]
fn unknown_key_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "bad.toml",
        &TINY.replace("k = 4", "k = 4\nlearning_rate = 3"),
    );
    let o = perla()
        .args(["run", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("learning_rate"), "{err}");
    assert!(err.contains("line 9"), "{err}");
}

#[test]
fn missing_config_file_is_a_validation_error() {
    let o = perla()
        .args(["run", "--config", "/nonexistent/x.toml"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn out_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "tiny.toml",
        &TINY.replace("seeds = [0, 1]", "seeds = [3]"),
    );
    let envdir = dir.path().join("from_env");
    let o = perla()
        .args(["run", "--config"])
        .arg(&cfg)
        .env("PERLA_OUT_DIR", &envdir)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(envdir.join("tiny.csv").exists());
}

#[test]
fn scale_sweep_has_one_series_per_cell_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"
id = "sweep"
kind = "scale_sweep"
algos = ["perla_mappo", "mappo"]

[sweep]
n_agents = [2, 3]
n_actions = [3, 4]

[train]
algo = "perla_mappo"
k = 2
batch_size = 8
total_steps = 16
eval_interval = 1
seeds = [0, 1]

[train.env]
kind = "penalty"
n_agents = 2
n_actions = 3
"#;
    let cfg = write(dir.path(), "sweep.toml", text);
    let o = perla()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = read_csv(&dir.path().join("sweep.csv")).unwrap();
    let mut series = std::collections::BTreeSet::new();
    for r in rows.iter().filter(|r| r.metric == "greedy_return") {
        series.insert((r.algo.clone(), r.n_agents, r.n_actions, r.seed));
    }
    assert_eq!(series.len(), 2 * 2 * 2 * 2);
    let names: std::collections::BTreeSet<_> = rows.iter().map(|r| r.experiment.as_str()).collect();
    assert!(names.contains("sweep/perla_mappo/n3_a4"));
}

#[test]
fn variance_subcommand_writes_perla_rows() {
    let dir = tempfile::tempdir().unwrap();
    let o = perla()
        .args([
            "variance",
            "--trials",
            "2000",
            "--k",
            "1,2,5,25,125",
            "--theta",
            "0",
            "--out",
        ])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = read_csv(&dir.path().join("variance.csv")).unwrap();
    let perla_rows: Vec<&ResultRow> = rows
        .iter()
        .filter(|r| r.algo == "perla" && r.metric == "variance")
        .collect();
    assert_eq!(perla_rows.len(), 5);
    let mut ks: Vec<usize> = perla_rows.iter().map(|r| r.k).collect();
    ks.sort_unstable();
    assert_eq!(ks, vec![1, 2, 5, 25, 125]);
    assert!(rows
        .iter()
        .any(|r| r.algo == "dt" && r.metric == "variance"));

    let s = perla()
        .args(["summarize", "--plot", "--in"])
        .arg(dir.path().join("variance.csv"))
        .output()
        .unwrap();
    assert!(s.status.success(), "{}", stderr(&s));
    let svg = std::fs::read_to_string(dir.path().join("variance.variance_vs_k.svg")).unwrap();
    assert!(svg.contains("excess slope"), "{svg}");
}

#[test]
fn bad_variance_arguments_exit_one() {
    let o = perla()
        .args(["variance", "--trials", "1", "--k", "1"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    let o = perla()
        .args(["variance", "--trials", "100", "--k", "0"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

// Ten rows over two seeds; the expected statistics are worked out by hand.
const FIXTURE: &str = "experiment,env,algo,n_agents,n_actions,k,seed,step,metric,value
e/mappo,coordination,mappo,2,2,1,0,0,greedy_return,0
e/mappo,coordination,mappo,2,2,1,1,0,greedy_return,1
e/mappo,coordination,mappo,2,2,1,0,10,greedy_return,0.5
e/mappo,coordination,mappo,2,2,1,1,10,greedy_return,1
e/mappo,coordination,mappo,2,2,1,0,20,greedy_return,1
e/mappo,coordination,mappo,2,2,1,1,20,greedy_return,1
e/mappo,coordination,mappo,2,2,1,0,0,critic_loss,0
e/mappo,coordination,mappo,2,2,1,1,0,critic_loss,0
e/mappo,coordination,mappo,2,2,1,0,10,critic_loss,0.2
e/mappo,coordination,mappo,2,2,1,1,10,critic_loss,0.4
";

#[test]
fn summarize_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let csv = write(dir.path(), "fixture.csv", FIXTURE);
    let o = perla()
        .args(["summarize", "--plot", "--in"])
        .arg(&csv)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let mut r = csv::Reader::from_path(dir.path().join("fixture.summary.csv")).unwrap();
    let mut got = std::collections::HashMap::new();
    for rec in r.records() {
        let rec = rec.unwrap();
        let key = (rec[6].to_string(), rec[7].parse::<usize>().unwrap());
        got.insert(
            key,
            (
                rec[9].parse::<f64>().unwrap(),
                rec[10].parse::<f64>().unwrap(),
            ),
        );
    }
    assert_eq!(got.len(), 5);
    // Two seeds: half-width = t(0.975, 1) * |x1 - x0| / 2.
    let t1 = 12.706_204_736_174_7;
    let cases = [
        (("greedy_return", 0), 0.5, t1 * 0.5),
        (("greedy_return", 10), 0.75, t1 * 0.25),
        (("greedy_return", 20), 1.0, 0.0),
        (("critic_loss", 0), 0.0, 0.0),
        (("critic_loss", 10), 0.3, t1 * 0.1),
    ];
    for ((metric, step), mean, ci) in cases {
        let (m, c) = got[&(metric.to_string(), step)];
        assert!((m - mean).abs() < 1e-12, "{metric} {step}");
        assert!((c - ci).abs() < 1e-6, "{metric} {step}: {c} vs {ci}");
    }
    assert!(dir.path().join("fixture.greedy_return.svg").exists());
}

#[test]
fn malformed_csv_exits_one_and_names_row() {
    let dir = tempfile::tempdir().unwrap();
    let bad = FIXTURE.replace(
        "e/mappo,coordination,mappo,2,2,1,1,10,greedy_return,1",
        "e/mappo,coordination,mappo,2,x,1,1,10,greedy_return,1",
    );
    let csv = write(dir.path(), "bad.csv", &bad);
    let o = perla()
        .args(["summarize", "--in"])
        .arg(&csv)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("data row 4"), "{}", stderr(&o));
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "toml") {
            ExperimentConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            n += 1;
        }
    }
    assert!(n >= 7);
}
