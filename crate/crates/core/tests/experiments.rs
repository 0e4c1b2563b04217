use std::path::PathBuf;

use offline_rl::config::{ExperimentConfig, ExperimentKind};
use offline_rl::experiments::{
    run_experiment, run_gap_experiment, run_pspo_t_sweep, GAP_HEADER, SEPARATION_HEADER,
    T_SWEEP_HEADER,
};
use offline_rl::stats::log_log_slope;
use offline_rl::Error;

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str) -> ExperimentConfig {
    ExperimentConfig::from_path(&configs_dir().join(format!("{name}.toml"))).unwrap()
}

/// Shrinks a reference config so a full run takes milliseconds.
fn small(name: &str) -> ExperimentConfig {
    let mut c = load(name);
    c.sweep.trials = c.sweep.trials.min(4);
    c.sweep.n_grid.truncate(2);
    c.algorithm.calibrate = None;
    c.sweep.slope_window = None;
    c
}

fn assert_schema(csv: &str, header: &str, rows: usize) {
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(header));
    let cols = header.split(',').count();
    let body: Vec<&str> = lines.collect();
    assert_eq!(body.len(), rows);
    assert!(
        body.iter().all(|l| l.split(',').count() == cols),
        "column count"
    );
}

#[test]
fn every_reference_config_parses() {
    let mut seen = 0;
    for entry in std::fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let c = ExperimentConfig::from_path(&path)
                .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            c.scenario.build(c.seed).unwrap();
            seen += 1;
        }
    }
    assert!(seen >= 8);
}

#[test]
fn gap_csv_schema_and_determinism() {
    let c = small("cppo_decay");
    let a = run_experiment(&c).unwrap();
    assert_schema(&a.csv, GAP_HEADER, c.sweep.n_grid.len() * c.sweep.trials);
    assert_eq!(a.csv, run_experiment(&c).unwrap().csv);
    let mut other = c.clone();
    other.seed += 1;
    assert_ne!(a.csv, run_experiment(&other).unwrap().csv);
}

#[test]
fn separation_csv_schema() {
    let c = small("separation");
    let out = run_experiment(&c).unwrap();
    assert_schema(
        &out.csv,
        SEPARATION_HEADER,
        c.sweep.n_grid.len() * c.sweep.trials,
    );
}

#[test]
fn t_sweep_has_t1_for_every_trial() {
    let mut c = small("pspo_t_sweep");
    c.sweep.t_grid = vec![4, 64];
    let e = run_pspo_t_sweep(&c).unwrap();
    for t in 0..c.sweep.trials {
        assert!(e.rows.iter().any(|r| r.t == 1 && r.trial == t));
    }
    let out = run_experiment(&c).unwrap();
    assert_schema(&out.csv, T_SWEEP_HEADER, c.sweep.trials * 3);
}

#[test]
fn t_sweep_slope_before_floor() {
    let mut c = load("pspo_t_sweep");
    c.sweep.trials = 20;
    c.sweep.t_grid = vec![4, 16, 64];
    let e = run_pspo_t_sweep(&c).unwrap();
    let m: Vec<(usize, f64)> = e
        .medians_at(c.sweep.n_grid[0])
        .into_iter()
        .filter(|(t, _)| *t > 1)
        .collect();
    assert!(m.windows(2).all(|w| w[1].1 <= w[0].1));
    let ts: Vec<f64> = m.iter().map(|p| p.0 as f64).collect();
    let gs: Vec<f64> = m.iter().map(|p| p.1).collect();
    let slope = log_log_slope(&ts, &gs);
    assert!(slope <= -0.3, "slope {slope}");
}

#[test]
fn truth_captured_trials_are_pessimistic() {
    let mut c = load("pessimism");
    c.sweep.trials = 40;
    let e = run_gap_experiment(&c).unwrap();
    assert!(e
        .rows
        .iter()
        .filter(|r| r.truth_in_space)
        .all(|r| r.pessimism_ok));
}

#[test]
fn outputs_written_to_directory() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small("bayes_gap");
    c.sweep.trials = 10;
    c.algorithm.iterations = 16;
    c.output.dir = Some(dir.path().join("run"));
    assert_eq!(c.experiment, ExperimentKind::BayesGap);
    run_experiment(&c).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("run/bayes_gap.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 10);
    let summary: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("run/bayes_gap.summary.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(summary.as_array().unwrap().len(), 2);
}

#[test]
fn config_errors_name_the_key() {
    let text = std::fs::read_to_string(configs_dir().join("separation.toml")).unwrap();
    let bad = text.replace("trials = 50", "trials = 50\ntrails = 3");
    match ExperimentConfig::from_toml(&bad) {
        Err(Error::Config { path, detail }) => {
            assert_eq!(path, "sweep.trails");
            assert!(detail.contains("trails"), "{detail}");
        }
        other => panic!("{other:?}"),
    }
    let bad = text.replace("num_states = 12", "num_states = 12\ncolour = 1");
    assert!(matches!(
        ExperimentConfig::from_toml(&bad),
        Err(Error::Config { .. })
    ));
    let bad = text.replace("eta = 0.16", "eta = 0.2");
    assert!(
        matches!(ExperimentConfig::from_toml(&bad), Err(Error::Config { path, .. }) if path == "algorithm.eta")
    );
}
