//! End-to-end exercises of the CLI surface: subcommands, artifact formats
//! and exit codes.

use std::path::Path;
use std::process::Command;

use metachain_cli::config::ExperimentConfig;
use metachain_cli::{pipeline, sweep};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_metachain"))
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("config.cfg");
    std::fs::write(&path, body).unwrap();
    path
}

#[test]
fn generate_writes_a_parseable_kernel() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "graph.K = 3\ngraph.M = 4\ngraph.epsilon = 0.01\nseed = 5\n");
    let status = bin()
        .args(["generate", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(dir.path())
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(dir.path().join("kernel.txt")).unwrap();
    let (kernel, edges) = metachain::kernel::kernel_from_str(&text).unwrap();
    assert_eq!(kernel.num_states(), 12);
    assert_eq!(edges.len(), 3);
}

#[test]
fn validate_exits_zero_on_a_sound_instance() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "graph.K = 3\ngraph.M = 4\ngraph.epsilon = 0.02\ngraph.topology = bicycle\nseed = 11\n",
    );
    let output = bin().args(["validate", "--config"]).arg(&config).output().unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let stdout = String::from_utf8(output.stdout).unwrap();
    assert!(stdout.contains("\"checks\""));
}

#[test]
fn simulate_emits_the_estimate_csv() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "graph.K = 2\ngraph.M = 3\ngraph.epsilon = 0.05\nseed = 3\neval.rollouts = 50\n",
    );
    let output = bin()
        .args(["simulate", "--format", "csv", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8(output.stdout).unwrap();
    assert!(stdout.starts_with("experiment_id,K,M,epsilon,x0,target,mean,stderr,samples,truncated"));
    assert!(stdout.lines().count() >= 3);
}

#[test]
fn invalid_config_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "graph.K = banana\n");
    let status = bin().args(["validate", "--config"]).arg(&config).status().unwrap();
    assert_eq!(status.code(), Some(3));

    let config = write_config(dir.path(), "graph.nope = 3\n");
    let status = bin().args(["validate", "--config"]).arg(&config).status().unwrap();
    assert_eq!(status.code(), Some(3));
}

#[test]
fn zero_epsilon_pipeline_stops_after_search() {
    let config = ExperimentConfig::parse(
        "graph.K = 2\ngraph.M = 4\ngraph.epsilon = 0\nseed = 3\npretrain.t1 = 1000\npretrain.t2 = 300\nsearch.t_max = 500\nsearch.t0 = 150\n",
    )
    .unwrap();
    let report = pipeline::run_pipeline(&config).unwrap();
    assert!(report.passed, "{:?}", report.failed_stage);
    assert_eq!(report.message.as_deref(), Some("no sparse edges"));
    let search = report.search.unwrap();
    assert!(search.m_s.is_empty());
    assert!(report.improve.is_none());
    assert!(report.eval.is_none());
}

#[test]
fn rl_pipeline_reports_ppo_improvement() {
    let config = ExperimentConfig::parse(
        "graph.K = 2\ngraph.M = 4\ngraph.epsilon = 0.002\nseed = 7\nsearch.mode = rl\neval.rollouts = 300\n",
    )
    .unwrap();
    let report = pipeline::run_pipeline(&config).unwrap();
    assert!(report.passed, "{:?} {:?}", report.failed_stage, report.message);
    let improve = report.improve.unwrap();
    assert_eq!(improve.method, "ppo");
    let eval = report.eval.unwrap();
    assert!(eval.improvement > 1.0, "improvement {}", eval.improvement);
}

#[test]
fn sweep_fits_the_epsilon_scaling() {
    let config = ExperimentConfig::parse(
        "graph.topology = cycle\nsweep.K = 4\nsweep.M = 8\nsweep.epsilon = 1e-3,2e-3,4e-3\nseed = 5\neval.rollouts = 300\n",
    )
    .unwrap();
    let output = sweep::run_scaling_sweep(&config).unwrap();
    assert_eq!(output.points.len(), 3);
    let slope = output
        .fits
        .slopes
        .iter()
        .find(|s| s.axis == "inv_epsilon")
        .expect("epsilon fit");
    assert!(
        (0.8..=1.2).contains(&slope.slope),
        "epsilon slope {}",
        slope.slope
    );
    // Distilled hitting times stay flat across the epsilon axis.
    let (_, spread) = &output.fits.distilled_epsilon_spread[0];
    assert!(*spread <= 1.5, "distilled spread {spread}");
    // Artifacts are well-formed.
    assert!(output.csv.lines().count() == 4);
    assert!(output.charts[0].1.contains("<svg"));
}

#[test]
fn sweep_over_k_grows_the_hitting_time() {
    let config = ExperimentConfig::parse(
        "graph.topology = cycle\nsweep.K = 4,8\nsweep.M = 8\nsweep.epsilon = 2e-3\nseed = 5\neval.rollouts = 300\n",
    )
    .unwrap();
    let output = sweep::run_scaling_sweep(&config).unwrap();
    let small = output.points.iter().find(|p| p.k == 4).unwrap();
    let large = output.points.iter().find(|p| p.k == 8).unwrap();
    let ratio = large.base_mean / small.base_mean;
    assert!((1.3..=3.0).contains(&ratio), "K-growth ratio {ratio}");
}
