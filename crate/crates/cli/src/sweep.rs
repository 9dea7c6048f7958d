//! Scaling sweeps over (K, M, ε) grids: base, guided and distilled hitting
//! times per point, with log-log slope fits along each axis.

use metachain::distill::{self, ClusterLabeling, DistillSchedule};
use metachain::dynamics;
use metachain::kernel::{self, TaskPolicy};
use metachain::oracle;
use metachain::{Result, DENSE_GUARD};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

use crate::config::ExperimentConfig;
use crate::svg::{line_chart, Series};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub k: usize,
    pub m: usize,
    pub epsilon: f64,
    pub x_in: usize,
    pub x_out: usize,
    pub base_mean: f64,
    pub base_stderr: f64,
    pub base_truncated: usize,
    pub guided_mean: f64,
    pub guided_stderr: f64,
    pub distilled_mean: f64,
    pub oracle_base: Option<f64>,
    pub oracle_guided: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlopeFit {
    /// "inv_epsilon", "K" or "M".
    pub axis: String,
    /// The fixed coordinates, e.g. "K=4 M=16".
    pub fixed: String,
    pub slope: f64,
    pub points: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepFits {
    pub slopes: Vec<SlopeFit>,
    /// max/min ratio of the distilled hitting time across the ε axis for each
    /// fixed (K, M); near one when the distilled chain is ε-independent.
    pub distilled_epsilon_spread: Vec<(String, f64)>,
}

pub struct SweepOutput {
    pub points: Vec<SweepPoint>,
    pub csv: String,
    pub fits: SweepFits,
    /// (file name, svg body) per fixed (K, M) with at least two ε points.
    pub charts: Vec<(String, String)>,
}

fn measure_point(config: &ExperimentConfig, k: usize, m: usize, epsilon: f64, index: usize) -> Result<SweepPoint> {
    let mut graph = config.graph.clone();
    graph.k = k;
    graph.m = m;
    graph.epsilon = epsilon;
    graph.inbound_targets = true;
    let seed = config.seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let spec = graph.spec(seed)?;
    let p0 = kernel::build_unperturbed(&spec)?;
    let (base, edges) = kernel::plant_sparse_edges(&p0, &spec)?;
    let (x_in, x_out) = kernel::sample_task(&base, &edges, &TaskPolicy::new(config.eval.task_seed))?;

    let horizon = if config.eval.horizon > 0 {
        config.eval.horizon
    } else {
        dynamics::default_horizon(&base)
    };
    let rollouts = config.eval.rollouts;
    let base_est = dynamics::hitting_time_mc(&base, x_in, &[x_out], horizon, rollouts, seed)?;

    let boost = (spec.epsilon_max() / epsilon).max(1.0);
    let guided = dynamics::prm_guided_kernel(&base, &edges, boost)?;
    let guided_est = dynamics::hitting_time_mc(&guided, x_in, &[x_out], horizon, rollouts, seed)?;

    // Measurement-grade distillation: far beyond convergence of the hitting
    // statistics without paying the full certification schedule per point.
    let mut schedule = DistillSchedule::paper(k, m, epsilon);
    schedule.t_dist = schedule.t_dist.min(2_000_000);
    schedule.t_thres = schedule.t_thres.min(schedule.t_dist - 1);
    let labeling = ClusterLabeling::designated(&base);
    let ddist = distill::population_ddist(&base, &labeling)?;
    let (z, _) = distill::train_distill(&ddist, &schedule)?;
    let zplus = distill::rescale(&z, schedule.beta_value());
    let from = base.cluster_of(x_in);
    let to = base.cluster_of(x_out);
    let cot_rollouts = rollouts.min(1_000);
    let mut total = 0usize;
    for i in 0..cot_rollouts {
        let mut rng = metachain::rng::stream(seed ^ 0xd15, i as u64);
        let (seq, _) = distill::distilled_cot(&zplus, from, to, 100_000, &mut rng);
        total += seq.len();
    }
    let distilled_mean = total as f64 / cot_rollouts as f64;

    let (oracle_base, oracle_guided) = if base.num_states() <= DENSE_GUARD {
        (
            oracle::expected_hitting_time(&base, &[x_out]).ok().map(|h| h[x_in]),
            oracle::expected_hitting_time(&guided, &[x_out]).ok().map(|h| h[x_in]),
        )
    } else {
        (None, None)
    };

    Ok(SweepPoint {
        k,
        m,
        epsilon,
        x_in,
        x_out,
        base_mean: base_est.mean,
        base_stderr: base_est.stderr,
        base_truncated: base_est.truncation_count,
        guided_mean: guided_est.mean,
        guided_stderr: guided_est.stderr,
        distilled_mean,
        oracle_base,
        oracle_guided,
    })
}

fn slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx: f64 = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my: f64 = points.iter().map(|p| p.1).sum::<f64>() / n;
    let num: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let den: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    num / den
}

/// Runs every grid point (in a work-stealing pool, deterministic per point)
/// and fits log-log slopes along each sweep axis.
pub fn run_scaling_sweep(config: &ExperimentConfig) -> Result<SweepOutput> {
    let ks = if config.sweep.k.is_empty() { vec![config.graph.k] } else { config.sweep.k.clone() };
    let ms = if config.sweep.m.is_empty() { vec![config.graph.m] } else { config.sweep.m.clone() };
    let epss = if config.sweep.epsilon.is_empty() {
        vec![config.graph.epsilon]
    } else {
        config.sweep.epsilon.clone()
    };
    let mut grid = Vec::new();
    for &k in &ks {
        for &m in &ms {
            for &eps in &epss {
                grid.push((k, m, eps));
            }
        }
    }
    if grid.is_empty() {
        return Err(metachain::Error::InvalidSpec("empty sweep grid".into()));
    }

    let points: Result<Vec<SweepPoint>> = grid
        .par_iter()
        .enumerate()
        .map(|(i, &(k, m, eps))| measure_point(config, k, m, eps, i))
        .collect();
    let points = points?;

    let mut csv = String::from(
        "K,M,epsilon,x_in,x_out,base_mean,base_stderr,base_truncated,guided_mean,guided_stderr,distilled_mean,oracle_base,oracle_guided\n",
    );
    for p in &points {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            p.k,
            p.m,
            p.epsilon,
            p.x_in,
            p.x_out,
            p.base_mean,
            p.base_stderr,
            p.base_truncated,
            p.guided_mean,
            p.guided_stderr,
            p.distilled_mean,
            p.oracle_base.map_or(String::new(), |v| v.to_string()),
            p.oracle_guided.map_or(String::new(), |v| v.to_string()),
        );
    }

    let mut slopes = Vec::new();
    let mut spreads = Vec::new();
    let mut charts = Vec::new();
    for &k in &ks {
        for &m in &ms {
            let subset: Vec<&SweepPoint> =
                points.iter().filter(|p| p.k == k && p.m == m).collect();
            if subset.len() >= 2 {
                let logs: Vec<(f64, f64)> = subset
                    .iter()
                    .map(|p| ((1.0 / p.epsilon).ln(), p.base_mean.ln()))
                    .collect();
                slopes.push(SlopeFit {
                    axis: "inv_epsilon".into(),
                    fixed: format!("K={k} M={m}"),
                    slope: slope(&logs),
                    points: logs.len(),
                });
                let d_max = subset.iter().map(|p| p.distilled_mean).fold(0.0, f64::max);
                let d_min = subset.iter().map(|p| p.distilled_mean).fold(f64::INFINITY, f64::min);
                spreads.push((format!("K={k} M={m}"), d_max / d_min.max(1e-9)));

                let base: Vec<(f64, f64)> = logs.clone();
                let guided: Vec<(f64, f64)> = subset
                    .iter()
                    .map(|p| ((1.0 / p.epsilon).ln(), p.guided_mean.max(1.0).ln()))
                    .collect();
                let distilled: Vec<(f64, f64)> = subset
                    .iter()
                    .map(|p| ((1.0 / p.epsilon).ln(), p.distilled_mean.max(1.0).ln()))
                    .collect();
                charts.push((
                    format!("sweep_K{k}_M{m}.svg"),
                    line_chart(
                        &format!("hitting time vs 1/epsilon (K={k}, M={m})"),
                        "ln(1/epsilon)",
                        "ln(steps)",
                        &[
                            Series { label: "base".into(), points: base, color: "#1f77b4" },
                            Series { label: "guided".into(), points: guided, color: "#d62728" },
                            Series { label: "distilled".into(), points: distilled, color: "#2ca02c" },
                        ],
                    ),
                ));
            }
        }
    }
    for &m in &ms {
        for &eps in &epss {
            let subset: Vec<&SweepPoint> =
                points.iter().filter(|p| p.m == m && p.epsilon == eps).collect();
            if subset.len() >= 2 {
                let logs: Vec<(f64, f64)> = subset
                    .iter()
                    .map(|p| ((p.k as f64).ln(), p.base_mean.ln()))
                    .collect();
                slopes.push(SlopeFit {
                    axis: "K".into(),
                    fixed: format!("M={m} eps={eps}"),
                    slope: slope(&logs),
                    points: logs.len(),
                });
            }
        }
    }
    for &k in &ks {
        for &eps in &epss {
            let subset: Vec<&SweepPoint> =
                points.iter().filter(|p| p.k == k && p.epsilon == eps).collect();
            if subset.len() >= 2 {
                let logs: Vec<(f64, f64)> = subset
                    .iter()
                    .map(|p| ((p.m as f64).ln(), p.base_mean.ln()))
                    .collect();
                slopes.push(SlopeFit {
                    axis: "M".into(),
                    fixed: format!("K={k} eps={eps}"),
                    slope: slope(&logs),
                    points: logs.len(),
                });
            }
        }
    }

    Ok(SweepOutput {
        points,
        csv,
        fits: SweepFits { slopes, distilled_epsilon_spread: spreads },
        charts,
    })
}
