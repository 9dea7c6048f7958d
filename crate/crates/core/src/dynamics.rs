//! Rollout simulation and stopping-time measurement.
//!
//! Rollouts are embarrassingly parallel over an immutable kernel. Each
//! rollout owns RNG stream (seed, index), and aggregation runs in fixed
//! rollout order, so estimates are identical for any thread count.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::kernel::{SparseEdgeSet, TransitionKernel};
use crate::{rng, Error, Result};

/// One sampled transition.
pub fn step(kernel: &TransitionKernel, state: usize, rng: &mut impl Rng) -> usize {
    kernel.row(state).sample(rng)
}

/// A rollout trace with the positions where sparse edges were crossed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Path {
    pub states: Vec<usize>,
    /// Indices t such that (states[t], states[t+1]) is a sparse edge.
    pub sparse_crossings: Vec<usize>,
    pub truncated: bool,
}

impl Path {
    pub fn len(&self) -> usize {
        self.states.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks every step lies in the kernel support and the crossing
    /// annotations match the sparse edge set.
    pub fn validate(&self, kernel: &TransitionKernel, edges: &SparseEdgeSet) -> Result<()> {
        for t in 0..self.len() {
            let (x, y) = (self.states[t], self.states[t + 1]);
            if kernel.prob(x, y) == 0.0 {
                return Err(Error::Validation(format!("step {t}: ({x}, {y}) unsupported")));
            }
            let crossing = kernel.cluster_of(x) != kernel.cluster_of(y);
            if crossing != self.sparse_crossings.contains(&t) {
                return Err(Error::Validation(format!("step {t}: crossing flag mismatch")));
            }
            if crossing && !edges.contains(x, y) {
                return Err(Error::Validation(format!(
                    "step {t}: crossing ({x}, {y}) not planted"
                )));
            }
        }
        Ok(())
    }
}

/// Monte-Carlo stopping-time summary.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StopTimeEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub num_samples: usize,
    /// Rollouts that hit the horizon; they enter the mean at the horizon value.
    pub truncation_count: usize,
}

impl StopTimeEstimate {
    fn from_durations(durations: &[u64], truncations: usize) -> Self {
        let n = durations.len();
        let mean = durations.iter().map(|&d| d as f64).sum::<f64>() / n as f64;
        let var = if n > 1 {
            durations
                .iter()
                .map(|&d| (d as f64 - mean).powi(2))
                .sum::<f64>()
                / (n as f64 - 1.0)
        } else {
            0.0
        };
        StopTimeEstimate {
            mean,
            stderr: (var / n as f64).sqrt(),
            num_samples: n,
            truncation_count: truncations,
        }
    }
}

/// Horizon keeping the truncation probability negligible at the KM/ε scale.
pub fn default_horizon(kernel: &TransitionKernel) -> usize {
    let k = kernel.num_clusters() as f64;
    let m = (kernel.num_states() as f64 / k.max(1.0)).max(1.0);
    let eps = kernel.epsilon().max(1e-9);
    (50.0 * k * m / eps).min(1e9) as usize
}

fn stopping_time<F: Fn(usize) -> bool>(
    kernel: &TransitionKernel,
    x0: usize,
    hit: &F,
    horizon: usize,
    rng: &mut impl Rng,
) -> (u64, bool) {
    if hit(x0) {
        return (0, false);
    }
    let mut x = x0;
    for t in 1..=horizon {
        x = step(kernel, x, rng);
        if hit(x) {
            return (t as u64, false);
        }
    }
    (horizon as u64, true)
}

fn mc_estimate<F: Fn(usize) -> bool + Sync>(
    kernel: &TransitionKernel,
    x0: usize,
    hit: F,
    horizon: usize,
    num_rollouts: usize,
    seed: u64,
) -> StopTimeEstimate {
    let results: Vec<(u64, bool)> = (0..num_rollouts)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(seed, i as u64);
            stopping_time(kernel, x0, &hit, horizon, &mut rng)
        })
        .collect();
    let durations: Vec<u64> = results.iter().map(|&(d, _)| d).collect();
    let truncations = results.iter().filter(|&&(_, t)| t).count();
    StopTimeEstimate::from_durations(&durations, truncations)
}

/// Mean first-hit step count of `target` over parallel rollouts. τ = 0 when
/// the start state already lies in the target.
pub fn hitting_time_mc(
    kernel: &TransitionKernel,
    x0: usize,
    target: &[usize],
    horizon: usize,
    num_rollouts: usize,
    seed: u64,
) -> Result<StopTimeEstimate> {
    hitting_time_mc_with_samples(kernel, x0, target, horizon, num_rollouts, seed)
        .map(|(estimate, _)| estimate)
}

/// As `hitting_time_mc` but also returns the per-rollout durations in rollout
/// order, for reports that carry raw samples.
pub fn hitting_time_mc_with_samples(
    kernel: &TransitionKernel,
    x0: usize,
    target: &[usize],
    horizon: usize,
    num_rollouts: usize,
    seed: u64,
) -> Result<(StopTimeEstimate, Vec<u64>)> {
    if target.is_empty() {
        return Err(Error::Validation("empty target set".into()));
    }
    if horizon == 0 || num_rollouts == 0 {
        return Err(Error::Validation("horizon and num_rollouts must be positive".into()));
    }
    let mut mask = vec![false; kernel.num_states()];
    for &t in target {
        mask[t] = true;
    }
    let hit = move |x: usize| mask[x];
    let results: Vec<(u64, bool)> = (0..num_rollouts)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(seed, i as u64);
            stopping_time(kernel, x0, &hit, horizon, &mut rng)
        })
        .collect();
    let durations: Vec<u64> = results.iter().map(|&(d, _)| d).collect();
    let truncations = results.iter().filter(|&&(_, t)| t).count();
    Ok((StopTimeEstimate::from_durations(&durations, truncations), durations))
}

/// Mean first-exit time from the cluster containing `x0`.
pub fn escape_time_mc(
    kernel: &TransitionKernel,
    x0: usize,
    cluster: usize,
    horizon: usize,
    num_rollouts: usize,
    seed: u64,
) -> Result<StopTimeEstimate> {
    if horizon == 0 || num_rollouts == 0 {
        return Err(Error::Validation("horizon and num_rollouts must be positive".into()));
    }
    let partition = kernel.partition().to_vec();
    Ok(mc_estimate(
        kernel,
        x0,
        move |x| partition[x] != cluster,
        horizon,
        num_rollouts,
        seed,
    ))
}

/// Reweights the kernel toward the process-reward edges: every PRM edge
/// probability is multiplied by `boost` and the remaining entries of the row
/// shrink proportionally to renormalize.
pub fn prm_guided_kernel(
    kernel: &TransitionKernel,
    prm: &SparseEdgeSet,
    boost: f64,
) -> Result<TransitionKernel> {
    if boost < 1.0 {
        return Err(Error::Validation(format!("boost {boost} below 1")));
    }
    let mut by_src: std::collections::HashMap<usize, Vec<usize>> = Default::default();
    for (i, e) in prm.edges.iter().enumerate() {
        if kernel.prob(e.src, e.dst) == 0.0 {
            return Err(Error::Validation(format!(
                "prm edge ({}, {}) is not a kernel transition",
                e.src, e.dst
            )));
        }
        by_src.entry(e.src).or_default().push(i);
    }

    let mut guided = kernel.clone();
    for (&src, edge_ids) in &by_src {
        let row = kernel.row(src);
        let boosted: Vec<(usize, f64)> = edge_ids
            .iter()
            .map(|&i| {
                let e = &prm.edges[i];
                (e.dst, kernel.prob(e.src, e.dst) * boost)
            })
            .collect();
        let boosted_mass: f64 = boosted.iter().map(|&(_, p)| p).sum();
        if boosted_mass >= 1.0 {
            return Err(Error::Validation(format!(
                "boost {boost} pushes row {src} mass to {boosted_mass}; too large for this epsilon"
            )));
        }
        let old_mass: f64 = boosted
            .iter()
            .map(|&(dst, _)| kernel.prob(src, dst))
            .sum();
        let scale = (1.0 - boosted_mass) / (1.0 - old_mass);
        let boosted_targets: Vec<usize> = boosted.iter().map(|&(d, _)| d).collect();
        let mut entries: Vec<(usize, f64)> = row
            .targets
            .iter()
            .zip(&row.probs)
            .filter(|&(&t, _)| !boosted_targets.contains(&(t as usize)))
            .map(|(&t, &p)| (t as usize, p * scale))
            .collect();
        entries.extend(boosted);
        guided.set_row(src, entries);
    }
    Ok(guided)
}

/// Rolls out from `x_in` until `x_out` or the horizon, annotating sparse
/// crossings. This is the base model's answer to a reasoning task.
pub fn generate_valid_path(
    kernel: &TransitionKernel,
    x_in: usize,
    x_out: usize,
    horizon: usize,
    rng: &mut impl Rng,
) -> Path {
    let mut states = vec![x_in];
    let mut sparse_crossings = Vec::new();
    let mut x = x_in;
    let mut truncated = true;
    if x_in == x_out {
        return Path { states, sparse_crossings, truncated: false };
    }
    for t in 0..horizon {
        let y = step(kernel, x, rng);
        if kernel.cluster_of(x) != kernel.cluster_of(y) {
            sparse_crossings.push(t);
        }
        states.push(y);
        x = y;
        if x == x_out {
            truncated = false;
            break;
        }
    }
    Path { states, sparse_crossings, truncated }
}

/// CSV row for stopping-time estimates:
/// `experiment_id,K,M,epsilon,x0,target,mean,stderr,samples,truncated`.
pub fn estimate_csv_header() -> &'static str {
    "experiment_id,K,M,epsilon,x0,target,mean,stderr,samples,truncated"
}

pub fn estimate_csv_row(
    experiment_id: &str,
    kernel: &TransitionKernel,
    x0: usize,
    target: &str,
    estimate: &StopTimeEstimate,
) -> String {
    let k = kernel.num_clusters();
    let m = (0..k).map(|c| kernel.cluster_states(c).len()).max().unwrap_or(0);
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        experiment_id,
        k,
        m,
        kernel.epsilon(),
        x0,
        target,
        estimate.mean,
        estimate.stderr,
        estimate.num_samples,
        estimate.truncation_count
    )
}
