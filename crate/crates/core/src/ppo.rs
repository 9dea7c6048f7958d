//! PPO-Clip with sign-gradient updates and sparse-edge indicator advantage.
//!
//! The advantage is 1 on the searched edge set and 0 elsewhere, the old
//! policy stays pinned to the base kernel for the whole run, and each updated
//! row rises multiplicatively until its edge mass reaches the clip ceiling
//! c_clip · p(old), at which point the row stops updating. Steps are applied
//! only while they keep the boosted edges at or under the ceiling, so a
//! repeated run with the same edge set is a no-op.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::kernel::TransitionKernel;
use crate::pretrain::{source_weights, SoftmaxTable, SourceDist};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PpoSchedule {
    /// Step count; None derives ceil(ln(c_clip) / (2 min_i mu_i alpha)) + 2.
    pub t_ppo: Option<usize>,
    /// Step size; None derives alpha_coeff / max_i mu_i.
    pub alpha: Option<f64>,
    /// Per-row effective step coefficient mu_i·alpha; small enough that the
    /// discrete ascent lands within [0.9, 1.0] of the ceiling.
    pub alpha_coeff: f64,
    /// Clip ceiling; None derives epsilon_max / epsilon.
    pub c_clip: Option<f64>,
    /// Target probability scale for the boosted edges.
    pub epsilon_max: f64,
    pub source_dist: SourceDist,
    /// Sign-gradient ascent when true; plain gradient ascent otherwise
    /// (requires epsilon >= epsilon_max^2).
    pub sign_gradient: bool,
}

impl PpoSchedule {
    pub fn new(epsilon_max: f64) -> Self {
        PpoSchedule {
            t_ppo: None,
            alpha: None,
            alpha_coeff: 0.05,
            c_clip: None,
            epsilon_max,
            source_dist: SourceDist::Uniform,
            sign_gradient: true,
        }
    }

    pub fn validate(&self, epsilon: f64) -> Result<()> {
        if self.epsilon_max <= 0.0 {
            return Err(Error::InvalidSpec("epsilon_max must be positive".into()));
        }
        if let Some(a) = self.alpha {
            if a <= 0.0 {
                return Err(Error::InvalidSpec("alpha must be positive".into()));
            }
        }
        if self.alpha_coeff <= 0.0 || self.alpha_coeff > 1.0 {
            return Err(Error::InvalidSpec("alpha_coeff outside (0, 1]".into()));
        }
        let c = self.clip_ceiling(epsilon);
        if c <= 1.0 {
            return Err(Error::InvalidSpec(format!("c_clip {c} must exceed 1")));
        }
        if !self.sign_gradient && epsilon < self.epsilon_max * self.epsilon_max {
            return Err(Error::InvalidSpec(format!(
                "plain-gradient mode needs epsilon >= epsilon_max^2 = {:.3e}",
                self.epsilon_max * self.epsilon_max
            )));
        }
        Ok(())
    }

    pub fn clip_ceiling(&self, epsilon: f64) -> f64 {
        self.c_clip.unwrap_or(self.epsilon_max / epsilon.max(f64::MIN_POSITIVE))
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PpoTraceEntry {
    pub step: usize,
    pub row: usize,
    pub edge_mass: f64,
    pub clipped: bool,
}

/// PPO trace CSV: `step,row,edge_mass,clipped`.
pub fn ppo_trace_csv(trace: &[PpoTraceEntry]) -> String {
    let mut out = String::from("step,row,edge_mass,clipped\n");
    for e in trace {
        let _ = writeln!(out, "{},{},{},{}", e.step, e.row, e.edge_mass, u8::from(e.clipped));
    }
    out
}

fn edges_by_row(
    model: &SoftmaxTable,
    old_kernel: &TransitionKernel,
    edges: &[(usize, usize)],
) -> Result<BTreeMap<usize, Vec<usize>>> {
    let mut by_row: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &(x, y) in edges {
        if old_kernel.prob(x, y) == 0.0 {
            return Err(Error::Validation(format!(
                "edge ({x}, {y}) is not a transition of the old policy"
            )));
        }
        if model.is_masked(x, y) {
            return Err(Error::Validation(format!(
                "edge ({x}, {y}) is masked out of the model support"
            )));
        }
        let row = by_row.entry(x).or_default();
        if !row.contains(&y) {
            row.push(y);
        }
    }
    Ok(by_row)
}

/// Exact population PPO-Clip objective
/// E[min(p_hat(X1|X0) / p_old(X1|X0), c_clip) · A(X0, X1)] with the indicator
/// advantage on the given edge set.
pub fn ppo_objective(
    model: &SoftmaxTable,
    old_kernel: &TransitionKernel,
    edges: &[(usize, usize)],
    source_dist: SourceDist,
    c_clip: f64,
) -> Result<f64> {
    let by_row = edges_by_row(model, old_kernel, edges)?;
    let weights = source_weights(old_kernel, source_dist)?;
    let mut value = 0.0;
    for (&i, targets) in &by_row {
        let probs = model.probs_row(i);
        for &j in targets {
            let old = old_kernel.prob(i, j);
            value += weights[i] * old * (probs[j] / old).min(c_clip);
        }
    }
    Ok(value)
}

/// Gradient of the objective with respect to the logits, zero where the
/// ratio has reached the ceiling.
pub fn ppo_gradient(
    model: &SoftmaxTable,
    old_kernel: &TransitionKernel,
    edges: &[(usize, usize)],
    source_dist: SourceDist,
    c_clip: f64,
) -> Result<Vec<f64>> {
    let by_row = edges_by_row(model, old_kernel, edges)?;
    let weights = source_weights(old_kernel, source_dist)?;
    let n = model.rows();
    let mut grad = vec![0.0; n * model.cols()];
    for (&i, targets) in &by_row {
        let probs = model.probs_row(i);
        let unclipped: Vec<usize> = targets
            .iter()
            .copied()
            .filter(|&j| probs[j] < c_clip * old_kernel.prob(i, j))
            .collect();
        let mass: f64 = unclipped.iter().map(|&j| probs[j]).sum();
        for j in 0..model.cols() {
            if model.is_masked(i, j) {
                continue;
            }
            let indicator = if unclipped.contains(&j) { 1.0 } else { 0.0 };
            grad[i * model.cols() + j] = weights[i] * probs[j] * (indicator - mass);
        }
    }
    Ok(grad)
}

/// Runs PPO-Clip from the given model against the pinned old policy.
/// Returns the updated model and the per-step row trace.
pub fn run_ppo(
    model: &SoftmaxTable,
    old_kernel: &TransitionKernel,
    edges: &[(usize, usize)],
    schedule: &PpoSchedule,
) -> Result<(SoftmaxTable, Vec<PpoTraceEntry>)> {
    let epsilon = old_kernel.epsilon();
    schedule.validate(epsilon)?;
    let by_row = edges_by_row(model, old_kernel, edges)?;
    let weights = source_weights(old_kernel, schedule.source_dist)?;
    let max_w = weights.iter().cloned().fold(0.0, f64::max);
    let min_w = by_row
        .keys()
        .map(|&i| weights[i])
        .fold(f64::INFINITY, f64::min);
    let alpha = schedule.alpha.unwrap_or(schedule.alpha_coeff / max_w);
    let c_clip = schedule.clip_ceiling(epsilon);
    let t_ppo = schedule.t_ppo.unwrap_or_else(|| {
        if by_row.is_empty() {
            0
        } else {
            (c_clip.ln() / (2.0 * min_w * alpha)).ceil() as usize + 2
        }
    });

    let mut updated = model.clone();
    let mut trace = Vec::new();
    let mut frozen: BTreeMap<usize, bool> = by_row.keys().map(|&i| (i, false)).collect();

    for step in 1..=t_ppo {
        for (&i, targets) in &by_row {
            if frozen[&i] {
                continue;
            }
            let probs = updated.probs_row(i);
            let edge_mass: f64 = targets.iter().map(|&j| probs[j]).sum();
            let unclipped: Vec<usize> = targets
                .iter()
                .copied()
                .filter(|&j| probs[j] < c_clip * old_kernel.prob(i, j))
                .collect();
            if unclipped.is_empty() {
                frozen.insert(i, true);
                trace.push(PpoTraceEntry { step, row: i, edge_mass, clipped: true });
                continue;
            }

            let mut candidate_row: Vec<f64> = (0..updated.cols())
                .map(|j| updated.logit(i, j))
                .collect();
            if schedule.sign_gradient {
                let step_size = weights[i] * alpha;
                for (j, logit) in candidate_row.iter_mut().enumerate() {
                    if updated.is_masked(i, j) {
                        continue;
                    }
                    if unclipped.contains(&j) {
                        *logit += step_size;
                    } else {
                        *logit -= step_size;
                    }
                }
            } else {
                let grad = ppo_gradient(&updated, old_kernel, edges, schedule.source_dist, c_clip)?;
                for (j, logit) in candidate_row.iter_mut().enumerate() {
                    if !updated.is_masked(i, j) {
                        *logit += alpha * grad[i * updated.cols() + j];
                    }
                }
            }

            // Apply only while the boosted edges stay at or under the ceiling.
            let mut candidate = updated.clone();
            for (j, &logit) in candidate_row.iter().enumerate() {
                if !candidate.is_masked(i, j) {
                    candidate.set_logit(i, j, logit);
                }
            }
            let new_probs = candidate.probs_row(i);
            let overshoots = unclipped
                .iter()
                .any(|&j| new_probs[j] > c_clip * old_kernel.prob(i, j) * (1.0 + 1e-9));
            if overshoots {
                frozen.insert(i, true);
                trace.push(PpoTraceEntry { step, row: i, edge_mass, clipped: true });
            } else {
                updated = candidate;
                let mass_after: f64 = targets.iter().map(|&j| new_probs[j]).sum();
                trace.push(PpoTraceEntry { step, row: i, edge_mass: mass_after, clipped: false });
            }
        }
    }

    Ok((updated, trace))
}

/// sup_x total-variation distance between the row distributions.
pub fn tv_change(before: &SoftmaxTable, after: &SoftmaxTable) -> f64 {
    assert_eq!(before.rows(), after.rows());
    let mut worst: f64 = 0.0;
    for i in 0..before.rows() {
        let a = before.probs_row(i);
        let b = after.probs_row(i);
        let tv: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() * 0.5;
        worst = worst.max(tv);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{self, GraphSpec, SparseTopology};
    use crate::oracle;

    fn build(spec: &GraphSpec) -> (TransitionKernel, kernel::SparseEdgeSet) {
        let p0 = kernel::build_unperturbed(spec).unwrap();
        kernel::plant_sparse_edges(&p0, spec).unwrap()
    }

    /// Single cluster of two states plus a singleton cluster, one sparse edge.
    fn toy_kernel(epsilon: f64) -> TransitionKernel {
        TransitionKernel::from_rows(
            vec![0, 0, 1],
            vec![
                vec![(0, 0.6 * (1.0 - epsilon)), (1, 0.4 * (1.0 - epsilon)), (2, epsilon)],
                vec![(0, 0.5), (1, 0.5)],
                vec![(0, 0.1), (2, 0.9)],
            ],
            epsilon,
            0,
        )
        .unwrap()
    }

    #[test]
    fn empty_edge_set_is_inert() {
        let kernel = toy_kernel(0.01);
        let model = SoftmaxTable::from_kernel(&kernel);
        let schedule = PpoSchedule::new(0.1);
        let value = ppo_objective(&model, &kernel, &[], SourceDist::Uniform, 10.0).unwrap();
        assert_eq!(value, 0.0);
        let (updated, trace) = run_ppo(&model, &kernel, &[], &schedule).unwrap();
        assert_eq!(updated, model);
        assert!(trace.is_empty());
    }

    #[test]
    fn objective_at_the_old_policy_sums_edge_mass() {
        let kernel = toy_kernel(0.01);
        let model = SoftmaxTable::from_kernel(&kernel);
        let edges = vec![(0, 2)];
        let value = ppo_objective(&model, &kernel, &edges, SourceDist::Uniform, 10.0).unwrap();
        let expected = (1.0 / 3.0) * 0.01;
        assert!((value - expected).abs() < 1e-12, "{value} vs {expected}");
    }

    #[test]
    fn gradient_matches_finite_differences_away_from_the_kink() {
        let kernel = toy_kernel(0.01);
        let edges = vec![(0, 2)];
        let c_clip = 10.0;
        let h = 1e-6;
        let mut model = SoftmaxTable::from_kernel(&kernel);
        // Mild boost keeps the ratio under 0.9 * c_clip.
        model.add_logit(0, 2, 1.0);
        let probs = model.probs_row(0);
        assert!(probs[2] / kernel.prob(0, 2) < 0.9 * c_clip);
        let grad = ppo_gradient(&model, &kernel, &edges, SourceDist::Uniform, c_clip).unwrap();
        let n = model.cols();
        for i in 0..model.rows() {
            for j in 0..n {
                if model.is_masked(i, j) {
                    continue;
                }
                let mut plus = model.clone();
                plus.add_logit(i, j, h);
                let mut minus = model.clone();
                minus.add_logit(i, j, -h);
                let numeric = (ppo_objective(&plus, &kernel, &edges, SourceDist::Uniform, c_clip)
                    .unwrap()
                    - ppo_objective(&minus, &kernel, &edges, SourceDist::Uniform, c_clip).unwrap())
                    / (2.0 * h);
                assert!(
                    (grad[i * n + j] - numeric).abs() < 1e-6,
                    "entry ({i},{j}): {} vs {numeric}",
                    grad[i * n + j]
                );
            }
        }
    }

    #[test]
    fn single_edge_toy_reaches_the_ceiling_band() {
        let epsilon = 0.01;
        let kernel = toy_kernel(epsilon);
        let model = SoftmaxTable::from_kernel(&kernel);
        let schedule = PpoSchedule::new(0.1);
        let (updated, trace) = run_ppo(&model, &kernel, &[(0, 2)], &schedule).unwrap();
        let p = updated.probs_row(0)[2];
        let target = (0.1 / epsilon) * epsilon; // ceiling-scaled edge probability
        assert!(
            p >= 0.9 * target && p <= target * (1.0 + 1e-9),
            "final edge probability {p}, target {target}"
        );
        // Multiplicative closed form e^{2 mu alpha t} p / Z before clipping.
        let mu_alpha = 0.05;
        for entry in trace.iter().filter(|e| !e.clipped) {
            let t = entry.step as f64;
            let boosted = (2.0 * mu_alpha * t).exp() * epsilon;
            let z = 1.0 - epsilon + boosted;
            assert!(
                (entry.edge_mass - boosted / z).abs() < 1e-9,
                "step {}: mass {} vs closed form {}",
                entry.step,
                entry.edge_mass,
                boosted / z
            );
        }
    }

    #[test]
    fn non_edge_ratios_inside_updated_rows_are_preserved() {
        let epsilon = 0.01;
        let kernel = toy_kernel(epsilon);
        let model = SoftmaxTable::from_kernel(&kernel);
        let schedule = PpoSchedule::new(0.1);
        let (updated, _) = run_ppo(&model, &kernel, &[(0, 2)], &schedule).unwrap();
        let before = model.probs_row(0);
        let after = updated.probs_row(0);
        let ratio_before = before[0] / before[1];
        let ratio_after = after[0] / after[1];
        assert!((ratio_before - ratio_after).abs() < 1e-12);
    }

    #[test]
    fn rows_without_edges_are_bitwise_unchanged() {
        let spec = GraphSpec::new(2, 4, 0.005, 7).with_topology(SparseTopology::BidirectionalCycle);
        let (kernel, edges) = build(&spec);
        let model = SoftmaxTable::from_kernel(&kernel);
        let schedule = PpoSchedule::new(spec.epsilon_max());
        let cluster0: Vec<(usize, usize)> = edges
            .outbound(0)
            .map(|e| (e.src, e.dst))
            .collect();
        let (updated, _) = run_ppo(&model, &kernel, &cluster0, &schedule).unwrap();
        let source = cluster0[0].0;
        for x in 0..kernel.num_states() {
            if x == source {
                continue;
            }
            for y in 0..kernel.num_states() {
                assert_eq!(updated.logit(x, y).to_bits(), model.logit(x, y).to_bits());
            }
        }
    }

    #[test]
    fn second_run_is_a_no_op() {
        let spec = GraphSpec::new(2, 4, 0.005, 9).with_topology(SparseTopology::BidirectionalCycle);
        let (kernel, edges) = build(&spec);
        let model = SoftmaxTable::from_kernel(&kernel);
        let schedule = PpoSchedule::new(spec.epsilon_max());
        let pairs = edges.pairs();
        let (once, _) = run_ppo(&model, &kernel, &pairs, &schedule).unwrap();
        let (twice, _) = run_ppo(&once, &kernel, &pairs, &schedule).unwrap();
        let mut max_delta: f64 = 0.0;
        for i in 0..once.rows() {
            for j in 0..once.cols() {
                if !once.is_masked(i, j) {
                    max_delta = max_delta.max((twice.logit(i, j) - once.logit(i, j)).abs());
                }
            }
        }
        assert_eq!(max_delta, 0.0);
    }

    #[test]
    fn tv_change_is_the_boosted_mass_and_stays_small() {
        let epsilon = 0.002;
        let spec = GraphSpec::new(2, 4, epsilon, 11).with_topology(SparseTopology::BidirectionalCycle);
        let (kernel, edges) = build(&spec);
        let model = SoftmaxTable::from_kernel(&kernel);
        assert_eq!(tv_change(&model, &model), 0.0);
        let schedule = PpoSchedule::new(spec.epsilon_max());
        let pairs = edges.pairs();
        let (updated, _) = run_ppo(&model, &kernel, &pairs, &schedule).unwrap();
        // Single boosted edge per row: TV = boosted mass - original mass.
        let (src, dst) = pairs[0];
        let delta = updated.probs_row(src)[dst] - model.probs_row(src)[dst];
        let row_tv: f64 = model
            .probs_row(src)
            .iter()
            .zip(updated.probs_row(src).iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            * 0.5;
        assert!((row_tv - delta).abs() < 1e-12);
        assert!(tv_change(&model, &updated) <= 2.0 * 1.0 * spec.epsilon_max());
    }

    #[test]
    fn oracle_hitting_time_improves_by_the_clip_factor() {
        let epsilon = 2e-3;
        let spec = GraphSpec::new(2, 4, epsilon, 13).with_topology(SparseTopology::BidirectionalCycle);
        let (kernel, edges) = build(&spec);
        let model = SoftmaxTable::from_kernel(&kernel);
        let schedule = PpoSchedule::new(spec.epsilon_max());
        let (updated, _) = run_ppo(&model, &kernel, &edges.pairs(), &schedule).unwrap();
        let tuned = updated.to_kernel(&kernel).unwrap();
        let target = vec![kernel.num_states() - 1];
        let before = oracle::expected_hitting_time(&kernel, &target).unwrap()[0];
        let after = oracle::expected_hitting_time(&tuned, &target).unwrap()[0];
        assert!(after <= before);
        let factor = spec.epsilon_max() / epsilon;
        let improvement = before / after;
        assert!(
            improvement >= 0.3 * factor && improvement <= 3.0 * factor,
            "improvement {improvement}, clip factor {factor}"
        );
    }

    #[test]
    fn plain_gradient_mode_enforces_the_epsilon_caveat() {
        let epsilon = 2e-3;
        let spec = GraphSpec::new(2, 4, epsilon, 13).with_topology(SparseTopology::BidirectionalCycle);
        let (kernel, edges) = build(&spec);
        let model = SoftmaxTable::from_kernel(&kernel);
        let mut schedule = PpoSchedule::new(spec.epsilon_max());
        schedule.sign_gradient = false;
        // epsilon_max(4)^2 = 4.6e-3 exceeds epsilon = 2e-3.
        assert!(matches!(
            run_ppo(&model, &kernel, &edges.pairs(), &schedule),
            Err(Error::InvalidSpec(_))
        ));
    }

    #[test]
    fn masked_edge_in_the_estimate_is_rejected() {
        let kernel = toy_kernel(0.01);
        let mut model = SoftmaxTable::from_kernel(&kernel);
        model.mask(0, 2);
        let schedule = PpoSchedule::new(0.1);
        assert!(matches!(
            run_ppo(&model, &kernel, &[(0, 2)], &schedule),
            Err(Error::Validation(_))
        ));
    }
}
