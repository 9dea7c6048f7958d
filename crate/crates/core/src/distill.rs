//! Meta-chain distillation.
//!
//! A representative is chosen per cluster by short exploratory rollouts, the
//! population law of consecutive representative visits is assembled (exactly
//! via the oracle, or streamed from a long rollout), a K x K softmax is
//! trained on it with mid-training thresholding, and the off-diagonal logits
//! are shifted by beta to strip the within-cluster laziness. The rescaled
//! chain hops between clusters in O(K) steps regardless of ε.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

use crate::dynamics::Path;
use crate::kernel::{SparseEdgeSet, TransitionKernel};
use crate::oracle;
use crate::pretrain::{SoftmaxTable, TraceEntry};
use crate::{rng, Error, Result};

const LABEL_STREAM: u64 = 6 << 32;

/// Representatives and the state -> representative assignment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterLabeling {
    /// Representative states in discovery order.
    pub representatives: Vec<usize>,
    /// For each state, the representative state it is assigned to.
    pub iota: Vec<usize>,
}

impl ClusterLabeling {
    /// The designated transversal: one representative per cluster (the
    /// inbound target when the instance has one), assignment by true partition.
    pub fn designated(kernel: &TransitionKernel) -> Self {
        let reps: Vec<usize> = match kernel.designated_targets() {
            Some(d) => d.to_vec(),
            None => (0..kernel.num_clusters())
                .map(|k| kernel.cluster_states(k)[0])
                .collect(),
        };
        let iota = (0..kernel.num_states())
            .map(|x| reps[kernel.cluster_of(x)])
            .collect();
        ClusterLabeling { representatives: reps, iota }
    }

    /// True when there is exactly one representative per cluster and every
    /// state is assigned to its own cluster's representative.
    pub fn is_true_transversal(&self, kernel: &TransitionKernel) -> bool {
        let k_count = kernel.num_clusters();
        if self.representatives.len() != k_count {
            return false;
        }
        let mut per_cluster = vec![None; k_count];
        for &r in &self.representatives {
            let k = kernel.cluster_of(r);
            if per_cluster[k].is_some() {
                return false;
            }
            per_cluster[k] = Some(r);
        }
        self.iota
            .iter()
            .enumerate()
            .all(|(x, &r)| per_cluster[kernel.cluster_of(x)] == Some(r))
    }

    /// Representatives indexed by cluster; errors unless a true transversal.
    pub fn reps_by_cluster(&self, kernel: &TransitionKernel) -> Result<Vec<usize>> {
        if !self.is_true_transversal(kernel) {
            return Err(Error::Validation(
                "labeling is not a transversal of the true partition".into(),
            ));
        }
        let mut reps = vec![0; kernel.num_clusters()];
        for &r in &self.representatives {
            reps[kernel.cluster_of(r)] = r;
        }
        Ok(reps)
    }
}

/// Explores from unlabeled states until every state carries a label. Each
/// draw becomes a representative and its T0-step rollout labels the unlabeled
/// states it visits; already-labeled states keep their first label.
pub fn label_clusters(kernel: &TransitionKernel, t0: usize, seed: u64) -> ClusterLabeling {
    let n = kernel.num_states();
    let mut iota: Vec<Option<usize>> = vec![None; n];
    let mut representatives = Vec::new();
    let mut rng = rng::stream(seed, LABEL_STREAM);
    let mut round = 0u64;
    while let Some(x0) = draw_unlabeled(&iota, &mut rng) {
        iota[x0] = Some(x0);
        representatives.push(x0);
        let mut walk_rng = rng::substream(seed, LABEL_STREAM | 1, round);
        let mut x = x0;
        for _ in 0..t0 {
            x = crate::dynamics::step(kernel, x, &mut walk_rng);
            if iota[x].is_none() {
                iota[x] = Some(x0);
            }
        }
        round += 1;
    }
    ClusterLabeling {
        representatives,
        iota: iota.into_iter().map(|l| l.unwrap()).collect(),
    }
}

fn draw_unlabeled(iota: &[Option<usize>], rng: &mut impl Rng) -> Option<usize> {
    let unlabeled: Vec<usize> = iota
        .iter()
        .enumerate()
        .filter(|(_, l)| l.is_none())
        .map(|(x, _)| x)
        .collect();
    if unlabeled.is_empty() {
        None
    } else {
        Some(unlabeled[rng.random_range(0..unlabeled.len())])
    }
}

/// Joint law of consecutive representative visits (Y0, Y1).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillData {
    /// Representative states, one per row/column.
    pub reps: Vec<usize>,
    /// Row-major joint probabilities, rows indexed by Y0.
    pub joint: Vec<f64>,
}

impl DistillData {
    pub fn dim(&self) -> usize {
        self.reps.len()
    }

    pub fn joint_at(&self, k: usize, l: usize) -> f64 {
        self.joint[k * self.dim() + l]
    }

    /// Marginal of Y0.
    pub fn marginal(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|k| (0..self.dim()).map(|l| self.joint_at(k, l)).sum())
            .collect()
    }

    /// Conditional rows Y1 | Y0.
    pub fn conditionals(&self) -> Vec<Vec<f64>> {
        let xi = self.marginal();
        (0..self.dim())
            .map(|k| {
                (0..self.dim())
                    .map(|l| if xi[k] > 0.0 { self.joint_at(k, l) / xi[k] } else { 0.0 })
                    .collect()
            })
            .collect()
    }
}

/// Exact population law: Y0 carries the stationary cluster masses and
/// Y1 | Y0 follows the representative meta-chain.
pub fn population_ddist(kernel: &TransitionKernel, labeling: &ClusterLabeling) -> Result<DistillData> {
    let reps = labeling.reps_by_cluster(kernel)?;
    let k_count = reps.len();
    let decomposition = oracle::stationary(kernel)?;
    let qcirc = oracle::meta_kernel_qcirc(kernel, &reps)?;
    let mut joint = vec![0.0; k_count * k_count];
    for k in 0..k_count {
        for l in 0..k_count {
            joint[k * k_count + l] = decomposition.coupling[k] * qcirc.rows[(k, l)];
        }
    }
    Ok(DistillData { reps, joint })
}

/// Streamed estimate of the same law from one long stationary rollout,
/// following the data-collection rules: a representative visit opens a pair
/// closed by the next representative visit, any other step records the
/// self-pair of its assigned representative. Returns the estimate and a
/// batch-means standard error per cell.
pub fn population_ddist_mc(
    kernel: &TransitionKernel,
    labeling: &ClusterLabeling,
    steps: usize,
    num_batches: usize,
    seed: u64,
) -> Result<(DistillData, Vec<f64>)> {
    let reps = labeling.representatives.clone();
    let k_count = reps.len();
    let rep_index: std::collections::HashMap<usize, usize> =
        reps.iter().enumerate().map(|(i, &r)| (r, i)).collect();
    let idx_of_state: Vec<usize> = labeling.iota.iter().map(|&r| rep_index[&r]).collect();

    // Stationary start removes burn-in bias at desk scale.
    let pi = oracle::stationary(kernel)?.global;
    let cum: Vec<f64> = pi
        .iter()
        .scan(0.0, |acc, &p| {
            *acc += p;
            Some(*acc)
        })
        .collect();
    let mut rng = rng::stream(seed, 0);
    let u: f64 = rng.random_range(0.0..*cum.last().unwrap());
    let mut x = cum.partition_point(|&c| c <= u).min(kernel.num_states() - 1);

    let batch_len = (steps / num_batches).max(1);
    let mut batches: Vec<Vec<f64>> = Vec::new();
    let mut counts = vec![0u64; k_count * k_count];
    let mut batch_counts = vec![0u64; k_count * k_count];
    let mut pending: Option<usize> = None;
    let mut recorded_in_batch = 0usize;

    for _ in 0..steps {
        x = crate::dynamics::step(kernel, x, &mut rng);
        if let Some(&k) = rep_index.get(&x) {
            if let Some(prev) = pending {
                counts[prev * k_count + k] += 1;
                batch_counts[prev * k_count + k] += 1;
                recorded_in_batch += 1;
            }
            pending = Some(k);
        } else if pending.is_some() {
            // Self-pair of the assigned representative; the prefix before the
            // first representative visit is discarded.
            let k = idx_of_state[x];
            counts[k * k_count + k] += 1;
            batch_counts[k * k_count + k] += 1;
            recorded_in_batch += 1;
        }
        if recorded_in_batch >= batch_len {
            let total: u64 = batch_counts.iter().sum();
            batches.push(batch_counts.iter().map(|&c| c as f64 / total as f64).collect());
            batch_counts = vec![0u64; k_count * k_count];
            recorded_in_batch = 0;
        }
    }

    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::Infeasible("no representative visits recorded".into()));
    }
    let joint: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();

    let b = batches.len().max(1) as f64;
    let mut stderr = vec![0.0; k_count * k_count];
    if batches.len() > 1 {
        for cell in 0..k_count * k_count {
            let mean: f64 = batches.iter().map(|bt| bt[cell]).sum::<f64>() / b;
            let var: f64 =
                batches.iter().map(|bt| (bt[cell] - mean).powi(2)).sum::<f64>() / (b - 1.0);
            stderr[cell] = (var / b).sqrt();
        }
    }
    Ok((DistillData { reps, joint }, stderr))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillSchedule {
    pub t_dist: usize,
    pub t_thres: usize,
    /// None selects 1 / max_k xi_k.
    pub eta: Option<f64>,
    pub c_thres: f64,
    /// Off-diagonal logit shift; None selects ln(M/ε).
    pub beta: Option<f64>,
    /// Base-kernel scale parameters fixing the threshold c_thres·ε/M.
    pub epsilon: f64,
    pub cluster_size: usize,
    pub trace_every: usize,
}

impl DistillSchedule {
    /// Schedule at the theoretical scale T_dist ~ M^2 (ln K)^2 / ε^2,
    /// T_thres ~ (M/ε) ln(M/ε).
    pub fn paper(num_clusters: usize, cluster_size: usize, epsilon: f64) -> Self {
        let m = cluster_size as f64;
        let k = num_clusters.max(2) as f64;
        let t_dist = ((m * m * k.ln().powi(2)) / (epsilon * epsilon)).ceil().min(2e8) as usize;
        let t_thres = ((m / epsilon) * (m / epsilon).ln()).ceil() as usize;
        DistillSchedule {
            t_dist: t_dist.max(2),
            t_thres: t_thres.clamp(1, t_dist.max(2) - 1),
            eta: None,
            c_thres: 0.25,
            beta: None,
            epsilon,
            cluster_size,
            trace_every: (t_dist / 1000).max(1),
        }
    }

    pub fn threshold(&self) -> f64 {
        self.c_thres * self.epsilon / self.cluster_size as f64
    }

    pub fn beta_value(&self) -> f64 {
        self.beta
            .unwrap_or_else(|| (self.cluster_size as f64 / self.epsilon).ln())
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_thres >= self.t_dist {
            return Err(Error::InvalidSpec(format!(
                "T_thres = {} must be below T_dist = {}",
                self.t_thres, self.t_dist
            )));
        }
        if self.beta_value() <= 0.0 {
            return Err(Error::InvalidSpec("beta must be positive".into()));
        }
        if !(0.0 < self.c_thres && self.c_thres < 1.0) {
            return Err(Error::InvalidSpec("c_thres outside (0,1)".into()));
        }
        Ok(())
    }
}

/// Trains the K x K softmax on the distillation law with thresholding at
/// T_thres, returning the masked model and its sup-error trace against the
/// law's conditional rows.
pub fn train_distill(
    ddist: &DistillData,
    schedule: &DistillSchedule,
) -> Result<(SoftmaxTable, Vec<TraceEntry>)> {
    schedule.validate()?;
    let k = ddist.dim();
    let xi = ddist.marginal();
    let targets = ddist.conditionals();
    for (row, t) in targets.iter().enumerate() {
        let s: f64 = t.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!("ddist row {row} is not a distribution")));
        }
    }
    let max_xi = xi.iter().cloned().fold(0.0, f64::max);
    let eta = schedule.eta.unwrap_or(1.0 / max_xi);
    let threshold = schedule.threshold();

    let mut model = SoftmaxTable::zeros(k, k);
    let mut trace = Vec::new();

    let gd_step = |model: &mut SoftmaxTable| {
        for row in 0..k {
            let probs = model.probs_row(row);
            for col in 0..k {
                if !model.is_masked(row, col) {
                    let g = xi[row] * (probs[col] - targets[row][col]);
                    model.add_logit(row, col, -eta * g);
                }
            }
        }
    };

    let sup = |model: &SoftmaxTable| -> f64 {
        let mut worst: f64 = 0.0;
        for row in 0..k {
            let probs = model.probs_row(row);
            for col in 0..k {
                worst = worst.max((probs[col] - targets[row][col]).abs());
            }
        }
        worst
    };

    for t in 1..=schedule.t_dist {
        gd_step(&mut model);
        if t == schedule.t_thres {
            for row in 0..k {
                let probs = model.probs_row(row);
                for col in 0..k {
                    if !model.is_masked(row, col) && probs[col] < threshold {
                        if targets[row][col] > 0.0 {
                            return Err(Error::SupportRecovery {
                                row,
                                col,
                                prob: targets[row][col],
                            });
                        }
                        model.mask(row, col);
                    }
                }
            }
        }
        if t % schedule.trace_every == 0 || t == schedule.t_dist || t == schedule.t_thres {
            trace.push(TraceEntry {
                step: t,
                phase: if t <= schedule.t_thres { 1 } else { 2 },
                sup_error: sup(&model),
            });
        }
    }

    Ok((model, trace))
}

/// Adds beta to every unmasked off-diagonal logit; masked entries stay zero.
pub fn rescale(z: &SoftmaxTable, beta: f64) -> SoftmaxTable {
    let mut zplus = z.clone();
    for i in 0..z.rows() {
        for j in 0..z.cols() {
            if i != j && !z.is_masked(i, j) {
                zplus.add_logit(i, j, beta);
            }
        }
    }
    zplus
}

/// Residual of the laziness identity q = lambda q+ + (1 - lambda) I between
/// the trained chain and its rescaled version, with per-row lambda read off
/// the diagonal. Returns (lambdas, max residual).
pub fn laziness_identity(z: &SoftmaxTable, zplus: &SoftmaxTable) -> (Vec<f64>, f64) {
    let k = z.rows();
    let mut lambdas = Vec::with_capacity(k);
    let mut worst: f64 = 0.0;
    for row in 0..k {
        let q = z.probs_row(row);
        let qp = zplus.probs_row(row);
        let denom = 1.0 - qp[row];
        let lambda = if denom > 0.0 { (1.0 - q[row]) / denom } else { 1.0 };
        lambdas.push(lambda);
        for col in 0..k {
            let kronecker = if col == row { 1.0 } else { 0.0 };
            let reconstructed = lambda * qp[col] + (1.0 - lambda) * kronecker;
            worst = worst.max((q[col] - reconstructed).abs());
        }
    }
    (lambdas, worst)
}

/// Rollout of the rescaled chain from representative `from` until `to`.
/// Returns the visited representative-row sequence (excluding the start).
pub fn distilled_cot(
    zplus: &SoftmaxTable,
    from: usize,
    to: usize,
    horizon: usize,
    rng: &mut impl Rng,
) -> (Vec<usize>, bool) {
    let mut sequence = Vec::new();
    let mut current = from;
    if from == to {
        return (sequence, false);
    }
    for _ in 0..horizon {
        let probs = zplus.probs_row(current);
        let mut acc = 0.0;
        let u: f64 = rng.random_range(0.0..1.0);
        let mut next = current;
        for (j, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                next = j;
                break;
            }
        }
        if next != current {
            sequence.push(next);
            current = next;
        }
        if current == to {
            return (sequence, false);
        }
    }
    (sequence, true)
}

/// Expected number of steps of the rescaled chain to hit `to` from `from`,
/// computed exactly from its transition probabilities.
pub fn distilled_hitting_oracle(zplus: &SoftmaxTable, to: usize) -> Result<Vec<f64>> {
    let k = zplus.rows();
    let rows: Vec<Vec<(usize, f64)>> = (0..k)
        .map(|i| {
            zplus
                .probs_row(i)
                .into_iter()
                .enumerate()
                .filter(|&(_, p)| p > 0.0)
                .collect()
        })
        .collect();
    let chain = TransitionKernel::from_rows((0..k).collect(), rows, 0.0, 0)?;
    oracle::expected_hitting_time(&chain, &[to])
}

fn step_within_cluster(
    kernel: &TransitionKernel,
    x: usize,
    cluster: usize,
    rng: &mut impl Rng,
) -> usize {
    let row = kernel.row(x);
    let entries: Vec<(usize, f64)> = row
        .targets
        .iter()
        .zip(&row.probs)
        .filter(|&(&t, _)| kernel.cluster_of(t as usize) == cluster)
        .map(|(&t, &p)| (t as usize, p))
        .collect();
    let total: f64 = entries.iter().map(|&(_, p)| p).sum();
    let u: f64 = rng.random_range(0.0..total);
    let mut acc = 0.0;
    for &(t, p) in &entries {
        acc += p;
        if u < acc {
            return t;
        }
    }
    entries.last().unwrap().0
}

/// Resolves a cluster path into a full state path: inside each cluster the
/// walk follows the within-cluster (unperturbed) dynamics until the planted
/// edge source is reached, crosses the edge, and continues; the final segment
/// walks to `x_out`.
pub fn lift_path(
    kernel: &TransitionKernel,
    edges: &SparseEdgeSet,
    cluster_path: &[usize],
    x_in: usize,
    x_out: usize,
    hop_horizon: usize,
    rng: &mut impl Rng,
) -> Result<Path> {
    if cluster_path.is_empty() {
        return Err(Error::Validation("empty cluster path".into()));
    }
    if kernel.cluster_of(x_in) != cluster_path[0] {
        return Err(Error::Validation("x_in outside the first path cluster".into()));
    }
    if kernel.cluster_of(x_out) != *cluster_path.last().unwrap() {
        return Err(Error::Validation("x_out outside the final path cluster".into()));
    }

    let mut states = vec![x_in];
    let mut sparse_crossings = Vec::new();
    let mut truncated = false;
    let mut x = x_in;

    for hop in cluster_path.windows(2) {
        let (k, l) = (hop[0], hop[1]);
        let edge = edges
            .outbound(k)
            .find(|e| kernel.cluster_of(e.dst) == l)
            .ok_or_else(|| Error::Validation(format!("no planted edge {k} -> {l}")))?;
        let mut reached = x == edge.src;
        for _ in 0..hop_horizon {
            if reached {
                break;
            }
            x = step_within_cluster(kernel, x, k, rng);
            states.push(x);
            reached = x == edge.src;
        }
        if !reached {
            truncated = true;
            break;
        }
        sparse_crossings.push(states.len() - 1);
        states.push(edge.dst);
        x = edge.dst;
    }

    if !truncated {
        let last = *cluster_path.last().unwrap();
        let mut reached = x == x_out;
        for _ in 0..hop_horizon {
            if reached {
                break;
            }
            x = step_within_cluster(kernel, x, last, rng);
            states.push(x);
            reached = x == x_out;
        }
        truncated = !reached;
    }

    Ok(Path { states, sparse_crossings, truncated })
}

// ── serialization ────────────────────────────────────────────────────────────

/// Distilled model dump: header `K beta`, representative labels, K mask rows
/// of 0/1 flags, then `i j logit` entries for the unmasked cells.
pub fn distilled_to_string(z: &SoftmaxTable, reps: &[usize], beta: f64) -> String {
    let k = z.rows();
    let mut out = String::new();
    let _ = writeln!(out, "{} {:.16e}", k, beta);
    let labels: Vec<String> = reps.iter().map(|r| r.to_string()).collect();
    let _ = writeln!(out, "{}", labels.join(" "));
    for i in 0..k {
        let row: String = (0..k)
            .map(|j| if z.is_masked(i, j) { '1' } else { '0' })
            .collect();
        let _ = writeln!(out, "{row}");
    }
    for i in 0..k {
        for j in 0..k {
            if !z.is_masked(i, j) {
                let _ = writeln!(out, "{} {} {:.16e}", i, j, z.logit(i, j));
            }
        }
    }
    out
}

pub fn distilled_from_str(text: &str) -> Result<(SoftmaxTable, Vec<usize>, f64)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Parse("empty distilled file".into()))?;
    let head: Vec<&str> = header.split_whitespace().collect();
    if head.len() != 2 {
        return Err(Error::Parse(format!("bad distilled header: {header}")));
    }
    let k: usize = head[0].parse().map_err(|_| Error::Parse("bad K".into()))?;
    let beta: f64 = head[1].parse().map_err(|_| Error::Parse("bad beta".into()))?;
    let reps: Vec<usize> = lines
        .next()
        .ok_or_else(|| Error::Parse("missing labels".into()))?
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::Parse("bad label".into())))
        .collect::<Result<_>>()?;
    let mut table = SoftmaxTable::zeros(k, k);
    for i in 0..k {
        let row = lines.next().ok_or_else(|| Error::Parse("missing mask row".into()))?;
        for (j, c) in row.trim().chars().enumerate() {
            if c == '1' {
                table.mask(i, j);
            }
        }
    }
    for line in lines {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 {
            return Err(Error::Parse(format!("bad distilled entry: {line}")));
        }
        let i: usize = f[0].parse().map_err(|_| Error::Parse("bad row".into()))?;
        let j: usize = f[1].parse().map_err(|_| Error::Parse("bad col".into()))?;
        let v: f64 = f[2].parse().map_err(|_| Error::Parse("bad logit".into()))?;
        table.set_logit(i, j, v);
    }
    Ok((table, reps, beta))
}
