//! Two-stage pretraining of the linear softmax world model.
//!
//! Phase one runs full-batch gradient descent on the population cross-entropy
//! from zero logits; entries whose learned probability stays below
//! c_thres·ε are then masked to exact zero, and phase two continues on the
//! recovered support where the loss is strongly convex and the error decays
//! geometrically.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

use crate::kernel::TransitionKernel;
use crate::{oracle, rng, Error, Result};

/// Row-softmax logit table with explicit masking; masked entries produce
/// exactly zero probability and receive no updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxTable {
    rows: usize,
    cols: usize,
    logits: Vec<f64>,
    masked: Vec<bool>,
}

impl SoftmaxTable {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        SoftmaxTable {
            rows,
            cols,
            logits: vec![0.0; rows * cols],
            masked: vec![false; rows * cols],
        }
    }

    /// Logits ln p on the kernel support, masked elsewhere; represents the
    /// kernel exactly.
    pub fn from_kernel(kernel: &TransitionKernel) -> Self {
        let n = kernel.num_states();
        let mut table = SoftmaxTable {
            rows: n,
            cols: n,
            logits: vec![0.0; n * n],
            masked: vec![true; n * n],
        };
        for x in 0..n {
            let row = kernel.row(x);
            for (&t, &p) in row.targets.iter().zip(&row.probs) {
                if p > 0.0 {
                    let idx = x * n + t as usize;
                    table.logits[idx] = p.ln();
                    table.masked[idx] = false;
                }
            }
        }
        table
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn logit(&self, i: usize, j: usize) -> f64 {
        self.logits[i * self.cols + j]
    }

    pub fn set_logit(&mut self, i: usize, j: usize, value: f64) {
        self.logits[i * self.cols + j] = value;
    }

    pub fn add_logit(&mut self, i: usize, j: usize, delta: f64) {
        self.logits[i * self.cols + j] += delta;
    }

    pub fn is_masked(&self, i: usize, j: usize) -> bool {
        self.masked[i * self.cols + j]
    }

    pub fn mask(&mut self, i: usize, j: usize) {
        self.masked[i * self.cols + j] = true;
        self.logits[i * self.cols + j] = 0.0;
    }

    /// Row softmax over unmasked entries.
    pub fn probs_row(&self, i: usize) -> Vec<f64> {
        let base = i * self.cols;
        let mut max = f64::NEG_INFINITY;
        for j in 0..self.cols {
            if !self.masked[base + j] {
                max = max.max(self.logits[base + j]);
            }
        }
        let mut out = vec![0.0; self.cols];
        if max == f64::NEG_INFINITY {
            return out;
        }
        let mut z = 0.0;
        for j in 0..self.cols {
            if !self.masked[base + j] {
                let e = (self.logits[base + j] - max).exp();
                out[j] = e;
                z += e;
            }
        }
        for v in out.iter_mut() {
            *v /= z;
        }
        out
    }

    pub fn prob(&self, i: usize, j: usize) -> f64 {
        self.probs_row(i)[j]
    }

    /// View as a transition kernel over the template's cluster structure.
    pub fn to_kernel(&self, template: &TransitionKernel) -> Result<TransitionKernel> {
        if self.rows != template.num_states() || self.cols != template.num_states() {
            return Err(Error::Validation("model/kernel shape mismatch".into()));
        }
        let rows = (0..self.rows)
            .map(|i| {
                self.probs_row(i)
                    .into_iter()
                    .enumerate()
                    .filter(|&(_, p)| p > 0.0)
                    .collect()
            })
            .collect();
        TransitionKernel::from_rows(
            template.partition().to_vec(),
            rows,
            template.epsilon(),
            template.seed(),
        )
    }

    /// Masked-aware logit dump: header `rows cols`, then `i j logit` for every
    /// unmasked entry.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} {}", self.rows, self.cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                if !self.is_masked(i, j) {
                    let _ = writeln!(out, "{} {} {:.16e}", i, j, self.logit(i, j));
                }
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Parse("empty model file".into()))?;
        let head: Vec<&str> = header.split_whitespace().collect();
        if head.len() != 2 {
            return Err(Error::Parse(format!("bad model header: {header}")));
        }
        let rows: usize = head[0].parse().map_err(|_| Error::Parse("bad rows".into()))?;
        let cols: usize = head[1].parse().map_err(|_| Error::Parse("bad cols".into()))?;
        let mut table = SoftmaxTable {
            rows,
            cols,
            logits: vec![0.0; rows * cols],
            masked: vec![true; rows * cols],
        };
        for line in lines {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 3 {
                return Err(Error::Parse(format!("bad model line: {line}")));
            }
            let i: usize = f[0].parse().map_err(|_| Error::Parse("bad row".into()))?;
            let j: usize = f[1].parse().map_err(|_| Error::Parse("bad col".into()))?;
            let v: f64 = f[2].parse().map_err(|_| Error::Parse("bad logit".into()))?;
            table.logits[i * cols + j] = v;
            table.masked[i * cols + j] = false;
        }
        Ok(table)
    }
}

/// Law of the bigram source state X0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SourceDist {
    Uniform,
    Stationary,
}

/// Exact population gradients by default; the sampled mode draws bigram
/// batches instead and exists for demonstration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GradientMode {
    Population,
    Sampled { batch_size: usize, seed: u64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub t1: usize,
    pub t2: usize,
    /// Learning rate; None selects 1 / max_i mu_i.
    pub eta: Option<f64>,
    pub c_thres: f64,
    pub source_dist: SourceDist,
    pub gradient_mode: GradientMode,
    /// Record the error trace every this many steps (and at phase ends).
    pub trace_every: usize,
}

impl TrainSchedule {
    pub fn new(t1: usize, t2: usize) -> Self {
        TrainSchedule {
            t1,
            t2,
            eta: None,
            c_thres: 0.25,
            source_dist: SourceDist::Uniform,
            gradient_mode: GradientMode::Population,
            trace_every: 1,
        }
    }

    /// Step counts at the theoretical scale T1 ~ K M^2 / ε^2, T2 ~ K M / ε^2.
    pub fn paper(k: usize, m: usize, epsilon: f64) -> Self {
        let e2 = epsilon * epsilon;
        let t1 = ((k * m * m) as f64 / e2).ceil().min(5e6) as usize;
        let t2 = ((k * m) as f64 / e2).ceil().min(5e6) as usize;
        let mut s = TrainSchedule::new(t1.max(1), t2.max(1));
        s.trace_every = (t1 / 500).max(1);
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.t1 == 0 || self.t2 == 0 || self.trace_every == 0 {
            return Err(Error::InvalidSpec("step counts must be positive".into()));
        }
        if !(0.0 < self.c_thres && self.c_thres < 1.0) {
            return Err(Error::InvalidSpec(format!("c_thres {} outside (0,1)", self.c_thres)));
        }
        if let Some(eta) = self.eta {
            if eta <= 0.0 {
                return Err(Error::InvalidSpec("eta must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: usize,
    pub phase: u8,
    pub sup_error: f64,
}

/// Error-trace CSV: `step,phase,sup_error`.
pub fn trace_to_csv(trace: &[TraceEntry]) -> String {
    let mut out = String::from("step,phase,sup_error\n");
    for e in trace {
        let _ = writeln!(out, "{},{},{}", e.step, e.phase, e.sup_error);
    }
    out
}

/// Source-state weights for the chosen law.
pub fn source_weights(kernel: &TransitionKernel, dist: SourceDist) -> Result<Vec<f64>> {
    match dist {
        SourceDist::Uniform => {
            let n = kernel.num_states();
            Ok(vec![1.0 / n as f64; n])
        }
        SourceDist::Stationary => Ok(oracle::stationary(kernel)?.global),
    }
}

/// Exact gradient of E[-log p_W(X1|X0)]: row i equals mu_i (p_hat_i - p_i),
/// zero on masked entries.
pub fn population_ce_gradient(
    model: &SoftmaxTable,
    kernel: &TransitionKernel,
    weights: &[f64],
) -> Vec<f64> {
    let n = kernel.num_states();
    let mut grad = vec![0.0; n * n];
    for i in 0..n {
        let probs = model.probs_row(i);
        let row = kernel.row(i);
        for j in 0..n {
            if !model.is_masked(i, j) {
                grad[i * n + j] = weights[i] * probs[j];
            }
        }
        for (&t, &p) in row.targets.iter().zip(&row.probs) {
            let j = t as usize;
            if !model.is_masked(i, j) {
                grad[i * n + j] -= weights[i] * p;
            }
        }
    }
    grad
}

/// Population cross-entropy E[-log p_W(X1|X0)].
pub fn population_ce_loss(
    model: &SoftmaxTable,
    kernel: &TransitionKernel,
    weights: &[f64],
) -> f64 {
    let n = kernel.num_states();
    let mut loss = 0.0;
    for i in 0..n {
        let probs = model.probs_row(i);
        let row = kernel.row(i);
        for (&t, &p) in row.targets.iter().zip(&row.probs) {
            if p > 0.0 {
                loss -= weights[i] * p * probs[t as usize].max(1e-300).ln();
            }
        }
    }
    loss
}

/// sup_{i,j} |p_hat_ij - p_ij|.
pub fn sup_error(model: &SoftmaxTable, kernel: &TransitionKernel) -> f64 {
    let n = kernel.num_states();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let probs = model.probs_row(i);
        for (j, &p_hat) in probs.iter().enumerate() {
            let p = kernel.prob(i, j);
            worst = worst.max((p_hat - p).abs());
        }
    }
    worst
}

fn sampled_gradient(
    model: &SoftmaxTable,
    kernel: &TransitionKernel,
    weights: &[f64],
    batch: usize,
    rng: &mut impl Rng,
) -> Vec<f64> {
    let n = kernel.num_states();
    let cum: Vec<f64> = weights
        .iter()
        .scan(0.0, |acc, &w| {
            *acc += w;
            Some(*acc)
        })
        .collect();
    let total = *cum.last().unwrap();
    let mut grad = vec![0.0; n * n];
    let scale = 1.0 / batch as f64;
    for _ in 0..batch {
        let u: f64 = rng.random_range(0.0..total);
        let x0 = cum.partition_point(|&c| c <= u).min(n - 1);
        let x1 = kernel.row(x0).sample(rng);
        let probs = model.probs_row(x0);
        for j in 0..n {
            if !model.is_masked(x0, j) {
                grad[x0 * n + j] += scale * probs[j];
            }
        }
        if !model.is_masked(x0, x1) {
            grad[x0 * n + x1] -= scale;
        }
    }
    grad
}

/// Runs the two training phases with mid-training thresholding and returns
/// the final model together with the sup-error trace.
///
/// Errors if the threshold would mask a true kernel transition (the first
/// phase was too short) or if c_thres·ε is not below the smallest true edge
/// probability.
pub fn train_two_stage(
    kernel: &TransitionKernel,
    schedule: &TrainSchedule,
) -> Result<(SoftmaxTable, Vec<TraceEntry>)> {
    schedule.validate()?;
    let n = kernel.num_states();
    let weights = source_weights(kernel, schedule.source_dist)?;
    let max_w = weights.iter().cloned().fold(0.0, f64::max);
    let eta = schedule.eta.unwrap_or(1.0 / max_w);
    if eta > 1.0 / max_w + 1e-12 {
        return Err(Error::InvalidSpec(format!(
            "eta {eta} exceeds 1/max_i mu_i = {}",
            1.0 / max_w
        )));
    }

    let threshold = schedule.c_thres * kernel.epsilon();
    let min_true = kernel
        .edge_support()
        .iter()
        .map(|&(x, y)| kernel.prob(x, y))
        .fold(f64::INFINITY, f64::min);
    if kernel.epsilon() > 0.0 && threshold >= min_true {
        return Err(Error::InvalidSpec(format!(
            "threshold c_thres*eps = {threshold:.4e} not below the smallest true edge probability {min_true:.4e}"
        )));
    }

    let mut model = SoftmaxTable::zeros(n, n);
    let mut trace = Vec::new();
    let mut sample_rng = match schedule.gradient_mode {
        GradientMode::Sampled { seed, .. } => Some(rng::stream(seed, 0)),
        GradientMode::Population => None,
    };

    let mut gd_step = |model: &mut SoftmaxTable| {
        let grad = match schedule.gradient_mode {
            GradientMode::Population => population_ce_gradient(model, kernel, &weights),
            GradientMode::Sampled { batch_size, .. } => sampled_gradient(
                model,
                kernel,
                &weights,
                batch_size,
                sample_rng.as_mut().unwrap(),
            ),
        };
        for i in 0..n {
            for j in 0..n {
                if !model.is_masked(i, j) {
                    model.add_logit(i, j, -eta * grad[i * n + j]);
                }
            }
        }
    };

    for t in 1..=schedule.t1 {
        gd_step(&mut model);
        if t % schedule.trace_every == 0 || t == schedule.t1 {
            trace.push(TraceEntry { step: t, phase: 1, sup_error: sup_error(&model, kernel) });
        }
    }

    // Thresholding: refuse to mask any true transition, then mask the rest.
    for i in 0..n {
        let probs = model.probs_row(i);
        for (j, &p_hat) in probs.iter().enumerate() {
            if !model.is_masked(i, j) && p_hat < threshold && kernel.prob(i, j) > 0.0 {
                return Err(Error::SupportRecovery { row: i, col: j, prob: kernel.prob(i, j) });
            }
        }
        for (j, &p_hat) in probs.iter().enumerate() {
            if !model.is_masked(i, j) && p_hat < threshold {
                model.mask(i, j);
            }
        }
    }

    for t in 1..=schedule.t2 {
        gd_step(&mut model);
        if t % schedule.trace_every == 0 || t == schedule.t2 {
            trace.push(TraceEntry {
                step: schedule.t1 + t,
                phase: 2,
                sup_error: sup_error(&model, kernel),
            });
        }
    }

    Ok((model, trace))
}

/// The learned support {(i,j) : p_hat_ij >= c_thres·ε} after training.
pub fn recovered_support(model: &SoftmaxTable, threshold: f64) -> Vec<(usize, usize)> {
    let mut support = Vec::new();
    for i in 0..model.rows() {
        let probs = model.probs_row(i);
        for (j, &p) in probs.iter().enumerate() {
            if p >= threshold {
                support.push((i, j));
            }
        }
    }
    support
}
