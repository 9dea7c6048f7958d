//! Perturbed metastable kernel family.
//!
//! `build_unperturbed` generates the block-diagonal kernel p0 (dense, lazy,
//! reversible clusters), `plant_sparse_edges` overlays the inter-cluster
//! sparse edges with probabilities in [c·ε, ε] and rescales dense rows, and
//! `validate_assumptions` measures the spectral/structural conditions the
//! dynamics theory relies on.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt::Write as _;

use crate::{oracle, rng, Error, Result, DENSE_GUARD};

const BLOCK_STREAM: u64 = 1 << 32;
const SOURCE_STREAM: u64 = 2 << 32;
const TARGET_STREAM: u64 = 3 << 32;
const PROB_STREAM: u64 = 4 << 32;
const TASK_STREAM: u64 = 5 << 32;
const MAX_BLOCK_ATTEMPTS: u64 = 64;

/// Inter-cluster wiring of the sparse edges, as a directed meta-graph on clusters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SparseTopology {
    /// k -> k+1 (mod K).
    Cycle,
    /// k <-> k+1 (mod K).
    BidirectionalCycle,
    /// Each cluster draws `out_degree` distinct random targets.
    RandomRegular { out_degree: usize },
    /// Explicit ordered cluster pairs.
    Explicit(Vec<(usize, usize)>),
}

impl SparseTopology {
    /// Ordered cluster pairs carrying a sparse edge.
    pub fn cluster_pairs(&self, num_clusters: usize, seed: u64) -> Vec<(usize, usize)> {
        match self {
            SparseTopology::Cycle => {
                if num_clusters < 2 {
                    return Vec::new();
                }
                (0..num_clusters).map(|k| (k, (k + 1) % num_clusters)).collect()
            }
            SparseTopology::BidirectionalCycle => {
                if num_clusters < 2 {
                    return Vec::new();
                }
                let mut pairs = std::collections::HashSet::new();
                for k in 0..num_clusters {
                    let next = (k + 1) % num_clusters;
                    pairs.insert((k, next));
                    pairs.insert((next, k));
                }
                let mut pairs: Vec<(usize, usize)> = pairs.into_iter().collect();
                pairs.sort_unstable();
                pairs
            }
            SparseTopology::RandomRegular { out_degree } => {
                let mut rng = rng::stream(seed, TARGET_STREAM | 0xff);
                let mut pairs = Vec::new();
                for k in 0..num_clusters {
                    let mut others: Vec<usize> = (0..num_clusters).filter(|&l| l != k).collect();
                    others.shuffle(&mut rng);
                    for &l in others.iter().take(*out_degree) {
                        pairs.push((k, l));
                    }
                }
                pairs
            }
            SparseTopology::Explicit(pairs) => pairs.clone(),
        }
    }
}

/// Full description of a perturbed kernel instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphSpec {
    /// Number of clusters K.
    pub num_clusters: usize,
    /// Nominal cluster size M (minimum size when explicit sizes are given).
    pub cluster_size: usize,
    /// Optional per-cluster sizes in [M, 4M].
    pub cluster_sizes: Option<Vec<usize>>,
    /// Perturbation scale; 0 yields the reducible block-diagonal kernel.
    pub epsilon: f64,
    /// Lower fraction c of the sparse probability range [c·ε, ε].
    pub sparse_lower_frac: f64,
    /// Maximum sparse out-degree per source state.
    pub d_out: usize,
    /// Maximum number of source states per cluster.
    pub n_out: usize,
    /// Inter-cluster wiring.
    pub topology: SparseTopology,
    /// Intra-cluster Erdos-Renyi support density for the p0 generator.
    pub intra_edge_prob: f64,
    /// Coefficient c0 in epsilon_max = c0 / (M (ln M)^4).
    pub epsilon_max_coeff: f64,
    /// Route every sparse edge into cluster l to the designated target state
    /// of that cluster (the inbound-target instance family).
    pub inbound_targets: bool,
    pub seed: u64,
}

impl GraphSpec {
    pub fn new(num_clusters: usize, cluster_size: usize, epsilon: f64, seed: u64) -> Self {
        GraphSpec {
            num_clusters,
            cluster_size,
            cluster_sizes: None,
            epsilon,
            sparse_lower_frac: 0.5,
            d_out: 1,
            n_out: 2,
            topology: SparseTopology::Cycle,
            intra_edge_prob: 0.75,
            epsilon_max_coeff: 1.0,
            inbound_targets: false,
            seed,
        }
    }

    pub fn with_topology(mut self, topology: SparseTopology) -> Self {
        self.topology = topology;
        self
    }

    pub fn with_caps(mut self, d_out: usize, n_out: usize) -> Self {
        self.d_out = d_out;
        self.n_out = n_out;
        self
    }

    /// Theoretical perturbation ceiling c0 / (M (ln M)^4), clamped to 0.2 for
    /// tiny clusters where the log factor degenerates.
    pub fn epsilon_max(&self) -> f64 {
        epsilon_max(self.cluster_size, self.epsilon_max_coeff)
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.cluster_sizes
            .clone()
            .unwrap_or_else(|| vec![self.cluster_size; self.num_clusters])
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_clusters == 0 {
            return Err(Error::InvalidSpec("num_clusters must be positive".into()));
        }
        if self.cluster_size == 0 {
            return Err(Error::InvalidSpec("cluster_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::InvalidSpec(format!(
                "epsilon {} outside [0, 1)",
                self.epsilon
            )));
        }
        if !(self.sparse_lower_frac > 0.0 && self.sparse_lower_frac <= 1.0) {
            return Err(Error::InvalidSpec(format!(
                "sparse_lower_frac {} outside (0, 1]",
                self.sparse_lower_frac
            )));
        }
        if self.d_out == 0 || self.n_out == 0 {
            return Err(Error::InvalidSpec("d_out and n_out must be positive".into()));
        }
        if !(0.0 < self.intra_edge_prob && self.intra_edge_prob <= 1.0) {
            return Err(Error::InvalidSpec("intra_edge_prob outside (0, 1]".into()));
        }
        if let Some(sizes) = &self.cluster_sizes {
            if sizes.len() != self.num_clusters {
                return Err(Error::InvalidSpec(format!(
                    "{} explicit cluster sizes for {} clusters",
                    sizes.len(),
                    self.num_clusters
                )));
            }
            let m = self.cluster_size;
            for (k, &s) in sizes.iter().enumerate() {
                if s < m || s > 4 * m {
                    return Err(Error::InvalidSpec(format!(
                        "cluster {k} size {s} outside [M, 4M] = [{m}, {}]",
                        4 * m
                    )));
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn epsilon_max(cluster_size: usize, coeff: f64) -> f64 {
    let m = cluster_size.max(2) as f64;
    (coeff / (m * m.ln().powi(4))).min(0.2)
}

/// One sparse inter-cluster edge with its planted probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparseEdge {
    pub src: usize,
    pub dst: usize,
    pub prob: f64,
}

/// The planted sparse edges, indexable by source cluster.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SparseEdgeSet {
    pub edges: Vec<SparseEdge>,
    /// Cluster -> indices into `edges` of its outbound sparse edges.
    pub by_cluster: Vec<Vec<usize>>,
}

impl SparseEdgeSet {
    pub fn empty(num_clusters: usize) -> Self {
        SparseEdgeSet {
            edges: Vec::new(),
            by_cluster: vec![Vec::new(); num_clusters],
        }
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.edges.iter().map(|e| (e.src, e.dst)).collect()
    }

    pub fn contains(&self, src: usize, dst: usize) -> bool {
        self.edges.iter().any(|e| e.src == src && e.dst == dst)
    }

    pub fn outbound(&self, cluster: usize) -> impl Iterator<Item = &SparseEdge> {
        self.by_cluster[cluster].iter().map(|&i| &self.edges[i])
    }

    /// Whether some planted edge leads from one cluster to another.
    pub fn connects(&self, kernel: &TransitionKernel, from: usize, to: usize) -> bool {
        self.edges
            .iter()
            .any(|e| kernel.cluster_of(e.src) == from && kernel.cluster_of(e.dst) == to)
    }
}

/// One sparse probability row with cached cumulative sums for inverse-CDF sampling.
#[derive(Debug, Clone)]
pub struct Row {
    pub targets: Vec<u32>,
    pub probs: Vec<f64>,
    cum: Vec<f64>,
}

impl Row {
    fn new(mut entries: Vec<(usize, f64)>) -> Self {
        entries.sort_unstable_by_key(|&(t, _)| t);
        let targets: Vec<u32> = entries.iter().map(|&(t, _)| t as u32).collect();
        let probs: Vec<f64> = entries.iter().map(|&(_, p)| p).collect();
        let mut cum = Vec::with_capacity(probs.len());
        let mut acc = 0.0;
        for &p in &probs {
            acc += p;
            cum.push(acc);
        }
        Row { targets, probs, cum }
    }

    pub fn sum(&self) -> f64 {
        self.probs.iter().sum()
    }

    pub fn prob_to(&self, target: usize) -> f64 {
        match self.targets.binary_search(&(target as u32)) {
            Ok(i) => self.probs[i],
            Err(_) => 0.0,
        }
    }

    /// Inverse-CDF draw over the cached cumulative sums.
    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        let total = *self.cum.last().expect("empty row");
        let u: f64 = rng.random_range(0.0..total);
        let i = self.cum.partition_point(|&c| c <= u).min(self.targets.len() - 1);
        self.targets[i] as usize
    }
}

/// Sparse row-stochastic kernel over a clustered state space.
#[derive(Debug, Clone)]
pub struct TransitionKernel {
    epsilon: f64,
    seed: u64,
    partition: Vec<usize>,
    clusters: Vec<Vec<usize>>,
    rows: Vec<Row>,
    /// Designated inbound target per cluster, for inbound-target instances.
    designated: Option<Vec<usize>>,
}

impl TransitionKernel {
    /// Builds a kernel from explicit rows; rows must be stochastic within 1e-9.
    pub fn from_rows(
        partition: Vec<usize>,
        rows: Vec<Vec<(usize, f64)>>,
        epsilon: f64,
        seed: u64,
    ) -> Result<Self> {
        if partition.len() != rows.len() {
            return Err(Error::InvalidSpec("partition/rows length mismatch".into()));
        }
        let num_clusters = partition.iter().copied().max().map_or(0, |m| m + 1);
        let mut clusters = vec![Vec::new(); num_clusters];
        for (x, &k) in partition.iter().enumerate() {
            clusters[k].push(x);
        }
        let n = rows.len();
        let rows: Vec<Row> = rows.into_iter().map(Row::new).collect();
        for (x, row) in rows.iter().enumerate() {
            let s = row.sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidSpec(format!("row {x} sums to {s}")));
            }
            if row.probs.iter().any(|&p| !(0.0..=1.0 + 1e-12).contains(&p)) {
                return Err(Error::InvalidSpec(format!("row {x} has entry outside [0,1]")));
            }
            if row.targets.iter().any(|&t| t as usize >= n) {
                return Err(Error::InvalidSpec(format!("row {x} targets out of range")));
            }
        }
        Ok(TransitionKernel {
            epsilon,
            seed,
            partition,
            clusters,
            rows,
            designated: None,
        })
    }

    pub fn num_states(&self) -> usize {
        self.rows.len()
    }

    pub fn num_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn cluster_of(&self, state: usize) -> usize {
        self.partition[state]
    }

    pub fn partition(&self) -> &[usize] {
        &self.partition
    }

    pub fn cluster_states(&self, cluster: usize) -> &[usize] {
        &self.clusters[cluster]
    }

    pub fn row(&self, state: usize) -> &Row {
        &self.rows[state]
    }

    pub fn prob(&self, from: usize, to: usize) -> f64 {
        self.rows[from].prob_to(to)
    }

    pub fn designated_targets(&self) -> Option<&[usize]> {
        self.designated.as_deref()
    }

    /// True when the supported transition (x, y) crosses clusters.
    pub fn is_sparse_edge(&self, from: usize, to: usize) -> bool {
        self.prob(from, to) > 0.0 && self.partition[from] != self.partition[to]
    }

    /// Support of the kernel, E.
    pub fn edge_support(&self) -> Vec<(usize, usize)> {
        let mut edges = Vec::new();
        for (x, row) in self.rows.iter().enumerate() {
            for (&t, &p) in row.targets.iter().zip(&row.probs) {
                if p > 0.0 {
                    edges.push((x, t as usize));
                }
            }
        }
        edges
    }

    /// Within-cluster support, E0.
    pub fn dense_support(&self) -> Vec<(usize, usize)> {
        self.edge_support()
            .into_iter()
            .filter(|&(x, y)| self.partition[x] == self.partition[y])
            .collect()
    }

    /// Inter-cluster support, E \ E0.
    pub fn sparse_support(&self) -> Vec<(usize, usize)> {
        self.edge_support()
            .into_iter()
            .filter(|&(x, y)| self.partition[x] != self.partition[y])
            .collect()
    }

    /// Total sparse probability mass leaving `state`.
    pub fn sparse_row_mass(&self, state: usize) -> f64 {
        let row = &self.rows[state];
        let k = self.partition[state];
        row.targets
            .iter()
            .zip(&row.probs)
            .filter(|&(&t, _)| self.partition[t as usize] != k)
            .map(|(_, &p)| p)
            .sum()
    }

    /// Dense matrix of the kernel, guarded at `DENSE_GUARD` states.
    pub fn to_dense(&self) -> Result<nalgebra::DMatrix<f64>> {
        let n = self.num_states();
        if n > DENSE_GUARD {
            return Err(Error::SizeGuard { size: n, guard: DENSE_GUARD });
        }
        let mut m = nalgebra::DMatrix::<f64>::zeros(n, n);
        for (x, row) in self.rows.iter().enumerate() {
            for (&t, &p) in row.targets.iter().zip(&row.probs) {
                m[(x, t as usize)] = p;
            }
        }
        Ok(m)
    }

    /// Unperturbed block p0 restricted to cluster k, indexed by position in
    /// `cluster_states(k)`. Exact: dense entries were scaled uniformly per row
    /// when sparse edges were planted, so renormalizing recovers p0.
    pub fn unperturbed_block(&self, cluster: usize) -> nalgebra::DMatrix<f64> {
        let states = &self.clusters[cluster];
        let index: HashMap<usize, usize> =
            states.iter().enumerate().map(|(i, &x)| (x, i)).collect();
        let m = states.len();
        let mut block = nalgebra::DMatrix::<f64>::zeros(m, m);
        for (i, &x) in states.iter().enumerate() {
            let row = &self.rows[x];
            for (&t, &p) in row.targets.iter().zip(&row.probs) {
                if let Some(&j) = index.get(&(t as usize)) {
                    block[(i, j)] = p;
                }
            }
        }
        for i in 0..m {
            let s: f64 = block.row(i).sum();
            if s > 0.0 {
                for j in 0..m {
                    block[(i, j)] /= s;
                }
            }
        }
        block
    }

    /// Replaces the row entries of `state`, keeping stochasticity.
    pub(crate) fn set_row(&mut self, state: usize, entries: Vec<(usize, f64)>) {
        self.rows[state] = Row::new(entries);
    }

    pub(crate) fn set_designated(&mut self, designated: Vec<usize>) {
        self.designated = Some(designated);
    }
}

// ── construction ─────────────────────────────────────────────────────────────

/// Block-diagonal unperturbed kernel: per cluster, a lazy row-normalized
/// random symmetric weight matrix. Reversible with respect to the degree
/// measure, irreducible and aperiodic by construction.
pub fn build_unperturbed(spec: &GraphSpec) -> Result<TransitionKernel> {
    spec.validate()?;
    let sizes = spec.sizes();
    let total: usize = sizes.iter().sum();

    let mut partition = Vec::with_capacity(total);
    let mut clusters = Vec::with_capacity(spec.num_clusters);
    let mut start = 0usize;
    for (k, &size) in sizes.iter().enumerate() {
        partition.extend(std::iter::repeat(k).take(size));
        clusters.push((start..start + size).collect::<Vec<usize>>());
        start += size;
    }

    let mut rows: Vec<Row> = Vec::with_capacity(total);
    for (k, states) in clusters.iter().enumerate() {
        let block = generate_block(spec, k, states.len())?;
        for local_row in block {
            let entries: Vec<(usize, f64)> = local_row
                .into_iter()
                .enumerate()
                .filter(|&(_, p)| p > 0.0)
                .map(|(j, p)| (states[j], p))
                .collect();
            rows.push(Row::new(entries));
        }
    }

    let mut kernel = TransitionKernel {
        epsilon: 0.0,
        seed: spec.seed,
        partition,
        clusters,
        rows,
        designated: None,
    };
    if spec.inbound_targets {
        let designated = kernel.clusters.iter().map(|c| c[0]).collect();
        kernel.set_designated(designated);
    }
    Ok(kernel)
}

/// Lazy normalized random symmetric-weight block of the given size.
fn generate_block(spec: &GraphSpec, cluster: usize, size: usize) -> Result<Vec<Vec<f64>>> {
    if size == 1 {
        return Ok(vec![vec![1.0]]);
    }
    for attempt in 0..MAX_BLOCK_ATTEMPTS {
        let mut rng = rng::substream(spec.seed, BLOCK_STREAM | cluster as u64, attempt);
        let mut weights = vec![vec![0.0f64; size]; size];
        for i in 0..size {
            for j in (i + 1)..size {
                if rng.random::<f64>() < spec.intra_edge_prob {
                    let w = rng.random_range(1.0..2.0);
                    weights[i][j] = w;
                    weights[j][i] = w;
                }
            }
        }
        if !connected(&weights) {
            continue;
        }
        let mut block = vec![vec![0.0f64; size]; size];
        for i in 0..size {
            let degree: f64 = weights[i].iter().sum();
            for j in 0..size {
                if weights[i][j] > 0.0 {
                    block[i][j] = weights[i][j] / (2.0 * degree);
                }
            }
            block[i][i] += 0.5;
        }
        return Ok(block);
    }
    Err(Error::Structure(format!(
        "cluster {cluster} support disconnected after {MAX_BLOCK_ATTEMPTS} attempts"
    )))
}

fn connected(weights: &[Vec<f64>]) -> bool {
    let n = weights.len();
    let mut seen = vec![false; n];
    let mut stack = vec![0usize];
    seen[0] = true;
    let mut count = 1;
    while let Some(i) = stack.pop() {
        for j in 0..n {
            if weights[i][j] > 0.0 && !seen[j] {
                seen[j] = true;
                count += 1;
                stack.push(j);
            }
        }
    }
    count == n
}

/// Plants the sparse inter-cluster edges onto a block-diagonal kernel.
///
/// Sparse probabilities are drawn as ε·(c + (1-c)·u) with a per-edge stream,
/// so for a fixed seed they scale exactly linearly in ε. Dense entries of an
/// affected row shrink by the factor (1 - sparse row mass).
pub fn plant_sparse_edges(
    p0: &TransitionKernel,
    spec: &GraphSpec,
) -> Result<(TransitionKernel, SparseEdgeSet)> {
    spec.validate()?;
    let k_count = p0.num_clusters();
    if spec.epsilon == 0.0 {
        return Ok((p0.clone(), SparseEdgeSet::empty(k_count)));
    }

    let pairs = spec.topology.cluster_pairs(k_count, spec.seed);
    let mut seen = std::collections::HashSet::new();
    let mut per_cluster: Vec<Vec<usize>> = vec![Vec::new(); k_count];
    for &(a, b) in &pairs {
        if a >= k_count || b >= k_count {
            return Err(Error::Constraint(format!("cluster pair ({a}, {b}) out of range")));
        }
        if a == b {
            return Err(Error::Constraint(format!("self pair ({a}, {a})")));
        }
        if !seen.insert((a, b)) {
            return Err(Error::Constraint(format!(
                "more than one sparse edge between cluster pair ({a}, {b})"
            )));
        }
        per_cluster[a].push(b);
    }
    for (k, outs) in per_cluster.iter().enumerate() {
        if outs.len() > spec.n_out * spec.d_out {
            return Err(Error::Constraint(format!(
                "cluster {k} needs {} sparse edges, exceeding n_out*d_out = {}",
                outs.len(),
                spec.n_out * spec.d_out
            )));
        }
    }

    let mut kernel = p0.clone();
    kernel.epsilon = spec.epsilon;
    let mut edges = SparseEdgeSet::empty(k_count);
    let mut edge_index = 0u64;
    // Sparse additions per source state, accumulated before rescaling.
    let mut additions: HashMap<usize, Vec<(usize, f64)>> = HashMap::new();

    for k in 0..k_count {
        let outs = &per_cluster[k];
        if outs.is_empty() {
            continue;
        }
        let num_sources = outs.len().div_ceil(spec.d_out);
        let states = p0.cluster_states(k);
        if num_sources > states.len() {
            return Err(Error::Constraint(format!(
                "cluster {k} has {} states but needs {num_sources} sparse sources",
                states.len()
            )));
        }
        let mut source_rng = rng::stream(spec.seed, SOURCE_STREAM | k as u64);
        let mut pool: Vec<usize> = states.to_vec();
        pool.shuffle(&mut source_rng);
        let sources = &pool[..num_sources];

        for (j, &target_cluster) in outs.iter().enumerate() {
            let src = sources[j / spec.d_out];
            let dst = if spec.inbound_targets {
                p0.cluster_states(target_cluster)[0]
            } else {
                let mut target_rng = rng::substream(spec.seed, TARGET_STREAM | k as u64, j as u64);
                let t_states = p0.cluster_states(target_cluster);
                t_states[target_rng.random_range(0..t_states.len())]
            };
            let mut prob_rng = rng::substream(spec.seed, PROB_STREAM | k as u64, edge_index);
            let u: f64 = prob_rng.random::<f64>();
            let prob = spec.epsilon * (spec.sparse_lower_frac + (1.0 - spec.sparse_lower_frac) * u);
            additions.entry(src).or_default().push((dst, prob));
            edges.by_cluster[k].push(edges.edges.len());
            edges.edges.push(SparseEdge { src, dst, prob });
            edge_index += 1;
        }
    }

    for (src, adds) in additions {
        let sparse_mass: f64 = adds.iter().map(|&(_, p)| p).sum();
        if sparse_mass >= 1.0 {
            return Err(Error::Constraint(format!(
                "sparse mass {sparse_mass} at state {src} leaves no dense probability"
            )));
        }
        let row = p0.row(src);
        let mut entries: Vec<(usize, f64)> = row
            .targets
            .iter()
            .zip(&row.probs)
            .map(|(&t, &p)| (t as usize, p * (1.0 - sparse_mass)))
            .collect();
        entries.extend(adds);
        kernel.set_row(src, entries);
    }

    Ok((kernel, edges))
}

// ── validation ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CheckStatus {
    Pass,
    Fail,
    NotApplicable,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub status: CheckStatus,
    pub measured: Option<f64>,
    pub detail: String,
}

/// Measured pass/fail record for the dense-cluster / sparse-edge assumptions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub checks: Vec<Check>,
}

impl AssumptionReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.status != CheckStatus::Fail)
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Thresholds for the measured assumption checks. The theory constants are
/// asymptotic, so these are reporting thresholds, not asserted paper values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationThresholds {
    /// Lower bound on M·pi_k(x).
    pub rho_min: f64,
    /// Upper bound on M·pi_k(x).
    pub rho_max: f64,
    /// Lower bound on the pseudo-spectral gap of each stochastic complement.
    pub gamma_min: f64,
    /// Meta-kernel lower bound coefficient: q*(l|k) >= coeff·ε/M on planted pairs.
    pub qstar_coeff: f64,
}

impl Default for ValidationThresholds {
    fn default() -> Self {
        ValidationThresholds {
            rho_min: 0.05,
            rho_max: 20.0,
            gamma_min: 0.05,
            qstar_coeff: 0.02,
        }
    }
}

/// Measures the dense-cluster conditions (stationary mass, pseudo-spectral
/// gap), sparse structural caps, the perturbation regime, and the meta-kernel
/// escape lower bound. Failures are reported, never raised.
pub fn validate_assumptions(
    kernel: &TransitionKernel,
    edges: &SparseEdgeSet,
    spec: &GraphSpec,
    thresholds: &ValidationThresholds,
) -> AssumptionReport {
    let mut checks = Vec::new();
    let k_count = kernel.num_clusters();

    // (a) stationary mass of each cluster complement, scaled by cluster size.
    let mut mass_lo = f64::INFINITY;
    let mut mass_hi: f64 = 0.0;
    let mut mass_err = None;
    for k in 0..k_count {
        let pi_k = if kernel.epsilon() == 0.0 || edges.is_empty() {
            oracle::stationary_of(&kernel.unperturbed_block(k))
        } else {
            match oracle::stochastic_complement(kernel, k) {
                Ok(s) => oracle::stationary_of(&s),
                Err(e) => {
                    mass_err = Some(e.to_string());
                    break;
                }
            }
        };
        let m = kernel.cluster_states(k).len() as f64;
        for &p in pi_k.iter() {
            mass_lo = mass_lo.min(m * p);
            mass_hi = mass_hi.max(m * p);
        }
    }
    checks.push(match mass_err {
        Some(err) => Check {
            name: "stationary-mass".into(),
            status: CheckStatus::Fail,
            measured: None,
            detail: err,
        },
        None => Check {
            name: "stationary-mass".into(),
            status: if mass_lo >= thresholds.rho_min && mass_hi <= thresholds.rho_max {
                CheckStatus::Pass
            } else {
                CheckStatus::Fail
            },
            measured: Some(mass_lo),
            detail: format!(
                "M·pi_k(x) in [{mass_lo:.4}, {mass_hi:.4}], required [{}, {}]",
                thresholds.rho_min, thresholds.rho_max
            ),
        },
    });

    // (b) pseudo-spectral gap of each stochastic complement.
    let mut gap_min = f64::INFINITY;
    let mut gap_err = None;
    for k in 0..k_count {
        let block = if kernel.epsilon() == 0.0 || edges.is_empty() {
            Ok(kernel.unperturbed_block(k))
        } else {
            oracle::stochastic_complement(kernel, k)
        };
        match block.and_then(|b| oracle::pseudo_spectral_gap(&b)) {
            Ok(gap) => gap_min = gap_min.min(gap),
            Err(e) => {
                gap_err = Some(e.to_string());
                break;
            }
        }
    }
    checks.push(match gap_err {
        Some(err) => Check {
            name: "pseudo-spectral-gap".into(),
            status: CheckStatus::Fail,
            measured: None,
            detail: err,
        },
        None => Check {
            name: "pseudo-spectral-gap".into(),
            status: if gap_min >= thresholds.gamma_min {
                CheckStatus::Pass
            } else {
                CheckStatus::Fail
            },
            measured: Some(gap_min),
            detail: format!("min gamma-dagger {gap_min:.4}, required {}", thresholds.gamma_min),
        },
    });

    // (c) sparse structural caps.
    checks.push(structural_check(kernel, edges, spec));
    checks.push(sparse_prob_check(edges, spec));
    checks.push(epsilon_regime_check(spec));

    // (d) meta-kernel escape lower bound on planted pairs.
    if edges.is_empty() {
        checks.push(Check {
            name: "meta-escape-bound".into(),
            status: CheckStatus::NotApplicable,
            measured: None,
            detail: "no sparse edges".into(),
        });
    } else {
        let m = kernel.cluster_states(0).len() as f64;
        let bound = thresholds.qstar_coeff * spec.epsilon / m;
        match oracle::meta_kernel_qstar(kernel) {
            Ok(meta) => {
                let mut min_q = f64::INFINITY;
                let mut worst = (0, 0);
                for e in &edges.edges {
                    let (k, l) = (kernel.cluster_of(e.src), kernel.cluster_of(e.dst));
                    let q = meta.rows[(k, l)];
                    if q < min_q {
                        min_q = q;
                        worst = (k, l);
                    }
                }
                checks.push(Check {
                    name: "meta-escape-bound".into(),
                    status: if min_q >= bound { CheckStatus::Pass } else { CheckStatus::Fail },
                    measured: Some(min_q),
                    detail: format!(
                        "min q*(l|k) over planted pairs = {min_q:.4e} at {worst:?}, required {bound:.4e}"
                    ),
                });
            }
            Err(e) => checks.push(Check {
                name: "meta-escape-bound".into(),
                status: CheckStatus::Fail,
                measured: None,
                detail: e.to_string(),
            }),
        }
    }

    AssumptionReport { checks }
}

fn structural_check(
    kernel: &TransitionKernel,
    edges: &SparseEdgeSet,
    spec: &GraphSpec,
) -> Check {
    let k_count = kernel.num_clusters();
    let mut failures = Vec::new();

    let mut pair_counts: HashMap<(usize, usize), usize> = HashMap::new();
    let mut per_source: HashMap<usize, usize> = HashMap::new();
    let mut sources_per_cluster: Vec<std::collections::HashSet<usize>> =
        vec![Default::default(); k_count];
    for e in &edges.edges {
        let (k, l) = (kernel.cluster_of(e.src), kernel.cluster_of(e.dst));
        if k == l {
            failures.push(format!("edge ({}, {}) does not cross clusters", e.src, e.dst));
        }
        *pair_counts.entry((k, l)).or_default() += 1;
        *per_source.entry(e.src).or_default() += 1;
        sources_per_cluster[k].insert(e.src);
    }
    for (&(k, l), &n) in &pair_counts {
        if n > 1 {
            failures.push(format!("{n} sparse edges between cluster pair ({k}, {l})"));
        }
    }
    for (&src, &n) in &per_source {
        if n > spec.d_out {
            failures.push(format!("source {src} has {n} sparse edges > d_out {}", spec.d_out));
        }
    }
    for (k, sources) in sources_per_cluster.iter().enumerate() {
        if sources.len() > spec.n_out {
            failures.push(format!(
                "cluster {k} has {} sources > n_out {}",
                sources.len(),
                spec.n_out
            ));
        }
        if spec.epsilon > 0.0 && k_count > 1 && sources.is_empty() {
            failures.push(format!("cluster {k} has no outbound sparse edge"));
        }
    }

    if spec.epsilon == 0.0 {
        Check {
            name: "sparse-structure".into(),
            status: CheckStatus::NotApplicable,
            measured: None,
            detail: "unperturbed kernel".into(),
        }
    } else {
        Check {
            name: "sparse-structure".into(),
            status: if failures.is_empty() { CheckStatus::Pass } else { CheckStatus::Fail },
            measured: Some(edges.len() as f64),
            detail: if failures.is_empty() {
                format!("{} sparse edges within caps", edges.len())
            } else {
                failures.join("; ")
            },
        }
    }
}

fn sparse_prob_check(edges: &SparseEdgeSet, spec: &GraphSpec) -> Check {
    if edges.is_empty() {
        return Check {
            name: "sparse-prob-range".into(),
            status: CheckStatus::NotApplicable,
            measured: None,
            detail: "no sparse edges".into(),
        };
    }
    let lo = spec.sparse_lower_frac * spec.epsilon * (1.0 - 1e-9);
    let hi = spec.epsilon * (1.0 + 1e-9);
    let bad: Vec<String> = edges
        .edges
        .iter()
        .filter(|e| e.prob < lo || e.prob > hi)
        .map(|e| format!("({}, {}) p={:.3e}", e.src, e.dst, e.prob))
        .collect();
    let min_p = edges.edges.iter().map(|e| e.prob).fold(f64::INFINITY, f64::min);
    Check {
        name: "sparse-prob-range".into(),
        status: if bad.is_empty() { CheckStatus::Pass } else { CheckStatus::Fail },
        measured: Some(min_p),
        detail: if bad.is_empty() {
            format!("all probabilities in [{lo:.3e}, {hi:.3e}]")
        } else {
            bad.join("; ")
        },
    }
}

fn epsilon_regime_check(spec: &GraphSpec) -> Check {
    let cap = spec.epsilon_max();
    Check {
        name: "epsilon-regime".into(),
        status: if spec.epsilon <= cap { CheckStatus::Pass } else { CheckStatus::Fail },
        measured: Some(spec.epsilon),
        detail: format!("epsilon {} vs ceiling {cap:.4e}", spec.epsilon),
    }
}

// ── task sampling ────────────────────────────────────────────────────────────

/// How reasoning tasks are drawn: pairs at meta-graph distance at least
/// ceil(min_frac·K), uniform states inside the chosen clusters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TaskPolicy {
    pub min_frac: f64,
    pub seed: u64,
}

impl TaskPolicy {
    pub fn new(seed: u64) -> Self {
        TaskPolicy { min_frac: 0.5, seed }
    }
}

/// BFS distances from every cluster over the sparse meta-graph.
pub fn meta_distances(num_clusters: usize, edges: &SparseEdgeSet, kernel: &TransitionKernel) -> Vec<Vec<Option<usize>>> {
    let mut adj = vec![Vec::new(); num_clusters];
    for e in &edges.edges {
        let (k, l) = (kernel.cluster_of(e.src), kernel.cluster_of(e.dst));
        if !adj[k].contains(&l) {
            adj[k].push(l);
        }
    }
    (0..num_clusters)
        .map(|start| {
            let mut dist = vec![None; num_clusters];
            dist[start] = Some(0);
            let mut queue = std::collections::VecDeque::from([start]);
            while let Some(k) = queue.pop_front() {
                for &l in &adj[k] {
                    if dist[l].is_none() {
                        dist[l] = Some(dist[k].unwrap() + 1);
                        queue.push_back(l);
                    }
                }
            }
            dist
        })
        .collect()
}

/// Draws a task pair whose minimal sparse-edge count is at least
/// ceil(min_frac·K), measured as BFS distance on the meta-graph.
pub fn sample_task(
    kernel: &TransitionKernel,
    edges: &SparseEdgeSet,
    policy: &TaskPolicy,
) -> Result<(usize, usize)> {
    let k_count = kernel.num_clusters();
    let required = (policy.min_frac * k_count as f64).ceil() as usize;
    let dist = meta_distances(k_count, edges, kernel);
    let mut eligible = Vec::new();
    for k in 0..k_count {
        for l in 0..k_count {
            if k != l {
                if let Some(d) = dist[k][l] {
                    if d >= required {
                        eligible.push((k, l));
                    }
                }
            }
        }
    }
    if eligible.is_empty() {
        return Err(Error::Infeasible(format!(
            "no cluster pair at meta-distance >= {required}; topology too well connected"
        )));
    }
    let mut rng = rng::stream(policy.seed, TASK_STREAM);
    let (k, l) = eligible[rng.random_range(0..eligible.len())];
    let from = kernel.cluster_states(k);
    let to = kernel.cluster_states(l);
    let x_in = from[rng.random_range(0..from.len())];
    let x_out = to[rng.random_range(0..to.len())];
    Ok((x_in, x_out))
}

// ── serialization ────────────────────────────────────────────────────────────

/// Line-oriented text format: header `K M epsilon seed`, then one line per
/// nonzero entry `src dst prob cluster_src cluster_dst is_sparse`.
/// Probabilities carry 17 significant digits for a bit-faithful round trip.
pub fn kernel_to_string(kernel: &TransitionKernel) -> String {
    let max_size = (0..kernel.num_clusters())
        .map(|k| kernel.cluster_states(k).len())
        .max()
        .unwrap_or(0);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{} {} {:.16e} {}",
        kernel.num_clusters(),
        max_size,
        kernel.epsilon(),
        kernel.seed()
    );
    for x in 0..kernel.num_states() {
        let row = kernel.row(x);
        for (&t, &p) in row.targets.iter().zip(&row.probs) {
            if p > 0.0 {
                let y = t as usize;
                let _ = writeln!(
                    out,
                    "{} {} {:.16e} {} {} {}",
                    x,
                    y,
                    p,
                    kernel.cluster_of(x),
                    kernel.cluster_of(y),
                    u8::from(kernel.is_sparse_edge(x, y))
                );
            }
        }
    }
    out
}

/// Parses the text format back into a kernel and its sparse edge set.
pub fn kernel_from_str(text: &str) -> Result<(TransitionKernel, SparseEdgeSet)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Parse("empty kernel file".into()))?;
    let head: Vec<&str> = header.split_whitespace().collect();
    if head.len() != 4 {
        return Err(Error::Parse(format!("bad header: {header}")));
    }
    let num_clusters: usize = head[0].parse().map_err(|_| Error::Parse("bad K".into()))?;
    let epsilon: f64 = head[2].parse().map_err(|_| Error::Parse("bad epsilon".into()))?;
    let seed: u64 = head[3].parse().map_err(|_| Error::Parse("bad seed".into()))?;

    let mut entries: Vec<(usize, usize, f64, usize, usize, bool)> = Vec::new();
    let mut max_state = 0usize;
    for line in lines {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(Error::Parse(format!("bad entry line: {line}")));
        }
        let src: usize = f[0].parse().map_err(|_| Error::Parse("bad src".into()))?;
        let dst: usize = f[1].parse().map_err(|_| Error::Parse("bad dst".into()))?;
        let prob: f64 = f[2].parse().map_err(|_| Error::Parse("bad prob".into()))?;
        let ck: usize = f[3].parse().map_err(|_| Error::Parse("bad cluster".into()))?;
        let cl: usize = f[4].parse().map_err(|_| Error::Parse("bad cluster".into()))?;
        let sparse = f[5] == "1";
        max_state = max_state.max(src).max(dst);
        entries.push((src, dst, prob, ck, cl, sparse));
    }
    let n = max_state + 1;
    let mut partition = vec![usize::MAX; n];
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    let mut edges = SparseEdgeSet::empty(num_clusters);
    for (src, dst, prob, ck, cl, sparse) in entries {
        if ck >= num_clusters || cl >= num_clusters {
            return Err(Error::Parse(format!("cluster label out of range on ({src}, {dst})")));
        }
        partition[src] = ck;
        partition[dst] = cl;
        rows[src].push((dst, prob));
        if sparse {
            edges.by_cluster[ck].push(edges.edges.len());
            edges.edges.push(SparseEdge { src, dst, prob });
        }
    }
    if partition.iter().any(|&k| k == usize::MAX) {
        return Err(Error::Parse("some states have no entries".into()));
    }
    let kernel = TransitionKernel::from_rows(partition, rows, epsilon, seed)?;
    Ok((kernel, edges))
}
