//! Group-action logic task over reasoning paths.
//!
//! Every edge carries a group element drawn i.i.d. uniformly, masked to the
//! identity outside the sparse edge set, so the logical value of a path is
//! the ordered product of the actions on its sparse crossings. A balanced
//! classifier maps the final value to ±1; concepts from kernels with
//! disjoint sparse structure are exactly orthogonal under this law. The
//! cyclic-shift pushforward family and the greedy codebook provide large
//! pairwise-separated kernel sets witnessing that orthogonality.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};

use crate::dynamics::{self, Path};
use crate::kernel::{SparseEdge, SparseEdgeSet, TransitionKernel};
use crate::{rng, Error, Result};

const ACTION_STREAM: u64 = 7 << 32;
const PATH_STREAM: u64 = 8 << 32;

/// Finite group given by composition and inverse tables; element 0 is the
/// identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteGroup {
    pub name: String,
    size: usize,
    compose: Vec<u16>,
    inverse: Vec<u16>,
}

impl FiniteGroup {
    /// Cyclic group Z_q under addition.
    pub fn cyclic(q: usize) -> Self {
        let compose = (0..q)
            .flat_map(|a| (0..q).map(move |b| ((a + b) % q) as u16))
            .collect();
        let inverse = (0..q).map(|a| ((q - a) % q) as u16).collect();
        FiniteGroup { name: format!("Z{q}"), size: q, compose, inverse }
    }

    /// Symmetric group S_n (n <= 4), elements in lexicographic order so the
    /// identity permutation sits at index 0.
    pub fn symmetric(n: usize) -> Result<Self> {
        if n == 0 || n > 4 {
            return Err(Error::InvalidSpec(format!("S_{n} not supported")));
        }
        let perms = permutations(n);
        let index: HashMap<Vec<u8>, u16> = perms
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i as u16))
            .collect();
        let size = perms.len();
        let mut compose = vec![0u16; size * size];
        let mut inverse = vec![0u16; size];
        for (a, pa) in perms.iter().enumerate() {
            for (b, pb) in perms.iter().enumerate() {
                // (a ∘ b)(i) = a(b(i))
                let composed: Vec<u8> = (0..n).map(|i| pa[pb[i] as usize]).collect();
                compose[a * size + b] = index[&composed];
            }
            let mut inv = vec![0u8; n];
            for (i, &v) in pa.iter().enumerate() {
                inv[v as usize] = i as u8;
            }
            inverse[a] = index[&inv];
        }
        Ok(FiniteGroup { name: format!("S{n}"), size, compose, inverse })
    }

    pub fn from_preset(name: &str) -> Result<Self> {
        if let Some(q) = name.strip_prefix('Z').or_else(|| name.strip_prefix('z')) {
            let q: usize = q.parse().map_err(|_| Error::Parse(format!("bad group {name}")))?;
            if q == 0 {
                return Err(Error::InvalidSpec("Z0 is not a group".into()));
            }
            return Ok(FiniteGroup::cyclic(q));
        }
        if let Some(n) = name.strip_prefix('S').or_else(|| name.strip_prefix('s')) {
            let n: usize = n.parse().map_err(|_| Error::Parse(format!("bad group {name}")))?;
            return FiniteGroup::symmetric(n);
        }
        Err(Error::Parse(format!("unknown group preset {name}")))
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn identity(&self) -> u16 {
        0
    }

    pub fn op(&self, a: u16, b: u16) -> u16 {
        self.compose[a as usize * self.size + b as usize]
    }

    pub fn inv(&self, a: u16) -> u16 {
        self.inverse[a as usize]
    }

    /// Exhaustive group-axiom check: identity, inverses, associativity.
    pub fn check_axioms(&self) -> Result<()> {
        let e = self.identity();
        for a in 0..self.size as u16 {
            if self.op(e, a) != a || self.op(a, e) != a {
                return Err(Error::Validation(format!("identity fails at {a}")));
            }
            if self.op(self.inv(a), a) != e || self.op(a, self.inv(a)) != e {
                return Err(Error::Validation(format!("inverse fails at {a}")));
            }
        }
        if self.size <= 24 {
            for a in 0..self.size as u16 {
                for b in 0..self.size as u16 {
                    for c in 0..self.size as u16 {
                        if self.op(self.op(a, b), c) != self.op(a, self.op(b, c)) {
                            return Err(Error::Validation(format!(
                                "associativity fails at ({a},{b},{c})"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn permutations(n: usize) -> Vec<Vec<u8>> {
    let mut items: Vec<u8> = (0..n as u8).collect();
    let mut out = Vec::new();
    heap_permute(&mut items, n, &mut out);
    out.sort();
    out
}

fn heap_permute(items: &mut Vec<u8>, k: usize, out: &mut Vec<Vec<u8>>) {
    if k == 1 {
        out.push(items.clone());
        return;
    }
    for i in 0..k {
        heap_permute(items, k - 1, out);
        if k % 2 == 0 {
            items.swap(i, k - 1);
        } else {
            items.swap(0, k - 1);
        }
    }
}

/// Balanced ±1 classifier on the group: +1 on the lower half of element
/// indices. With the left-regular action this is zero-mean for every base
/// point because g -> g·r permutes the group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Classifier {
    HalfSplit,
}

impl Classifier {
    pub fn value(&self, group: &FiniteGroup, element: u16) -> i8 {
        match self {
            Classifier::HalfSplit => {
                if (element as usize) < group.size() / 2 {
                    1
                } else {
                    -1
                }
            }
        }
    }
}

/// One i.i.d.-uniform assignment of group elements to all edges, addressed
/// lazily by a seed; explicit overrides support perturbation experiments.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ActionDraw {
    pub seed: u64,
    pub overrides: HashMap<(usize, usize), u16>,
}

impl ActionDraw {
    pub fn new(seed: u64) -> Self {
        ActionDraw { seed, overrides: HashMap::new() }
    }

    /// The unmasked table value on an edge.
    pub fn raw(&self, group: &FiniteGroup, src: usize, dst: usize) -> u16 {
        if let Some(&v) = self.overrides.get(&(src, dst)) {
            return v;
        }
        let mut r = rng::substream(self.seed, ACTION_STREAM | src as u64, dst as u64);
        r.random_range(0..group.size()) as u16
    }

    pub fn set(&mut self, src: usize, dst: usize, value: u16) {
        self.overrides.insert((src, dst), value);
    }
}

/// Logic-task instance: actions masked to the sparse edges, identity
/// embedding into the group itself, balanced classifier.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogicInstance {
    pub group: FiniteGroup,
    /// Sparse edge set E_s the actions are masked to.
    pub mask: HashSet<(usize, usize)>,
    pub actions: ActionDraw,
    pub classifier: Classifier,
    /// Embedding value psi(x) per state (identity by default).
    pub psi: Vec<u16>,
}

impl LogicInstance {
    pub fn new(
        group: FiniteGroup,
        edges: &SparseEdgeSet,
        num_states: usize,
        action_seed: u64,
    ) -> Result<Self> {
        if group.size() % 2 != 0 {
            return Err(Error::InvalidSpec(
                "balanced classifier needs a group of even order".into(),
            ));
        }
        Ok(LogicInstance {
            group,
            mask: edges.pairs().into_iter().collect(),
            actions: ActionDraw::new(action_seed),
            classifier: Classifier::HalfSplit,
            psi: vec![0; num_states],
        })
    }

    /// The masked action alpha(e): identity off the sparse edge set.
    pub fn action(&self, src: usize, dst: usize) -> u16 {
        if self.mask.contains(&(src, dst)) {
            self.actions.raw(&self.group, src, dst)
        } else {
            self.group.identity()
        }
    }

    /// Zero-mean check of the classifier over the whole group orbit of every
    /// base point: sum_g phi(g·r) must vanish exactly.
    pub fn verify_zero_mean(&self) -> Result<()> {
        for r in 0..self.group.size() as u16 {
            let mut total: i64 = 0;
            for g in 0..self.group.size() as u16 {
                total += i64::from(self.classifier.value(&self.group, self.group.op(g, r)));
            }
            if total != 0 {
                return Err(Error::Validation(format!("classifier mean {total} at base {r}")));
            }
        }
        Ok(())
    }
}

/// Folds the actions along a path: r_0 = psi(X_0), r_t = alpha(e_t)·r_{t-1}.
/// Returns the final logic value and its ±1 label.
pub fn path_logic(
    instance: &LogicInstance,
    kernel: &TransitionKernel,
    path: &Path,
) -> Result<(u16, i8)> {
    let mut r = *instance
        .psi
        .get(path.states[0])
        .ok_or_else(|| Error::Validation("path start outside the state space".into()))?;
    for t in 0..path.len() {
        let (x, y) = (path.states[t], path.states[t + 1]);
        if kernel.prob(x, y) == 0.0 {
            return Err(Error::Validation(format!("edge ({x}, {y}) not in the kernel support")));
        }
        r = instance.group.op(instance.action(x, y), r);
    }
    Ok((r, instance.classifier.value(&instance.group, r)))
}

/// Deletes loops so the path visits each state at most once.
pub fn simplify_path(kernel: &TransitionKernel, path: &Path) -> Path {
    let mut states: Vec<usize> = Vec::with_capacity(path.states.len());
    let mut seen: HashMap<usize, usize> = HashMap::new();
    for &s in &path.states {
        if let Some(&pos) = seen.get(&s) {
            for removed in states.drain(pos + 1..) {
                seen.remove(&removed);
            }
        } else {
            seen.insert(s, states.len());
            states.push(s);
        }
    }
    let sparse_crossings = (0..states.len().saturating_sub(1))
        .filter(|&t| kernel.cluster_of(states[t]) != kernel.cluster_of(states[t + 1]))
        .collect();
    Path { states, sparse_crossings, truncated: path.truncated }
}

/// How the base model produces the task path.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PathPolicy {
    pub horizon: usize,
    pub seed: u64,
}

/// Generates the (simplified) path for a task, deterministic per task.
pub fn task_path(
    kernel: &TransitionKernel,
    x_in: usize,
    x_out: usize,
    policy: &PathPolicy,
) -> Result<Path> {
    let mut r = rng::substream(policy.seed, PATH_STREAM | x_in as u64, x_out as u64);
    let path = dynamics::generate_valid_path(kernel, x_in, x_out, policy.horizon, &mut r);
    if path.truncated {
        return Err(Error::Infeasible(format!(
            "path generation from {x_in} to {x_out} hit the horizon"
        )));
    }
    Ok(simplify_path(kernel, &path))
}

/// Evaluates the concept h_p on a task by generating the path and folding the
/// logical actions along it.
pub fn concept_eval(
    instance: &LogicInstance,
    kernel: &TransitionKernel,
    x_in: usize,
    x_out: usize,
    policy: &PathPolicy,
) -> Result<i8> {
    let path = task_path(kernel, x_in, x_out, policy)?;
    Ok(path_logic(instance, kernel, &path)?.1)
}

/// Full-search evaluation: with the sparse set known, composes the actions of
/// the path's sparse crossings directly instead of folding every step.
pub fn concept_eval_full_search(
    instance: &LogicInstance,
    kernel: &TransitionKernel,
    x_in: usize,
    x_out: usize,
    policy: &PathPolicy,
) -> Result<i8> {
    let path = task_path(kernel, x_in, x_out, policy)?;
    let mut r = instance.psi[path.states[0]];
    for &t in &path.sparse_crossings {
        let (x, y) = (path.states[t], path.states[t + 1]);
        r = instance.group.op(instance.action(x, y), r);
    }
    Ok(instance.classifier.value(&instance.group, r))
}

/// Monte-Carlo estimate of the concept inner product <h_p1, h_p2> over tasks
/// and action tables. Paths are fixed per task; each draw shares one action
/// table across both concepts.
#[allow(clippy::too_many_arguments)]
pub fn inner_product(
    instance1: &LogicInstance,
    kernel1: &TransitionKernel,
    instance2: &LogicInstance,
    kernel2: &TransitionKernel,
    tasks: &[(usize, usize)],
    action_draws: usize,
    policy: &PathPolicy,
    action_seed: u64,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (task_id, &(x_in, x_out)) in tasks.iter().enumerate() {
        let path1 = task_path(kernel1, x_in, x_out, policy)?;
        let path2 = task_path(kernel2, x_in, x_out, policy)?;
        for draw in 0..action_draws {
            let shared = ActionDraw::new(
                action_seed ^ (task_id as u64) << 32 ^ draw as u64,
            );
            let h1 = masked_value(instance1, &path1, &shared);
            let h2 = masked_value(instance2, &path2, &shared);
            total += f64::from(h1) * f64::from(h2);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Exact inner product over all action tables on the influential edges,
/// guarded at |G|^edges <= 2^20; averaged over the given tasks.
pub fn inner_product_exhaustive(
    instance1: &LogicInstance,
    kernel1: &TransitionKernel,
    instance2: &LogicInstance,
    kernel2: &TransitionKernel,
    tasks: &[(usize, usize)],
    policy: &PathPolicy,
) -> Result<f64> {
    let g = instance1.group.size();
    let mut total = 0.0;
    for &(x_in, x_out) in tasks {
        let path1 = task_path(kernel1, x_in, x_out, policy)?;
        let path2 = task_path(kernel2, x_in, x_out, policy)?;
        let mut edges: Vec<(usize, usize)> = Vec::new();
        for (path, instance) in [(&path1, instance1), (&path2, instance2)] {
            for &t in &path.sparse_crossings {
                let e = (path.states[t], path.states[t + 1]);
                if instance.mask.contains(&e) && !edges.contains(&e) {
                    edges.push(e);
                }
            }
        }
        let combos = (g as f64).powi(edges.len() as i32);
        if combos > (1 << 20) as f64 {
            return Err(Error::SizeGuard { size: combos as usize, guard: 1 << 20 });
        }
        let mut assignment = vec![0u16; edges.len()];
        let mut task_total = 0.0;
        loop {
            let mut table = ActionDraw::new(0);
            for (e, &v) in edges.iter().zip(&assignment) {
                table.set(e.0, e.1, v);
            }
            let h1 = masked_value(instance1, &path1, &table);
            let h2 = masked_value(instance2, &path2, &table);
            task_total += f64::from(h1) * f64::from(h2);
            // Odometer over Z_g^edges.
            let mut pos = 0;
            loop {
                if pos == assignment.len() {
                    break;
                }
                assignment[pos] += 1;
                if (assignment[pos] as usize) < g {
                    break;
                }
                assignment[pos] = 0;
                pos += 1;
            }
            if pos == assignment.len() {
                break;
            }
        }
        total += task_total / combos;
    }
    Ok(total / tasks.len() as f64)
}

fn masked_value(instance: &LogicInstance, path: &Path, table: &ActionDraw) -> i8 {
    let mut r = instance.psi[path.states[0]];
    for &t in &path.sparse_crossings {
        let e = (path.states[t], path.states[t + 1]);
        if instance.mask.contains(&e) {
            r = instance.group.op(table.raw(&instance.group, e.0, e.1), r);
        }
    }
    instance.classifier.value(&instance.group, r)
}

/// Applies the within-cluster cyclic shift induced by v in Z_q^K and returns
/// the pushforward kernel with its permuted sparse edges. In every cluster
/// the sparse sources occupy the first block positions; the first q·n_k
/// positions shift by v_k·n_k, the rest stay fixed.
pub fn pushforward_family(
    kernel: &TransitionKernel,
    edges: &SparseEdgeSet,
    shift: &[u32],
    q: usize,
) -> Result<(TransitionKernel, SparseEdgeSet)> {
    let k_count = kernel.num_clusters();
    if shift.len() != k_count {
        return Err(Error::Validation(format!(
            "shift vector has {} entries for {k_count} clusters",
            shift.len()
        )));
    }
    if shift.iter().any(|&v| v as usize >= q) {
        return Err(Error::Validation("shift entry outside Z_q".into()));
    }

    let mut perm: Vec<usize> = (0..kernel.num_states()).collect();
    for k in 0..k_count {
        let mut sources: Vec<usize> = edges
            .outbound(k)
            .map(|e| e.src)
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        sources.sort_unstable();
        let n_k = sources.len().max(1);
        let states = kernel.cluster_states(k);
        if q * n_k > states.len() {
            return Err(Error::Validation(format!(
                "q = {q} too large: cluster {k} has {} states for {n_k} sources",
                states.len()
            )));
        }
        // Order: sources first, then the remaining states.
        let mut ordered = sources.clone();
        for &s in states {
            if !sources.contains(&s) {
                ordered.push(s);
            }
        }
        let window = q * n_k;
        for (i, &s) in ordered.iter().enumerate().take(window) {
            let target = (i + shift[k] as usize * n_k) % window;
            perm[s] = ordered[target];
        }
    }

    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); kernel.num_states()];
    for x in 0..kernel.num_states() {
        let row = kernel.row(x);
        rows[perm[x]] = row
            .targets
            .iter()
            .zip(&row.probs)
            .map(|(&t, &p)| (perm[t as usize], p))
            .collect();
    }
    let pushed = TransitionKernel::from_rows(
        kernel.partition().to_vec(),
        rows,
        kernel.epsilon(),
        kernel.seed(),
    )?;

    let mut new_edges = SparseEdgeSet::empty(k_count);
    for e in &edges.edges {
        let k = kernel.cluster_of(e.src);
        new_edges.by_cluster[k].push(new_edges.edges.len());
        new_edges.edges.push(SparseEdge {
            src: perm[e.src],
            dst: perm[e.dst],
            prob: e.prob,
        });
    }
    Ok((pushed, new_edges))
}

/// Greedy codebook in Z_q^K with pairwise Hamming distance at least `d`:
/// candidates are visited in seeded random order and kept when far enough
/// from everything already accepted.
pub fn greedy_codebook(
    k: usize,
    q: usize,
    min_distance: usize,
    max_candidates: usize,
    seed: u64,
) -> Vec<Vec<u32>> {
    use rand::seq::SliceRandom;
    let mut rng = rng::stream(seed, 0);
    let total = (q as f64).powi(k as i32);
    let candidates: Vec<Vec<u32>> = if total <= (1 << 20) as f64 {
        let mut all: Vec<Vec<u32>> = Vec::with_capacity(total as usize);
        let mut v = vec![0u32; k];
        loop {
            all.push(v.clone());
            let mut pos = 0;
            loop {
                if pos == k {
                    break;
                }
                v[pos] += 1;
                if (v[pos] as usize) < q {
                    break;
                }
                v[pos] = 0;
                pos += 1;
            }
            if pos == k {
                break;
            }
        }
        all.shuffle(&mut rng);
        all
    } else {
        (0..max_candidates)
            .map(|_| (0..k).map(|_| rng.random_range(0..q) as u32).collect())
            .collect()
    };

    let mut accepted: Vec<Vec<u32>> = Vec::new();
    for c in candidates {
        if accepted.iter().all(|a| hamming(a, &c) >= min_distance) {
            accepted.push(c);
        }
    }
    accepted
}

pub fn hamming(a: &[u32], b: &[u32]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

/// Logic-instance descriptor for serialization: group preset, seed, where the
/// mask came from, classifier preset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogicInstanceSpec {
    pub group: String,
    pub seed: u64,
    pub mask_source: String,
    pub classifier: String,
}
