//! Exact dynamical quantities at desk scale.
//!
//! Everything here is dense linear algebra guarded at `DENSE_GUARD` states:
//! stationary decompositions, expected hitting times, escape probabilities,
//! stochastic complements, pseudo-spectral gaps, and the two meta-chains
//! (the canonical cluster chain q* and the representative chain q-circle).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

use crate::kernel::TransitionKernel;
use crate::{Error, Result, DENSE_GUARD};

/// K x K row-stochastic chain over clusters or representatives.
#[derive(Debug, Clone)]
pub struct MetaKernel {
    /// Cluster indices (q*) or representative states (q-circle).
    pub labels: Vec<usize>,
    pub rows: DMatrix<f64>,
}

impl MetaKernel {
    /// Validates row sums within 1e-10 and clamps negatives above -1e-12.
    pub fn new(labels: Vec<usize>, mut rows: DMatrix<f64>) -> Result<Self> {
        let k = labels.len();
        if rows.nrows() != k || rows.ncols() != k {
            return Err(Error::Validation("meta kernel shape mismatch".into()));
        }
        for i in 0..k {
            for j in 0..k {
                let v = rows[(i, j)];
                if v < -1e-12 {
                    return Err(Error::Numerical(format!(
                        "meta kernel entry ({i},{j}) = {v:.3e} below zero"
                    )));
                }
                if v < 0.0 {
                    rows[(i, j)] = 0.0;
                }
            }
            let s: f64 = rows.row(i).sum();
            if (s - 1.0).abs() > 1e-10 {
                return Err(Error::Numerical(format!("meta kernel row {i} sums to {s}")));
            }
        }
        Ok(MetaKernel { labels, rows })
    }

    pub fn dim(&self) -> usize {
        self.labels.len()
    }

    /// View as a plain kernel (each label its own cluster) for simulation and
    /// escape-probability computations on the meta-chain itself.
    pub fn to_kernel(&self, epsilon: f64) -> TransitionKernel {
        let k = self.dim();
        let rows = (0..k)
            .map(|i| {
                (0..k)
                    .filter(|&j| self.rows[(i, j)] > 0.0)
                    .map(|j| (j, self.rows[(i, j)]))
                    .collect()
            })
            .collect();
        TransitionKernel::from_rows((0..k).collect(), rows, epsilon, 0).expect("stochastic by construction")
    }
}

/// Stationary measure split into cluster conditionals and coupling factors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StationaryDecomposition {
    /// pi over the full state space.
    pub global: Vec<f64>,
    /// Stationary distribution of each stochastic complement, cluster-local indexing.
    pub per_cluster: Vec<Vec<f64>>,
    /// xi_k = pi(C_k).
    pub coupling: Vec<f64>,
}

fn guard(kernel: &TransitionKernel) -> Result<()> {
    let n = kernel.num_states();
    if n > DENSE_GUARD {
        return Err(Error::SizeGuard { size: n, guard: DENSE_GUARD });
    }
    Ok(())
}

/// Stationary distribution of a small stochastic matrix by LU on the
/// transposed balance system with one equation replaced by normalization,
/// plus one step of iterative refinement.
pub fn stationary_of(p: &DMatrix<f64>) -> DVector<f64> {
    let n = p.nrows();
    if n == 1 {
        return DVector::from_element(1, 1.0);
    }
    let mut a = p.transpose() - DMatrix::<f64>::identity(n, n);
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut b = DVector::<f64>::zeros(n);
    b[n - 1] = 1.0;
    let lu = a.clone().lu();
    let mut pi = lu.solve(&b).unwrap_or_else(|| DVector::from_element(n, 1.0 / n as f64));
    let residual = &b - &a * &pi;
    if let Some(correction) = lu.solve(&residual) {
        pi += correction;
    }
    for v in pi.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let s = pi.sum();
    pi / s
}

/// Stationary distribution of the unperturbed block of cluster k (mu_k).
pub fn block_stationary(kernel: &TransitionKernel, cluster: usize) -> DVector<f64> {
    stationary_of(&kernel.unperturbed_block(cluster))
}

fn strongly_connected(kernel: &TransitionKernel) -> bool {
    let n = kernel.num_states();
    let mut fwd = vec![Vec::new(); n];
    let mut bwd = vec![Vec::new(); n];
    for (x, y) in kernel.edge_support() {
        fwd[x].push(y);
        bwd[y].push(x);
    }
    let reach = |adj: &Vec<Vec<usize>>| {
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut count = 1;
        while let Some(x) = stack.pop() {
            for &y in &adj[x] {
                if !seen[y] {
                    seen[y] = true;
                    count += 1;
                    stack.push(y);
                }
            }
        }
        count == n
    };
    reach(&fwd) && reach(&bwd)
}

/// Full stationary decomposition. For the reducible unperturbed kernel the
/// coupling factors are not unique; cluster-size weights are used.
pub fn stationary(kernel: &TransitionKernel) -> Result<StationaryDecomposition> {
    guard(kernel)?;
    let n = kernel.num_states();
    let k_count = kernel.num_clusters();

    if kernel.sparse_support().is_empty() {
        let mut global = vec![0.0; n];
        let mut per_cluster = Vec::with_capacity(k_count);
        let mut coupling = Vec::with_capacity(k_count);
        for k in 0..k_count {
            let states = kernel.cluster_states(k);
            let pi_k = stationary_of(&kernel.unperturbed_block(k));
            let xi = states.len() as f64 / n as f64;
            for (i, &x) in states.iter().enumerate() {
                global[x] = xi * pi_k[i];
            }
            per_cluster.push(pi_k.iter().copied().collect());
            coupling.push(xi);
        }
        return Ok(StationaryDecomposition { global, per_cluster, coupling });
    }

    if !strongly_connected(kernel) {
        return Err(Error::Structure(
            "kernel with sparse edges is not irreducible".into(),
        ));
    }

    let p = kernel.to_dense()?;
    let pi = stationary_of(&p);
    let residual = (pi.transpose() * &p - pi.transpose()).abs().max();
    if residual > 1e-9 {
        return Err(Error::Numerical(format!(
            "stationary residual {residual:.3e} exceeds 1e-9"
        )));
    }

    let mut per_cluster = Vec::with_capacity(k_count);
    let mut coupling = Vec::with_capacity(k_count);
    for k in 0..k_count {
        let states = kernel.cluster_states(k);
        let xi: f64 = states.iter().map(|&x| pi[x]).sum();
        let complement = stochastic_complement(kernel, k)?;
        let pi_k = stationary_of(&complement);
        // Coupling identity: pi restricted to C_k equals xi_k * pi_k.
        for (i, &x) in states.iter().enumerate() {
            if (pi[x] - xi * pi_k[i]).abs() > 1e-9 {
                return Err(Error::Numerical(format!(
                    "coupling identity violated at state {x}: {} vs {}",
                    pi[x],
                    xi * pi_k[i]
                )));
            }
        }
        per_cluster.push(pi_k.iter().copied().collect());
        coupling.push(xi);
    }

    Ok(StationaryDecomposition {
        global: pi.iter().copied().collect(),
        per_cluster,
        coupling,
    })
}

/// Expected hitting times of `target` from every state: zero on the target,
/// (I - Q) h = 1 off it.
pub fn expected_hitting_time(kernel: &TransitionKernel, target: &[usize]) -> Result<Vec<f64>> {
    guard(kernel)?;
    if target.is_empty() {
        return Err(Error::Validation("empty target set".into()));
    }
    let n = kernel.num_states();
    let in_target = {
        let mut mask = vec![false; n];
        for &t in target {
            mask[t] = true;
        }
        mask
    };
    let transient: Vec<usize> = (0..n).filter(|&x| !in_target[x]).collect();
    let mut h = vec![0.0; n];
    if transient.is_empty() {
        return Ok(h);
    }
    let index: std::collections::HashMap<usize, usize> =
        transient.iter().enumerate().map(|(i, &x)| (x, i)).collect();
    let m = transient.len();
    let mut a = DMatrix::<f64>::identity(m, m);
    for (i, &x) in transient.iter().enumerate() {
        let row = kernel.row(x);
        for (&t, &p) in row.targets.iter().zip(&row.probs) {
            if let Some(&j) = index.get(&(t as usize)) {
                a[(i, j)] -= p;
            }
        }
    }
    let b = DVector::from_element(m, 1.0);
    let sol = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Structure("target unreachable from some state".into()))?;
    if sol.iter().any(|&v| !v.is_finite() || v < -1e-6) {
        return Err(Error::Structure("target unreachable from some state".into()));
    }
    for (i, &x) in transient.iter().enumerate() {
        h[x] = sol[i];
    }
    Ok(h)
}

/// P_x(return to A strictly before returning to x), by first-step analysis
/// with x and A absorbing from time 1.
pub fn escape_probability(kernel: &TransitionKernel, x: usize, targets: &[usize]) -> Result<f64> {
    guard(kernel)?;
    if targets.contains(&x) {
        return Err(Error::Validation(format!("state {x} lies in the target set")));
    }
    let n = kernel.num_states();
    let mut absorb_target = vec![false; n];
    for &t in targets {
        absorb_target[t] = true;
    }
    let transient: Vec<usize> = (0..n).filter(|&z| !absorb_target[z] && z != x).collect();
    let index: std::collections::HashMap<usize, usize> =
        transient.iter().enumerate().map(|(i, &z)| (z, i)).collect();
    let m = transient.len();

    // u(z) = P_z(hit A before x), absorbing both.
    let mut a = DMatrix::<f64>::identity(m, m);
    let mut b = DVector::<f64>::zeros(m);
    for (i, &z) in transient.iter().enumerate() {
        let row = kernel.row(z);
        for (&t, &p) in row.targets.iter().zip(&row.probs) {
            let y = t as usize;
            if absorb_target[y] {
                b[i] += p;
            } else if let Some(&j) = index.get(&y) {
                a[(i, j)] -= p;
            }
        }
    }
    let u = if m == 0 {
        DVector::<f64>::zeros(0)
    } else {
        a.lu()
            .solve(&b)
            .ok_or_else(|| Error::Structure("absorbing system is singular".into()))?
    };

    let row = kernel.row(x);
    let mut prob = 0.0;
    for (&t, &p) in row.targets.iter().zip(&row.probs) {
        let y = t as usize;
        if absorb_target[y] {
            prob += p;
        } else if let Some(&j) = index.get(&y) {
            prob += p * u[j];
        }
    }
    Ok(prob.clamp(0.0, 1.0))
}

/// Stochastic complement of cluster k: S_kk = P_kk + P_k*(I - P_k)^{-1} P_*k,
/// the transition matrix of the chain watched only on C_k.
pub fn stochastic_complement(kernel: &TransitionKernel, cluster: usize) -> Result<DMatrix<f64>> {
    guard(kernel)?;
    let states = kernel.cluster_states(cluster);
    let m = states.len();
    let index: std::collections::HashMap<usize, usize> =
        states.iter().enumerate().map(|(i, &x)| (x, i)).collect();
    let rest: Vec<usize> = (0..kernel.num_states())
        .filter(|&x| kernel.cluster_of(x) != cluster)
        .collect();
    let rest_index: std::collections::HashMap<usize, usize> =
        rest.iter().enumerate().map(|(i, &x)| (x, i)).collect();
    let r = rest.len();

    let mut p_kk = DMatrix::<f64>::zeros(m, m);
    let mut p_out = DMatrix::<f64>::zeros(m, r);
    for (i, &x) in states.iter().enumerate() {
        let row = kernel.row(x);
        for (&t, &p) in row.targets.iter().zip(&row.probs) {
            let y = t as usize;
            if let Some(&j) = index.get(&y) {
                p_kk[(i, j)] = p;
            } else {
                p_out[(i, rest_index[&y])] = p;
            }
        }
    }
    if r == 0 || p_out.amax() == 0.0 {
        // Isolated cluster: the complement is the block itself.
        return Ok(p_kk);
    }

    let mut p_rest = DMatrix::<f64>::zeros(r, r);
    let mut p_in = DMatrix::<f64>::zeros(r, m);
    for (i, &x) in rest.iter().enumerate() {
        let row = kernel.row(x);
        for (&t, &p) in row.targets.iter().zip(&row.probs) {
            let y = t as usize;
            if let Some(&j) = rest_index.get(&y) {
                p_rest[(i, j)] = p;
            } else {
                p_in[(i, index[&y])] = p;
            }
        }
    }

    let a = DMatrix::<f64>::identity(r, r) - p_rest;
    let x = a
        .lu()
        .solve(&p_in)
        .ok_or_else(|| Error::Structure("(I - P_k) is singular".into()))?;
    let mut s = p_kk + p_out * x;

    for i in 0..m {
        for j in 0..m {
            let v = s[(i, j)];
            if v < -1e-12 {
                return Err(Error::Numerical(format!(
                    "complement entry ({i},{j}) = {v:.3e} below zero"
                )));
            }
            if v < 0.0 {
                s[(i, j)] = 0.0;
            }
        }
        let sum: f64 = s.row(i).sum();
        if (sum - 1.0).abs() > 1e-10 {
            return Err(Error::Numerical(format!(
                "complement row {i} sums to {sum}"
            )));
        }
    }
    Ok(s)
}

/// Pseudo-spectral gap: max over m <= 8 of gap((P-dagger)^m P^m) / m, where
/// P-dagger is the time reversal. The product is reversible, so its gap is
/// read off a symmetric eigensolve in the pi-weighted inner product. The
/// truncated maximum is a certified lower bound on the full supremum.
pub fn pseudo_spectral_gap(p: &DMatrix<f64>) -> Result<f64> {
    pseudo_spectral_gap_up_to(p, 8)
}

pub fn pseudo_spectral_gap_up_to(p: &DMatrix<f64>, m_max: usize) -> Result<f64> {
    let n = p.nrows();
    if n != p.ncols() {
        return Err(Error::Validation("matrix not square".into()));
    }
    for i in 0..n {
        let s: f64 = p.row(i).sum();
        if (s - 1.0).abs() > 1e-9 || p.row(i).iter().any(|&v| v < -1e-12) {
            return Err(Error::Validation(format!("input row {i} is not stochastic")));
        }
    }
    if n == 1 {
        return Ok(1.0);
    }
    let pi = stationary_of(p);
    let mut reversal = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            reversal[(i, j)] = pi[j] * p[(j, i)] / pi[i];
        }
    }

    let sqrt_pi: Vec<f64> = pi.iter().map(|&v| v.sqrt()).collect();
    let mut best: f64 = 0.0;
    let mut p_pow = DMatrix::<f64>::identity(n, n);
    let mut rev_pow = DMatrix::<f64>::identity(n, n);
    for m in 1..=m_max {
        p_pow = &p_pow * p;
        rev_pow = &rev_pow * &reversal;
        let prod = &rev_pow * &p_pow;
        // Similarity transform D^(1/2) A D^(-1/2) makes the product symmetric.
        let mut sym = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                sym[(i, j)] = sqrt_pi[i] * prod[(i, j)] / sqrt_pi[j];
            }
        }
        let sym = (&sym + sym.transpose()) * 0.5;
        let mut eigen: Vec<f64> = sym.symmetric_eigenvalues().iter().copied().collect();
        eigen.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let lambda2 = eigen[1].clamp(0.0, 1.0);
        best = best.max((1.0 - lambda2) / m as f64);
    }
    Ok(best)
}

/// Canonical meta-chain over clusters:
/// q*(l|k) = sum_x mu_k(x)^2 P_x(return to C_l before x), diagonal filling the row.
pub fn meta_kernel_qstar(kernel: &TransitionKernel) -> Result<MetaKernel> {
    guard(kernel)?;
    let k_count = kernel.num_clusters();
    let labels: Vec<usize> = (0..k_count).collect();
    if kernel.sparse_support().is_empty() {
        return MetaKernel::new(labels, DMatrix::<f64>::identity(k_count, k_count));
    }
    let mut rows = DMatrix::<f64>::zeros(k_count, k_count);
    for k in 0..k_count {
        let states = kernel.cluster_states(k);
        let mu = block_stationary(kernel, k);
        for l in 0..k_count {
            if l == k {
                continue;
            }
            let target = kernel.cluster_states(l);
            let mut q = 0.0;
            for (i, &x) in states.iter().enumerate() {
                q += mu[i] * mu[i] * escape_probability(kernel, x, target)?;
            }
            rows[(k, l)] = q;
        }
        let off: f64 = rows.row(k).sum();
        if off >= 1.0 {
            return Err(Error::Numerical(format!(
                "off-diagonal mass {off} of meta row {k} reaches 1"
            )));
        }
        rows[(k, k)] = 1.0 - off;
    }
    MetaKernel::new(labels, rows)
}

/// Representative meta-chain: q(x_l | x_k) = pi_k(x_k) P_xk(first return to
/// the representative set lands at x_l), diagonal filling the row.
pub fn meta_kernel_qcirc(kernel: &TransitionKernel, representatives: &[usize]) -> Result<MetaKernel> {
    guard(kernel)?;
    let k_count = kernel.num_clusters();
    validate_transversal(kernel, representatives)?;

    let hit = first_return_matrix(kernel, representatives)?;
    let mut rows = DMatrix::<f64>::zeros(k_count, k_count);
    for k in 0..k_count {
        let states = kernel.cluster_states(k);
        let complement = stochastic_complement(kernel, k)?;
        let pi_k = stationary_of(&complement);
        let pos = states.iter().position(|&x| x == representatives[k]).unwrap();
        let weight = pi_k[pos];
        for l in 0..k_count {
            if l != k {
                rows[(k, l)] = weight * hit[(k, l)];
            }
        }
        let off: f64 = rows.row(k).sum();
        if off >= 1.0 {
            return Err(Error::Numerical(format!(
                "off-diagonal mass {off} of representative row {k} reaches 1"
            )));
        }
        rows[(k, k)] = 1.0 - off;
    }
    MetaKernel::new(representatives.to_vec(), rows)
}

fn validate_transversal(kernel: &TransitionKernel, representatives: &[usize]) -> Result<()> {
    let k_count = kernel.num_clusters();
    if representatives.len() != k_count {
        return Err(Error::Validation(format!(
            "{} representatives for {k_count} clusters",
            representatives.len()
        )));
    }
    for (k, &x) in representatives.iter().enumerate() {
        if x >= kernel.num_states() || kernel.cluster_of(x) != k {
            return Err(Error::Validation(format!(
                "representative {x} does not lie in cluster {k}"
            )));
        }
    }
    Ok(())
}

/// hit[(k, l)] = P_{x_k}(first return to the representative set equals x_l).
fn first_return_matrix(
    kernel: &TransitionKernel,
    representatives: &[usize],
) -> Result<DMatrix<f64>> {
    let n = kernel.num_states();
    let k_count = representatives.len();
    let mut rep_of = vec![None; n];
    for (k, &x) in representatives.iter().enumerate() {
        rep_of[x] = Some(k);
    }
    let transient: Vec<usize> = (0..n).filter(|&x| rep_of[x].is_none()).collect();
    let index: std::collections::HashMap<usize, usize> =
        transient.iter().enumerate().map(|(i, &x)| (x, i)).collect();
    let m = transient.len();

    // u[z][l] = P_z(first visit of the representative set is x_l), z transient.
    let u = if m == 0 {
        DMatrix::<f64>::zeros(0, k_count)
    } else {
        let mut a = DMatrix::<f64>::identity(m, m);
        let mut b = DMatrix::<f64>::zeros(m, k_count);
        for (i, &z) in transient.iter().enumerate() {
            let row = kernel.row(z);
            for (&t, &p) in row.targets.iter().zip(&row.probs) {
                let y = t as usize;
                match rep_of[y] {
                    Some(l) => b[(i, l)] += p,
                    None => a[(i, index[&y])] -= p,
                }
            }
        }
        a.lu()
            .solve(&b)
            .ok_or_else(|| Error::Structure("first-return system is singular".into()))?
    };

    let mut hit = DMatrix::<f64>::zeros(k_count, k_count);
    for (k, &x) in representatives.iter().enumerate() {
        let row = kernel.row(x);
        for (&t, &p) in row.targets.iter().zip(&row.probs) {
            let y = t as usize;
            match rep_of[y] {
                Some(l) => hit[(k, l)] += p,
                None => {
                    let i = index[&y];
                    for l in 0..k_count {
                        hit[(k, l)] += p * u[(i, l)];
                    }
                }
            }
        }
    }
    Ok(hit)
}

/// Metastability ratio of a representative set: worst-case probability of
/// moving between representatives over the easiest return to the set.
pub fn metastability_ratio(kernel: &TransitionKernel, representatives: &[usize]) -> Result<f64> {
    guard(kernel)?;
    validate_transversal(kernel, representatives)?;
    let mut numerator: f64 = 0.0;
    for (k, &x) in representatives.iter().enumerate() {
        let others: Vec<usize> = representatives
            .iter()
            .enumerate()
            .filter(|&(l, _)| l != k)
            .map(|(_, &y)| y)
            .collect();
        if others.is_empty() {
            continue;
        }
        numerator = numerator.max(escape_probability(kernel, x, &others)?);
    }
    let mut denominator = f64::INFINITY;
    for y in 0..kernel.num_states() {
        if representatives.contains(&y) {
            continue;
        }
        denominator = denominator.min(escape_probability(kernel, y, representatives)?);
    }
    if !denominator.is_finite() || denominator == 0.0 {
        return Err(Error::Structure(
            "representative set unreachable from outside".into(),
        ));
    }
    Ok(numerator / denominator)
}

// ── serialization ────────────────────────────────────────────────────────────

/// Meta-kernel text format: header `K epsilon`, a labels line, then one line
/// per nonzero entry `src dst prob` (the kernel format without `is_sparse`).
pub fn meta_to_string(meta: &MetaKernel, epsilon: f64) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{} {:.16e}", meta.dim(), epsilon);
    let labels: Vec<String> = meta.labels.iter().map(|l| l.to_string()).collect();
    let _ = writeln!(out, "{}", labels.join(" "));
    for i in 0..meta.dim() {
        for j in 0..meta.dim() {
            if meta.rows[(i, j)] > 0.0 {
                let _ = writeln!(out, "{} {} {:.16e}", i, j, meta.rows[(i, j)]);
            }
        }
    }
    out
}

pub fn meta_from_str(text: &str) -> Result<(MetaKernel, f64)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Parse("empty meta file".into()))?;
    let head: Vec<&str> = header.split_whitespace().collect();
    if head.len() != 2 {
        return Err(Error::Parse(format!("bad meta header: {header}")));
    }
    let k: usize = head[0].parse().map_err(|_| Error::Parse("bad K".into()))?;
    let epsilon: f64 = head[1].parse().map_err(|_| Error::Parse("bad epsilon".into()))?;
    let labels: Vec<usize> = lines
        .next()
        .ok_or_else(|| Error::Parse("missing labels line".into()))?
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::Parse("bad label".into())))
        .collect::<Result<_>>()?;
    if labels.len() != k {
        return Err(Error::Parse("label count mismatch".into()));
    }
    let mut rows = DMatrix::<f64>::zeros(k, k);
    for line in lines {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 {
            return Err(Error::Parse(format!("bad meta entry: {line}")));
        }
        let i: usize = f[0].parse().map_err(|_| Error::Parse("bad src".into()))?;
        let j: usize = f[1].parse().map_err(|_| Error::Parse("bad dst".into()))?;
        rows[(i, j)] = f[2].parse().map_err(|_| Error::Parse("bad prob".into()))?;
    }
    Ok((MetaKernel::new(labels, rows)?, epsilon))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{self, GraphSpec, SparseTopology};

    fn two_state(a: f64, b: f64) -> TransitionKernel {
        TransitionKernel::from_rows(
            vec![0, 1],
            vec![vec![(0, 1.0 - a), (1, a)], vec![(0, b), (1, 1.0 - b)]],
            0.1,
            0,
        )
        .unwrap()
    }

    fn build(spec: &GraphSpec) -> (TransitionKernel, kernel::SparseEdgeSet) {
        let p0 = kernel::build_unperturbed(spec).unwrap();
        kernel::plant_sparse_edges(&p0, spec).unwrap()
    }

    #[test]
    fn symmetric_two_state_stationary_is_uniform() {
        let k = two_state(0.5, 0.5);
        let dec = stationary(&k).unwrap();
        assert!((dec.global[0] - 0.5).abs() < 1e-12);
        assert!((dec.global[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn three_cycle_stationary_is_uniform() {
        let k = TransitionKernel::from_rows(
            vec![0, 1, 2],
            vec![vec![(1, 1.0)], vec![(2, 1.0)], vec![(0, 1.0)]],
            0.1,
            0,
        )
        .unwrap();
        let dec = stationary(&k).unwrap();
        for x in 0..3 {
            assert!((dec.global[x] - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn stationary_residual_and_cluster_mass() {
        let spec = GraphSpec::new(2, 4, 0.05, 19).with_topology(SparseTopology::BidirectionalCycle);
        let (kernel, _) = build(&spec);
        let dec = stationary(&kernel).unwrap();
        let p = kernel.to_dense().unwrap();
        let pi = DVector::from_vec(dec.global.clone());
        let residual = (pi.transpose() * &p - pi.transpose()).abs().max();
        assert!(residual < 1e-10, "residual {residual:.3e}");
        // pi(C_k) of uniform-order: within a factor-3 band around 1/K.
        for &xi in &dec.coupling {
            assert!(xi > 1.0 / 6.0 && xi < 3.0 / 2.0, "xi {xi}");
        }
    }

    #[test]
    fn geometric_hitting_time_is_exact() {
        let k = two_state(0.1, 0.3);
        let h = expected_hitting_time(&k, &[1]).unwrap();
        assert!((h[0] - 10.0).abs() < 1e-9);
        assert_eq!(h[1], 0.0);
    }

    #[test]
    fn hitting_time_of_everything_is_zero() {
        let k = two_state(0.2, 0.2);
        let h = expected_hitting_time(&k, &[0, 1]).unwrap();
        assert_eq!(h, vec![0.0, 0.0]);
    }

    #[test]
    fn escape_probability_one_step_chain() {
        let k = two_state(0.1, 0.3);
        let p = escape_probability(&k, 0, &[1]).unwrap();
        assert!((p - 0.1).abs() < 1e-12);
    }

    #[test]
    fn escape_probability_forced_exit() {
        // p(x|x) = 0 and all neighbors in A: must leave immediately.
        let k = TransitionKernel::from_rows(
            vec![0, 0, 0],
            vec![
                vec![(1, 0.6), (2, 0.4)],
                vec![(0, 0.5), (1, 0.25), (2, 0.25)],
                vec![(0, 0.5), (1, 0.25), (2, 0.25)],
            ],
            0.0,
            0,
        )
        .unwrap();
        let p = escape_probability(&k, 0, &[1, 2]).unwrap();
        assert!((p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn detailed_balance_of_escape_probabilities() {
        let spec = GraphSpec::new(2, 4, 0.05, 23).with_topology(SparseTopology::BidirectionalCycle);
        let (kernel, _) = build(&spec);
        let dec = stationary(&kernel).unwrap();
        let n = kernel.num_states();
        for x in 0..n {
            for y in (x + 1)..n {
                let lhs = dec.global[x] * escape_probability(&kernel, x, &[y]).unwrap();
                let rhs = dec.global[y] * escape_probability(&kernel, y, &[x]).unwrap();
                assert!((lhs - rhs).abs() < 1e-10, "pair ({x},{y}): {lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn complement_reduces_to_block_when_unperturbed() {
        let spec = GraphSpec::new(2, 3, 0.0, 5);
        let (kernel, _) = build(&spec);
        let s = stochastic_complement(&kernel, 0).unwrap();
        let block = kernel.unperturbed_block(0);
        assert!((s - block).abs().max() < 1e-14);
    }

    #[test]
    fn complement_rows_are_stochastic() {
        let spec = GraphSpec::new(2, 2, 0.1, 7).with_topology(SparseTopology::BidirectionalCycle);
        let (kernel, _) = build(&spec);
        for k in 0..2 {
            let s = stochastic_complement(&kernel, k).unwrap();
            for i in 0..s.nrows() {
                assert!((s.row(i).sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rank_one_chain_has_unit_pseudo_gap() {
        let p = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5]);
        let gap = pseudo_spectral_gap(&p).unwrap();
        assert!((gap - 1.0).abs() < 1e-10);
    }

    #[test]
    fn pseudo_gap_brackets_spectral_gap_for_reversible_blocks() {
        for seed in [1u64, 8, 21] {
            let spec = GraphSpec::new(1, 8, 0.0, seed);
            let (kernel, _) = build(&spec);
            let block = kernel.unperturbed_block(0);
            // gamma from the symmetric eigensolve of the lazy reversible block.
            let pi = stationary_of(&block);
            let n = block.nrows();
            let mut sym = DMatrix::<f64>::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    sym[(i, j)] = pi[i].sqrt() * block[(i, j)] / pi[j].sqrt();
                }
            }
            let sym = (&sym + sym.transpose()) * 0.5;
            let mut eigen: Vec<f64> = sym.symmetric_eigenvalues().iter().copied().collect();
            eigen.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let gamma = 1.0 - eigen[1].abs().max(eigen[n - 1].abs());
            let dagger = pseudo_spectral_gap(&block).unwrap();
            assert!(
                dagger >= gamma - 1e-9 && dagger <= 2.0 * gamma + 1e-9,
                "gamma {gamma}, dagger {dagger}"
            );
        }
    }

    #[test]
    fn qstar_is_identity_without_perturbation() {
        let spec = GraphSpec::new(3, 3, 0.0, 2);
        let (kernel, _) = build(&spec);
        let meta = meta_kernel_qstar(&kernel).unwrap();
        assert!((meta.rows.clone() - DMatrix::<f64>::identity(3, 3)).abs().max() < 1e-14);
    }

    #[test]
    fn qstar_connected_pairs_have_epsilon_over_m_mass() {
        let spec = GraphSpec::new(3, 4, 0.02, 11).with_topology(SparseTopology::BidirectionalCycle);
        let (kernel, edges) = build(&spec);
        let meta = meta_kernel_qstar(&kernel).unwrap();
        let bound = 0.02 * spec.epsilon / spec.cluster_size as f64;
        for e in &edges.edges {
            let (k, l) = (kernel.cluster_of(e.src), kernel.cluster_of(e.dst));
            assert!(meta.rows[(k, l)] >= bound, "q*({l}|{k}) = {}", meta.rows[(k, l)]);
        }
    }

    #[test]
    fn qcirc_single_cluster_is_trivial() {
        let spec = GraphSpec::new(1, 3, 0.0, 4);
        let (kernel, _) = build(&spec);
        let meta = meta_kernel_qcirc(&kernel, &[0]).unwrap();
        assert_eq!(meta.dim(), 1);
        assert!((meta.rows[(0, 0)] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn qcirc_vanishes_without_direct_edge() {
        // Directed 3-cycle with inbound targets: no edge 0 -> 2.
        let mut spec = GraphSpec::new(3, 4, 0.01, 13);
        spec.inbound_targets = true;
        let (kernel, edges) = build(&spec);
        assert!(!edges.connects(&kernel, 0, 2));
        let reps = kernel.designated_targets().unwrap().to_vec();
        let meta = meta_kernel_qcirc(&kernel, &reps).unwrap();
        assert_eq!(meta.rows[(0, 2)], 0.0);
        assert!(meta.rows[(0, 1)] > 0.0);
    }

    #[test]
    fn transversal_is_validated() {
        let spec = GraphSpec::new(2, 3, 0.01, 3);
        let (kernel, _) = build(&spec);
        // Two representatives from the same cluster.
        assert!(matches!(
            meta_kernel_qcirc(&kernel, &[0, 1]),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn metastability_ratio_zero_when_unperturbed() {
        let spec = GraphSpec::new(3, 3, 0.0, 6);
        let (kernel, _) = build(&spec);
        let reps: Vec<usize> = (0..3).map(|k| kernel.cluster_states(k)[0]).collect();
        let ratio = metastability_ratio(&kernel, &reps).unwrap();
        assert_eq!(ratio, 0.0);
    }

    #[test]
    fn meta_serialization_round_trips() {
        let spec = GraphSpec::new(3, 3, 0.02, 9).with_topology(SparseTopology::BidirectionalCycle);
        let (kernel, _) = build(&spec);
        let meta = meta_kernel_qstar(&kernel).unwrap();
        let text = meta_to_string(&meta, kernel.epsilon());
        let (parsed, eps) = meta_from_str(&text).unwrap();
        assert_eq!(eps, kernel.epsilon());
        assert_eq!(parsed.labels, meta.labels);
        assert!((parsed.rows - meta.rows).abs().max() == 0.0);
    }
}
