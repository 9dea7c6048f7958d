//! N-parallel rollout search for sparse edges.
//!
//! Each outer round samples a start state, explores its cluster with N
//! rollouts for T0 steps, then continues every rollout until it steps outside
//! its own visit set; the crossing edge is recorded and the rollout retires.
//! PRM mode accumulates the found edges; RL mode hands each round's edges to
//! the PPO update.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

use crate::kernel::TransitionKernel;
use crate::ppo::{self, PpoSchedule};
use crate::pretrain::{SoftmaxTable, SourceDist};
use crate::{dynamics, oracle, rng, Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum SearchMode {
    /// Collect edges into an external process reward set.
    Prm,
    /// Fine-tune the softmax model with PPO-Clip after every round.
    Rl(PpoSchedule),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchSchedule {
    /// Outer rounds R.
    pub rounds: usize,
    /// Parallel rollouts N per round.
    pub num_rollouts: usize,
    /// Cluster-search steps T0.
    pub t0: usize,
    /// Edge-search horizon T_max.
    pub t_max: usize,
    pub mode: SearchMode,
    pub source_dist: SourceDist,
}

impl SearchSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.num_rollouts == 0 || self.t0 == 0 {
            return Err(Error::InvalidSpec("search schedule counts must be positive".into()));
        }
        if self.t0 >= self.t_max {
            return Err(Error::InvalidSpec(format!(
                "T0 = {} must be below T_max = {}",
                self.t0, self.t_max
            )));
        }
        Ok(())
    }
}

/// R = ceil(4 K ln K), N = ceil(4 ln K) (both floored at 4),
/// T0 = ceil(6 M (ln M)^2), T_max = ceil(8 M / ε).
///
/// The T0 constant is sized so that a single rollout covers its cluster with
/// probability well above 1 - 1/(MK^2) at desk scale; smaller constants make
/// the intersection estimate drop states and produce false edges.
pub fn default_schedule(num_clusters: usize, cluster_size: usize, epsilon: f64) -> SearchSchedule {
    let k = num_clusters.max(1) as f64;
    let m = cluster_size.max(2) as f64;
    let rounds = ((4.0 * k * k.ln()).ceil() as usize).max(4);
    let num_rollouts = ((4.0 * k.ln()).ceil() as usize).max(4);
    let t0 = ((6.0 * m * m.ln().powi(2)).ceil() as usize).max(2);
    let t_max = if epsilon > 0.0 {
        (8.0 * m / epsilon).ceil() as usize
    } else {
        // No exits exist; keep the edge phase finite.
        100 * cluster_size.max(1)
    };
    SearchSchedule {
        rounds,
        num_rollouts,
        t0,
        t_max: t_max.max(t0 + 1),
        mode: SearchMode::Prm,
        source_dist: SourceDist::Uniform,
    }
}

/// One rollout positioned at its T0 state with its private visit set and RNG.
#[derive(Debug, Clone)]
pub struct RolloutState {
    pub current: usize,
    pub visited: HashSet<usize>,
    rng: ChaCha8Rng,
}

/// Result of the cluster-search phase.
#[derive(Debug, Clone)]
pub struct ClusterEstimate {
    /// Intersection of the per-rollout visit sets.
    pub pooled: HashSet<usize>,
    pub rollouts: Vec<RolloutState>,
    pub steps: usize,
}

/// Runs N rollouts for T0 steps each and intersects their visit sets.
pub fn cluster_explore(
    kernel: &TransitionKernel,
    x0: usize,
    num_rollouts: usize,
    t0: usize,
    seed: u64,
    round: u64,
) -> ClusterEstimate {
    let mut rollouts = Vec::with_capacity(num_rollouts);
    for n in 0..num_rollouts {
        let mut rng = rng::substream(seed, round, n as u64);
        let mut visited = HashSet::from([x0]);
        let mut x = x0;
        for _ in 0..t0 {
            x = dynamics::step(kernel, x, &mut rng);
            visited.insert(x);
        }
        rollouts.push(RolloutState { current: x, visited, rng });
    }
    let mut pooled = rollouts[0].visited.clone();
    for r in &rollouts[1..] {
        pooled.retain(|x| r.visited.contains(x));
    }
    ClusterEstimate { pooled, rollouts, steps: num_rollouts * t0 }
}

/// Continues each rollout until it leaves its own visit set, recording the
/// crossing edge, until all retire or the horizon is reached. Returns the
/// found edges and the number of steps consumed.
///
/// A rollout retires on its first detection, but the detection enters the
/// edge estimate only when it genuinely leaves the explored region: the
/// source must lie in the pooled intersection and the target outside the
/// union of all visit sets. Without the filter, rollouts that slipped out of
/// the cluster during exploration report within-cluster edges of the
/// neighbor they landed in, and a single rollout that missed a rarely-hit
/// state reports that state as novel.
pub fn edge_search(
    kernel: &TransitionKernel,
    estimate: &mut ClusterEstimate,
    t0: usize,
    t_max: usize,
) -> (Vec<(usize, usize)>, usize) {
    let mut found = Vec::new();
    let mut active: Vec<usize> = (0..estimate.rollouts.len()).collect();
    let mut steps = 0usize;
    let pooled = estimate.pooled.clone();
    let mut union: HashSet<usize> = HashSet::new();
    for r in &estimate.rollouts {
        union.extend(r.visited.iter().copied());
    }
    for _ in (t0 + 1)..=t_max {
        if active.is_empty() {
            break;
        }
        let mut still_active = Vec::with_capacity(active.len());
        for &n in &active {
            let r = &mut estimate.rollouts[n];
            let next = dynamics::step(kernel, r.current, &mut r.rng);
            steps += 1;
            if r.visited.contains(&next) {
                r.current = next;
                still_active.push(n);
            } else {
                if pooled.contains(&r.current) && !union.contains(&next) {
                    found.push((r.current, next));
                }
                r.current = next;
            }
        }
        active = still_active;
    }
    (found, steps)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub x0: usize,
    pub cluster_correct: bool,
    pub edges_found: usize,
    pub steps_used: usize,
}

/// Search report: per-round telemetry plus the accumulated edge estimate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchReport {
    pub rounds: Vec<RoundReport>,
    pub m_s: Vec<(usize, usize)>,
    pub equals_planted: bool,
    pub total_steps: usize,
    /// Peak auxiliary state across rounds: visit sets plus found edges.
    pub peak_aux_states: usize,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub m_s: Vec<(usize, usize)>,
    /// Final model in RL mode.
    pub model: Option<SoftmaxTable>,
    pub report: SearchReport,
}

/// Runs R rounds of cluster exploration and edge search. Round r draws its
/// start state and rollouts from RNG streams (seed, r), so runs are
/// deterministic for a fixed seed.
pub fn run_search(
    kernel: &TransitionKernel,
    schedule: &SearchSchedule,
    seed: u64,
) -> Result<SearchOutcome> {
    schedule.validate()?;
    let n_states = kernel.num_states();
    let stationary_cum: Option<Vec<f64>> = match schedule.source_dist {
        SourceDist::Uniform => None,
        SourceDist::Stationary => {
            let pi = oracle::stationary(kernel)?.global;
            Some(
                pi.iter()
                    .scan(0.0, |acc, &p| {
                        *acc += p;
                        Some(*acc)
                    })
                    .collect(),
            )
        }
    };

    let mut model = match &schedule.mode {
        SearchMode::Rl(_) => Some(SoftmaxTable::from_kernel(kernel)),
        SearchMode::Prm => None,
    };
    // RL mode generates rollouts from the current model, so fine-tuned rows
    // take effect in later rounds; the PPO old policy stays the base kernel.
    let mut rollout_kernel = kernel.clone();

    let mut m_s: Vec<(usize, usize)> = Vec::new();
    let mut m_s_set: HashSet<(usize, usize)> = HashSet::new();
    let mut rounds = Vec::with_capacity(schedule.rounds);
    let mut total_steps = 0usize;
    let mut peak_aux = 0usize;

    for round in 0..schedule.rounds {
        let mut start_rng = rng::substream(seed, round as u64, 1 << 40);
        let x0 = match &stationary_cum {
            None => {
                use rand::Rng;
                start_rng.random_range(0..n_states)
            }
            Some(cum) => {
                use rand::Rng;
                let u: f64 = start_rng.random_range(0.0..*cum.last().unwrap());
                cum.partition_point(|&c| c <= u).min(n_states - 1)
            }
        };

        let mut estimate = cluster_explore(
            &rollout_kernel,
            x0,
            schedule.num_rollouts,
            schedule.t0,
            seed,
            round as u64,
        );
        let (found, edge_steps) =
            edge_search(&rollout_kernel, &mut estimate, schedule.t0, schedule.t_max);
        let steps_used = estimate.steps + edge_steps;
        total_steps += steps_used;

        let aux: usize = estimate.rollouts.iter().map(|r| r.visited.len()).sum::<usize>()
            + estimate.pooled.len()
            + found.len();
        peak_aux = peak_aux.max(aux + m_s_set.len());

        let truth: HashSet<usize> = kernel
            .cluster_states(kernel.cluster_of(x0))
            .iter()
            .copied()
            .collect();
        let cluster_correct = estimate.pooled == truth;

        for &e in &found {
            if m_s_set.insert(e) {
                m_s.push(e);
            }
        }
        if let (SearchMode::Rl(ppo_schedule), Some(model)) = (&schedule.mode, model.as_mut()) {
            if !found.is_empty() {
                let (updated, _) = ppo::run_ppo(model, kernel, &found, ppo_schedule)?;
                *model = updated;
                rollout_kernel = model.to_kernel(kernel)?;
            }
        }

        rounds.push(RoundReport {
            round,
            x0,
            cluster_correct,
            edges_found: found.len(),
            steps_used,
        });
    }

    m_s.sort_unstable();
    let mut planted = kernel.sparse_support();
    planted.sort_unstable();
    let equals_planted = m_s == planted;

    Ok(SearchOutcome {
        m_s: m_s.clone(),
        model,
        report: SearchReport {
            rounds,
            m_s,
            equals_planted,
            total_steps,
            peak_aux_states: peak_aux,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{self, GraphSpec, SparseTopology};

    fn build(spec: &GraphSpec) -> TransitionKernel {
        let p0 = kernel::build_unperturbed(spec).unwrap();
        kernel::plant_sparse_edges(&p0, spec).unwrap().0
    }

    #[test]
    fn schedule_arithmetic_matches_the_formulas() {
        let s = default_schedule(8, 16, 0.01);
        assert_eq!(s.num_rollouts, 9); // ceil(4 ln 8)
        assert_eq!(s.rounds, (4.0 * 8.0 * 8f64.ln()).ceil() as usize);
        assert_eq!(s.t_max, (8.0_f64 * 16.0 / 0.01).ceil() as usize);

        let small = default_schedule(2, 4, 0.01);
        assert_eq!(small.num_rollouts, 4); // floored

        let halved = default_schedule(8, 16, 0.005);
        assert_eq!(halved.t_max, 2 * s.t_max);
    }

    #[test]
    fn singleton_cluster_explores_to_itself() {
        let k = TransitionKernel::from_rows(vec![0], vec![vec![(0, 1.0)]], 0.0, 0).unwrap();
        let est = cluster_explore(&k, 0, 4, 50, 1, 0);
        assert_eq!(est.pooled, HashSet::from([0]));
    }

    #[test]
    fn pooled_estimate_is_inside_the_union_of_visits() {
        let spec = GraphSpec::new(2, 5, 0.01, 3);
        let kernel = build(&spec);
        let est = cluster_explore(&kernel, 0, 4, 30, 7, 0);
        let mut union: HashSet<usize> = HashSet::new();
        for r in &est.rollouts {
            union.extend(r.visited.iter().copied());
        }
        assert!(est.pooled.is_subset(&union));
    }

    #[test]
    fn cluster_estimate_matches_truth_on_most_seeds() {
        let spec = GraphSpec::new(2, 6, 1e-3, 5).with_topology(SparseTopology::BidirectionalCycle);
        let kernel = build(&spec);
        let schedule = default_schedule(2, 6, 1e-3);
        let truth: HashSet<usize> = kernel.cluster_states(0).iter().copied().collect();
        let mut hits = 0;
        for seed in 0..50 {
            let est = cluster_explore(&kernel, 0, schedule.num_rollouts, schedule.t0, seed, 0);
            if est.pooled == truth {
                hits += 1;
            }
        }
        assert!(hits >= 45, "only {hits}/50 correct");
    }

    #[test]
    fn no_edges_found_without_perturbation() {
        let spec = GraphSpec::new(2, 4, 0.0, 7);
        let kernel = build(&spec);
        let schedule = SearchSchedule {
            rounds: 4,
            num_rollouts: 4,
            t0: 150,
            t_max: 600,
            mode: SearchMode::Prm,
            source_dist: SourceDist::Uniform,
        };
        let out = run_search(&kernel, &schedule, 3).unwrap();
        assert!(out.m_s.is_empty());
    }

    #[test]
    fn unique_exit_is_the_recorded_edge() {
        // Directed cycle, one edge per cluster; epsilon small enough that the
        // exploration phase stays inside the cluster.
        let spec = GraphSpec::new(2, 4, 2e-4, 11);
        let kernel = build(&spec);
        let planted: HashSet<(usize, usize)> = kernel.sparse_support().into_iter().collect();
        let mut estimate = cluster_explore(&kernel, 0, 4, 150, 5, 0);
        let (found, _) = edge_search(&kernel, &mut estimate, 150, 200_000);
        assert!(!found.is_empty());
        for e in &found {
            assert!(planted.contains(e), "recorded {e:?}");
        }
    }

    #[test]
    fn correct_cluster_estimates_never_yield_false_positives() {
        // Single rollouts make the attribution unambiguous: whenever the visit
        // set covers the whole start cluster, the first exit is a real edge.
        let spec = GraphSpec::new(3, 5, 1e-3, 13).with_topology(SparseTopology::BidirectionalCycle);
        let kernel = build(&spec);
        let planted: HashSet<(usize, usize)> = kernel.sparse_support().into_iter().collect();
        let mut checked = 0;
        for seed in 0..30 {
            let mut estimate = cluster_explore(&kernel, 0, 1, 200, seed, 0);
            let visited = estimate.rollouts[0].visited.clone();
            let covers = kernel
                .cluster_states(kernel.cluster_of(estimate.rollouts[0].current))
                .iter()
                .all(|s| visited.contains(s));
            let (found, _) = edge_search(&kernel, &mut estimate, 200, 100_000);
            if covers {
                for e in &found {
                    assert!(planted.contains(e), "covered rollout recorded {e:?}");
                    checked += 1;
                }
            }
        }
        assert!(checked > 10, "only {checked} covered detections");
    }

    #[test]
    fn prm_search_recovers_all_planted_edges() {
        let spec = GraphSpec::new(3, 6, 2e-3, 17).with_topology(SparseTopology::BidirectionalCycle);
        let kernel = build(&spec);
        let schedule = default_schedule(3, 6, 2e-3);
        let mut successes = 0;
        for seed in 0..15 {
            let out = run_search(&kernel, &schedule, seed).unwrap();
            if out.report.equals_planted {
                successes += 1;
            }
            // Every recorded edge is a real transition.
            for &(x, y) in &out.m_s {
                assert!(kernel.prob(x, y) > 0.0);
            }
        }
        assert!(successes >= 13, "only {successes}/15 runs recovered E_s");
    }

    #[test]
    fn search_is_deterministic_per_seed() {
        let spec = GraphSpec::new(2, 4, 5e-3, 19).with_topology(SparseTopology::BidirectionalCycle);
        let kernel = build(&spec);
        let schedule = default_schedule(2, 4, 5e-3);
        let a = run_search(&kernel, &schedule, 7).unwrap();
        let b = run_search(&kernel, &schedule, 7).unwrap();
        assert_eq!(
            serde_json::to_string(&a.report).unwrap(),
            serde_json::to_string(&b.report).unwrap()
        );
    }

    #[test]
    fn step_budget_and_memory_are_bounded() {
        let spec = GraphSpec::new(3, 4, 5e-3, 23).with_topology(SparseTopology::BidirectionalCycle);
        let kernel = build(&spec);
        let schedule = default_schedule(3, 4, 5e-3);
        let out = run_search(&kernel, &schedule, 1).unwrap();
        let budget = schedule.rounds * schedule.num_rollouts * schedule.t_max;
        assert!(out.report.total_steps <= budget);
        let bound = 4 * (schedule.num_rollouts * 4 + out.m_s.len()) + 16;
        assert!(
            out.report.peak_aux_states <= bound,
            "peak {} vs bound {bound}",
            out.report.peak_aux_states
        );
    }
}
