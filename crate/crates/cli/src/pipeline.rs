//! End-to-end pipeline: build and validate the kernel, pretrain the world
//! model, search for sparse edges, improve generation (PPO or PRM guidance),
//! distill the meta-chain, and measure hitting times at every stage.

use metachain::distill::{self, ClusterLabeling, DistillSchedule};
use metachain::dynamics;
use metachain::kernel::{self, AssumptionReport, TaskPolicy, TransitionKernel, ValidationThresholds};
use metachain::oracle;
use metachain::ppo::{self, PpoSchedule};
use metachain::pretrain::{self, SoftmaxTable, TrainSchedule};
use metachain::search::{self, SearchMode, SearchSchedule};
use metachain::{Result, DENSE_GUARD};
use serde::{Deserialize, Serialize};

use crate::config::{parse_source_dist, ExperimentConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphSummary {
    pub num_clusters: usize,
    pub cluster_size: usize,
    pub epsilon: f64,
    pub epsilon_max: f64,
    pub num_states: usize,
    pub sparse_edges: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainStage {
    pub t1: usize,
    pub t2: usize,
    pub sup_error: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchStage {
    pub mode: String,
    pub rounds: usize,
    pub m_s: Vec<(usize, usize)>,
    pub equals_planted: bool,
    pub total_steps: usize,
    pub peak_aux_states: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImproveStage {
    /// "ppo" or "prm-guidance".
    pub method: String,
    pub boost: f64,
    pub tv_change: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillStage {
    pub t_dist: usize,
    pub t_thres: usize,
    pub beta: f64,
    pub sup_error_vs_meta: f64,
    pub laziness_residual: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalStage {
    pub x_in: usize,
    pub x_out: usize,
    pub base_mean: f64,
    pub base_stderr: f64,
    pub base_truncated: usize,
    pub improved_mean: f64,
    pub improved_stderr: f64,
    pub distilled_mean_hops: f64,
    pub oracle_base: Option<f64>,
    pub oracle_improved: Option<f64>,
    pub improvement: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub raw_base_samples: Option<Vec<u64>>,
}

/// Full pipeline record; deterministic for a fixed (config, master seed).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineReport {
    pub thresholds_version: String,
    pub master_seed: u64,
    pub graph: GraphSummary,
    pub validation: AssumptionReport,
    pub pretrain: Option<PretrainStage>,
    pub search: Option<SearchStage>,
    pub improve: Option<ImproveStage>,
    pub distill: Option<DistillStage>,
    pub eval: Option<EvalStage>,
    pub failed_stage: Option<String>,
    pub message: Option<String>,
    pub passed: bool,
}

impl PipelineReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }
}

struct Stages<'a> {
    config: &'a ExperimentConfig,
    report: PipelineReport,
}

impl Stages<'_> {
    fn fail(&mut self, stage: &str, message: String) {
        self.report.failed_stage = Some(stage.to_string());
        self.report.message = Some(message);
        self.report.passed = false;
    }
}

/// Runs every stage in order; a failed stage marks the report and skips the
/// rest. Only configuration and I/O problems surface as errors.
pub fn run_pipeline(config: &ExperimentConfig) -> Result<PipelineReport> {
    config.validate()?;
    let spec = config.graph.spec(config.seed)?;
    let p0 = kernel::build_unperturbed(&spec)?;
    let (base, edges) = kernel::plant_sparse_edges(&p0, &spec)?;

    let validation = kernel::validate_assumptions(&base, &edges, &spec, &ValidationThresholds::default());
    let report = PipelineReport {
        thresholds_version: config.thresholds.version.clone(),
        master_seed: config.seed,
        graph: GraphSummary {
            num_clusters: spec.num_clusters,
            cluster_size: spec.cluster_size,
            epsilon: spec.epsilon,
            epsilon_max: spec.epsilon_max(),
            num_states: base.num_states(),
            sparse_edges: edges.pairs(),
        },
        validation,
        pretrain: None,
        search: None,
        improve: None,
        distill: None,
        eval: None,
        failed_stage: None,
        message: None,
        passed: true,
    };
    let mut stages = Stages { config, report };

    // The epsilon-regime check is advisory (sweeps intentionally leave the
    // theoretical ceiling); every structural and spectral check gates.
    let gating_failure = stages.report.validation.checks.iter().find(|c| {
        c.name != "epsilon-regime" && c.status == kernel::CheckStatus::Fail
    });
    if let Some(check) = gating_failure {
        let detail = format!("{}: {}", check.name, check.detail);
        stages.fail("validate", detail);
        return Ok(stages.report);
    }

    let model = match pretrain_stage(&mut stages, &base, &spec) {
        Some(model) => model,
        None => return Ok(stages.report),
    };

    let (m_s, rl_model) = match search_stage(&mut stages, &base, &spec) {
        Some(out) => out,
        None => return Ok(stages.report),
    };
    if m_s.is_empty() {
        stages.report.message = Some("no sparse edges".into());
        return Ok(stages.report);
    }
    drop(model);

    let improved = match improve_stage(&mut stages, &base, &spec, &m_s, rl_model) {
        Some(kernel) => kernel,
        None => return Ok(stages.report),
    };

    let distilled = distill_stage(&mut stages, &base, &spec);
    if stages.report.failed_stage.is_some() {
        return Ok(stages.report);
    }

    eval_stage(&mut stages, &base, &edges, &improved, distilled.as_ref());
    Ok(stages.report)
}

fn pretrain_stage(
    stages: &mut Stages,
    base: &TransitionKernel,
    spec: &kernel::GraphSpec,
) -> Option<SoftmaxTable> {
    let cfg = &stages.config.pretrain;
    let mut schedule = if cfg.t1 == 0 || cfg.t2 == 0 {
        TrainSchedule::paper(spec.num_clusters, spec.cluster_size, spec.epsilon.max(1e-3))
    } else {
        TrainSchedule::new(cfg.t1, cfg.t2)
    };
    schedule.c_thres = cfg.c_thres;
    if cfg.trace_every > 0 {
        schedule.trace_every = cfg.trace_every;
    }
    match parse_source_dist(&cfg.source_dist) {
        Ok(dist) => schedule.source_dist = dist,
        Err(e) => {
            stages.fail("pretrain", e.to_string());
            return None;
        }
    }
    match pretrain::train_two_stage(base, &schedule) {
        Ok((model, _trace)) => {
            let sup = pretrain::sup_error(&model, base);
            // Unperturbed kernels gate against the dense probability scale.
            let scale = if spec.epsilon > 0.0 {
                spec.epsilon
            } else {
                1.0 / base.num_states() as f64
            };
            let tolerance = (stages.config.thresholds.pretrain_error_factor * scale).max(1e-12);
            stages.report.pretrain = Some(PretrainStage {
                t1: schedule.t1,
                t2: schedule.t2,
                sup_error: sup,
                tolerance,
            });
            if sup > tolerance {
                stages.fail("pretrain", format!("sup error {sup:.3e} above {tolerance:.3e}"));
                None
            } else {
                Some(model)
            }
        }
        Err(e) => {
            stages.fail("pretrain", e.to_string());
            None
        }
    }
}

fn search_stage(
    stages: &mut Stages,
    base: &TransitionKernel,
    spec: &kernel::GraphSpec,
) -> Option<(Vec<(usize, usize)>, Option<SoftmaxTable>)> {
    let cfg = &stages.config.search;
    let defaults = search::default_schedule(spec.num_clusters, spec.cluster_size, spec.epsilon);
    let mode = if cfg.mode.eq_ignore_ascii_case("rl") {
        let mut ppo_schedule = PpoSchedule::new(effective_eps_max(stages.config, spec));
        ppo_schedule.alpha_coeff = stages.config.ppo.alpha_coeff;
        ppo_schedule.sign_gradient = stages.config.ppo.sign_gradient;
        SearchMode::Rl(ppo_schedule)
    } else {
        SearchMode::Prm
    };
    let schedule = SearchSchedule {
        rounds: if cfg.rounds > 0 { cfg.rounds } else { defaults.rounds },
        num_rollouts: if cfg.num_rollouts > 0 { cfg.num_rollouts } else { defaults.num_rollouts },
        t0: if cfg.t0 > 0 { cfg.t0 } else { defaults.t0 },
        t_max: if cfg.t_max > 0 { cfg.t_max } else { defaults.t_max },
        mode,
        source_dist: match parse_source_dist(&cfg.source_dist) {
            Ok(d) => d,
            Err(e) => {
                stages.fail("search", e.to_string());
                return None;
            }
        },
    };
    match search::run_search(base, &schedule, stages.config.seed) {
        Ok(out) => {
            stages.report.search = Some(SearchStage {
                mode: cfg.mode.to_ascii_lowercase(),
                rounds: schedule.rounds,
                m_s: out.m_s.clone(),
                equals_planted: out.report.equals_planted,
                total_steps: out.report.total_steps,
                peak_aux_states: out.report.peak_aux_states,
            });
            Some((out.m_s, out.model))
        }
        Err(e) => {
            stages.fail("search", e.to_string());
            None
        }
    }
}

fn effective_eps_max(config: &ExperimentConfig, spec: &kernel::GraphSpec) -> f64 {
    if config.ppo.epsilon_max > 0.0 {
        config.ppo.epsilon_max
    } else {
        spec.epsilon_max().max(2.0 * spec.epsilon)
    }
}

fn improve_stage(
    stages: &mut Stages,
    base: &TransitionKernel,
    spec: &kernel::GraphSpec,
    m_s: &[(usize, usize)],
    rl_model: Option<SoftmaxTable>,
) -> Option<TransitionKernel> {
    let eps_max = effective_eps_max(stages.config, spec);
    let boost = eps_max / spec.epsilon;
    if let Some(model) = rl_model {
        let baseline = SoftmaxTable::from_kernel(base);
        let tv = ppo::tv_change(&baseline, &model);
        match model.to_kernel(base) {
            Ok(kernel) => {
                stages.report.improve = Some(ImproveStage {
                    method: "ppo".into(),
                    boost,
                    tv_change: tv,
                });
                Some(kernel)
            }
            Err(e) => {
                stages.fail("improve", e.to_string());
                None
            }
        }
    } else {
        let mut prm = kernel::SparseEdgeSet::empty(base.num_clusters());
        for &(x, y) in m_s {
            let cluster = base.cluster_of(x);
            prm.by_cluster[cluster].push(prm.edges.len());
            prm.edges.push(kernel::SparseEdge { src: x, dst: y, prob: base.prob(x, y) });
        }
        match dynamics::prm_guided_kernel(base, &prm, boost) {
            Ok(guided) => {
                let tv = ppo::tv_change(
                    &SoftmaxTable::from_kernel(base),
                    &SoftmaxTable::from_kernel(&guided),
                );
                stages.report.improve = Some(ImproveStage {
                    method: "prm-guidance".into(),
                    boost,
                    tv_change: tv,
                });
                Some(guided)
            }
            Err(e) => {
                stages.fail("improve", e.to_string());
                None
            }
        }
    }
}

fn distill_stage(
    stages: &mut Stages,
    base: &TransitionKernel,
    spec: &kernel::GraphSpec,
) -> Option<SoftmaxTable> {
    let cfg = &stages.config.distill;
    let mut schedule = DistillSchedule::paper(spec.num_clusters, spec.cluster_size, spec.epsilon);
    if cfg.t_dist > 0 {
        schedule.t_dist = cfg.t_dist;
    }
    if cfg.t_thres > 0 {
        schedule.t_thres = cfg.t_thres;
    }
    schedule.c_thres = cfg.c_thres;
    schedule.beta = Some((cfg.c_beta * spec.cluster_size as f64 / spec.epsilon).ln());

    let labeling = ClusterLabeling::designated(base);
    let ddist = match distill::population_ddist(base, &labeling) {
        Ok(d) => d,
        Err(e) => {
            stages.fail("distill", e.to_string());
            return None;
        }
    };
    let (model, _) = match distill::train_distill(&ddist, &schedule) {
        Ok(out) => out,
        Err(e) => {
            stages.fail("distill", e.to_string());
            return None;
        }
    };

    let reps = labeling.reps_by_cluster(base).expect("designated labeling is a transversal");
    let sup = match oracle::meta_kernel_qcirc(base, &reps) {
        Ok(qcirc) => {
            let k = reps.len();
            let mut worst: f64 = 0.0;
            for a in 0..k {
                let probs = model.probs_row(a);
                for b in 0..k {
                    worst = worst.max((probs[b] - qcirc.rows[(a, b)]).abs());
                }
            }
            worst
        }
        Err(e) => {
            stages.fail("distill", e.to_string());
            return None;
        }
    };
    let zplus = distill::rescale(&model, schedule.beta_value());
    let (_, residual) = distill::laziness_identity(&model, &zplus);

    stages.report.distill = Some(DistillStage {
        t_dist: schedule.t_dist,
        t_thres: schedule.t_thres,
        beta: schedule.beta_value(),
        sup_error_vs_meta: sup,
        laziness_residual: residual,
    });
    if sup > stages.config.thresholds.distill_sup_error {
        stages.fail("distill", format!("sup error vs meta-chain {sup:.3e}"));
        return None;
    }
    if residual > stages.config.thresholds.laziness_residual {
        stages.fail("distill", format!("laziness residual {residual:.3e}"));
        return None;
    }
    Some(zplus)
}

fn eval_stage(
    stages: &mut Stages,
    base: &TransitionKernel,
    edges: &kernel::SparseEdgeSet,
    improved: &TransitionKernel,
    distilled: Option<&SoftmaxTable>,
) {
    let cfg = &stages.config.eval;
    let policy = TaskPolicy::new(cfg.task_seed);
    let (x_in, x_out) = match kernel::sample_task(base, edges, &policy) {
        Ok(pair) => pair,
        Err(e) => {
            stages.fail("eval", e.to_string());
            return;
        }
    };
    let horizon = if cfg.horizon > 0 { cfg.horizon } else { dynamics::default_horizon(base) };

    let (base_est, samples) = match dynamics::hitting_time_mc_with_samples(
        base, x_in, &[x_out], horizon, cfg.rollouts, stages.config.seed,
    ) {
        Ok(out) => out,
        Err(e) => {
            stages.fail("eval", e.to_string());
            return;
        }
    };
    let improved_est = match dynamics::hitting_time_mc(
        improved, x_in, &[x_out], horizon, cfg.rollouts, stages.config.seed,
    ) {
        Ok(est) => est,
        Err(e) => {
            stages.fail("eval", e.to_string());
            return;
        }
    };

    let mut distilled_mean_hops = 0.0;
    if let Some(zplus) = distilled {
        let from = base.cluster_of(x_in);
        let to = base.cluster_of(x_out);
        let mut total = 0usize;
        let rollouts = cfg.rollouts.min(1_000);
        for i in 0..rollouts {
            let mut rng = metachain::rng::stream(stages.config.seed ^ 0xd15, i as u64);
            let (seq, _) = distill::distilled_cot(zplus, from, to, 100_000, &mut rng);
            total += seq.len();
        }
        distilled_mean_hops = total as f64 / rollouts as f64;
    }

    let (oracle_base, oracle_improved) = if base.num_states() <= DENSE_GUARD {
        let ob = oracle::expected_hitting_time(base, &[x_out]).ok().map(|h| h[x_in]);
        let oi = oracle::expected_hitting_time(improved, &[x_out]).ok().map(|h| h[x_in]);
        (ob, oi)
    } else {
        (None, None)
    };

    let improvement = base_est.mean / improved_est.mean.max(1.0);
    stages.report.eval = Some(EvalStage {
        x_in,
        x_out,
        base_mean: base_est.mean,
        base_stderr: base_est.stderr,
        base_truncated: base_est.truncation_count,
        improved_mean: improved_est.mean,
        improved_stderr: improved_est.stderr,
        distilled_mean_hops,
        oracle_base,
        oracle_improved,
        improvement,
        raw_base_samples: if cfg.raw_samples { Some(samples) } else { None },
    });

    let eps_max = effective_eps_max(stages.config, &stages.config.graph.spec(stages.config.seed).unwrap());
    let required = stages.config.thresholds.improvement_fraction * eps_max
        / stages.config.graph.epsilon.max(f64::MIN_POSITIVE);
    if improvement < required {
        stages.fail("eval", format!("improvement {improvement:.2} below required {required:.2}"));
    }
    if distilled.is_some() {
        let cap = stages.config.thresholds.distilled_hops_factor * base.num_clusters() as f64;
        if distilled_mean_hops > cap {
            stages.fail("eval", format!("distilled hops {distilled_mean_hops:.1} above {cap:.1}"));
        }
    }
}
