//! Experiment configuration: a flat `section.key = value` text format chosen
//! for diff-friendliness, with a JSON mirror accepted interchangeably.

use metachain::kernel::{GraphSpec, SparseTopology};
use metachain::pretrain::SourceDist;
use metachain::{Error, Result};
use serde::{Deserialize, Serialize};

/// Versioned acceptance thresholds; every gate the pipeline applies lives
/// here and is overridable per run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    pub version: String,
    /// Pretraining gate: sup|p_hat - p| must fall below factor * epsilon.
    pub pretrain_error_factor: f64,
    /// Distillation gate on sup|q_hat - q_circle|.
    pub distill_sup_error: f64,
    /// Laziness-identity residual gate.
    pub laziness_residual: f64,
    /// Distilled rollouts must hit within factor * K hops on average.
    pub distilled_hops_factor: f64,
    /// Required hitting-time improvement as a fraction of epsilon_max/epsilon.
    pub improvement_fraction: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            version: "1".into(),
            pretrain_error_factor: 0.125,
            distill_sup_error: 1e-6,
            laziness_residual: 1e-9,
            distilled_hops_factor: 10.0,
            improvement_fraction: 0.3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphConfig {
    pub k: usize,
    pub m: usize,
    pub epsilon: f64,
    /// cycle | bicycle | random:<d> | explicit:<a-b,c-d,...>
    pub topology: String,
    pub d_out: usize,
    pub n_out: usize,
    pub sparse_lower_frac: f64,
    pub inbound_targets: bool,
    pub cluster_sizes: Vec<usize>,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            k: 2,
            m: 4,
            epsilon: 0.05,
            topology: "cycle".into(),
            d_out: 1,
            n_out: 2,
            sparse_lower_frac: 0.5,
            inbound_targets: false,
            cluster_sizes: Vec::new(),
        }
    }
}

impl GraphConfig {
    pub fn topology(&self) -> Result<SparseTopology> {
        let t = self.topology.trim();
        if t.eq_ignore_ascii_case("cycle") {
            return Ok(SparseTopology::Cycle);
        }
        if t.eq_ignore_ascii_case("bicycle") || t.eq_ignore_ascii_case("bidirectional-cycle") {
            return Ok(SparseTopology::BidirectionalCycle);
        }
        if let Some(d) = t.strip_prefix("random:") {
            let out_degree: usize =
                d.parse().map_err(|_| Error::Parse(format!("bad random degree {d}")))?;
            return Ok(SparseTopology::RandomRegular { out_degree });
        }
        if let Some(list) = t.strip_prefix("explicit:") {
            let mut pairs = Vec::new();
            for item in list.split(',').filter(|s| !s.trim().is_empty()) {
                let (a, b) = item
                    .split_once('-')
                    .ok_or_else(|| Error::Parse(format!("bad pair {item}")))?;
                pairs.push((
                    a.trim().parse().map_err(|_| Error::Parse(format!("bad pair {item}")))?,
                    b.trim().parse().map_err(|_| Error::Parse(format!("bad pair {item}")))?,
                ));
            }
            return Ok(SparseTopology::Explicit(pairs));
        }
        Err(Error::Parse(format!("unknown topology {t}")))
    }

    pub fn spec(&self, seed: u64) -> Result<GraphSpec> {
        let mut spec = GraphSpec::new(self.k, self.m, self.epsilon, seed)
            .with_topology(self.topology()?)
            .with_caps(self.d_out, self.n_out);
        spec.sparse_lower_frac = self.sparse_lower_frac;
        spec.inbound_targets = self.inbound_targets;
        if !self.cluster_sizes.is_empty() {
            spec.cluster_sizes = Some(self.cluster_sizes.clone());
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    /// 0 selects the schedule at the theoretical scale.
    pub t1: usize,
    pub t2: usize,
    pub c_thres: f64,
    /// uniform | stationary
    pub source_dist: String,
    pub trace_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            t1: 0,
            t2: 0,
            c_thres: 0.25,
            source_dist: "uniform".into(),
            trace_every: 0,
        }
    }
}

pub fn parse_source_dist(s: &str) -> Result<SourceDist> {
    match s.trim().to_ascii_lowercase().as_str() {
        "uniform" => Ok(SourceDist::Uniform),
        "stationary" => Ok(SourceDist::Stationary),
        other => Err(Error::Parse(format!("unknown source distribution {other}"))),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    /// 0 selects the default schedule value.
    pub rounds: usize,
    pub num_rollouts: usize,
    pub t0: usize,
    pub t_max: usize,
    /// prm | rl
    pub mode: String,
    pub source_dist: String,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            rounds: 0,
            num_rollouts: 0,
            t0: 0,
            t_max: 0,
            mode: "prm".into(),
            source_dist: "uniform".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    /// 0 selects epsilon_max(M) from the graph spec.
    pub epsilon_max: f64,
    pub alpha_coeff: f64,
    pub sign_gradient: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig { epsilon_max: 0.0, alpha_coeff: 0.05, sign_gradient: true }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    /// 0 selects the schedule at the theoretical scale.
    pub t_dist: usize,
    pub t_thres: usize,
    pub c_thres: f64,
    /// Off-diagonal rescale coefficient: e^beta = c_beta * M / epsilon.
    pub c_beta: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig { t_dist: 0, t_thres: 0, c_thres: 0.25, c_beta: 1.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub rollouts: usize,
    /// 0 selects the default horizon 50 K M / epsilon.
    pub horizon: usize,
    pub task_seed: u64,
    /// Carry the per-rollout durations in the report.
    pub raw_samples: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { rollouts: 400, horizon: 0, task_seed: 9, raw_samples: false }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub k: Vec<usize>,
    pub m: Vec<usize>,
    pub epsilon: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub graph: GraphConfig,
    pub pretrain: PretrainConfig,
    pub search: SearchConfig,
    pub ppo: PpoConfig,
    pub distill: DistillConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub thresholds: Thresholds,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            graph: GraphConfig::default(),
            pretrain: PretrainConfig::default(),
            search: SearchConfig::default(),
            ppo: PpoConfig::default(),
            distill: DistillConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
            thresholds: Thresholds::default(),
            seed: 7,
        }
    }
}

impl ExperimentConfig {
    /// Parses either the flat key-value format or its JSON mirror.
    pub fn parse(text: &str) -> Result<Self> {
        if text.trim_start().starts_with('{') {
            return serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()));
        }
        let mut config = ExperimentConfig::default();
        for (line_no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: missing '='", line_no + 1)))?;
            config
                .apply(key.trim(), value.trim())
                .map_err(|e| Error::Parse(format!("line {}: {e}", line_no + 1)))?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.graph.spec(self.seed)?;
        parse_source_dist(&self.pretrain.source_dist)?;
        parse_source_dist(&self.search.source_dist)?;
        match self.search.mode.to_ascii_lowercase().as_str() {
            "prm" | "rl" => {}
            other => return Err(Error::Parse(format!("unknown search mode {other}"))),
        }
        if self.eval.rollouts == 0 {
            return Err(Error::InvalidSpec("eval.rollouts must be positive".into()));
        }
        Ok(())
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Parse(format!("bad number {v}")))
        }
        fn flag(v: &str) -> Result<bool> {
            match v.to_ascii_lowercase().as_str() {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                other => Err(Error::Parse(format!("bad flag {other}"))),
            }
        }
        fn list<T: std::str::FromStr>(v: &str) -> Result<Vec<T>> {
            v.split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| s.trim().parse().map_err(|_| Error::Parse(format!("bad list item {s}"))))
                .collect()
        }
        match key {
            "graph.K" | "graph.k" => self.graph.k = num(value)?,
            "graph.M" | "graph.m" => self.graph.m = num(value)?,
            "graph.epsilon" => self.graph.epsilon = num(value)?,
            "graph.topology" => self.graph.topology = value.to_string(),
            "graph.d_out" => self.graph.d_out = num(value)?,
            "graph.n_out" => self.graph.n_out = num(value)?,
            "graph.sparse_lower_frac" => self.graph.sparse_lower_frac = num(value)?,
            "graph.inbound_targets" => self.graph.inbound_targets = flag(value)?,
            "graph.cluster_sizes" => self.graph.cluster_sizes = list(value)?,
            "graph.seed" | "seed" => self.seed = num(value)?,
            "pretrain.t1" => self.pretrain.t1 = num(value)?,
            "pretrain.t2" => self.pretrain.t2 = num(value)?,
            "pretrain.c_thres" => self.pretrain.c_thres = num(value)?,
            "pretrain.source_dist" => self.pretrain.source_dist = value.to_string(),
            "pretrain.trace_every" => self.pretrain.trace_every = num(value)?,
            "search.rounds" => self.search.rounds = num(value)?,
            "search.num_rollouts" => self.search.num_rollouts = num(value)?,
            "search.t0" => self.search.t0 = num(value)?,
            "search.t_max" => self.search.t_max = num(value)?,
            "search.mode" => self.search.mode = value.to_string(),
            "search.source_dist" => self.search.source_dist = value.to_string(),
            "ppo.epsilon_max" => self.ppo.epsilon_max = num(value)?,
            "ppo.alpha_coeff" => self.ppo.alpha_coeff = num(value)?,
            "ppo.sign_gradient" => self.ppo.sign_gradient = flag(value)?,
            "distill.t_dist" => self.distill.t_dist = num(value)?,
            "distill.t_thres" => self.distill.t_thres = num(value)?,
            "distill.c_thres" => self.distill.c_thres = num(value)?,
            "distill.c_beta" => self.distill.c_beta = num(value)?,
            "eval.rollouts" => self.eval.rollouts = num(value)?,
            "eval.horizon" => self.eval.horizon = num(value)?,
            "eval.task_seed" => self.eval.task_seed = num(value)?,
            "eval.raw_samples" => self.eval.raw_samples = flag(value)?,
            "sweep.K" | "sweep.k" => self.sweep.k = list(value)?,
            "sweep.M" | "sweep.m" => self.sweep.m = list(value)?,
            "sweep.epsilon" => self.sweep.epsilon = list(value)?,
            "thresholds.version" => self.thresholds.version = value.to_string(),
            "thresholds.pretrain_error_factor" => {
                self.thresholds.pretrain_error_factor = num(value)?
            }
            "thresholds.distill_sup_error" => self.thresholds.distill_sup_error = num(value)?,
            "thresholds.laziness_residual" => self.thresholds.laziness_residual = num(value)?,
            "thresholds.distilled_hops_factor" => {
                self.thresholds.distilled_hops_factor = num(value)?
            }
            "thresholds.improvement_fraction" => {
                self.thresholds.improvement_fraction = num(value)?
            }
            other => return Err(Error::Parse(format!("unknown key {other}"))),
        }
        Ok(())
    }
}
