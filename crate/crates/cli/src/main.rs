use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use metachain::distill::{self, ClusterLabeling, DistillSchedule};
use metachain::dynamics;
use metachain::kernel::{self, TaskPolicy, ValidationThresholds};
use metachain::logic::{FiniteGroup, LogicInstance, PathPolicy};
use metachain::ppo::{self, PpoSchedule};
use metachain::pretrain::{self, TrainSchedule};
use metachain::search::{self, SearchMode};

use metachain_cli::config::{parse_source_dist, ExperimentConfig};
use metachain_cli::{pipeline, sweep};

#[derive(Parser)]
#[command(name = "metachain", about = "Metastable-chain simulator and training-pipeline runner", version)]
struct Cli {
    /// Configuration file (flat key-value or JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Output format for tabular results.
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Build the kernel and write its text serialization.
    Generate,
    /// Build the kernel and run the assumption validator.
    Validate,
    /// Measure hitting and escape times on a sampled task.
    Simulate,
    /// Run two-stage pretraining; writes the model and error trace.
    Pretrain,
    /// Run sparse-edge search; writes the search report.
    Search,
    /// Fine-tune the base model with PPO-Clip on the planted edges.
    Ppo,
    /// Distill the meta-chain; writes the rescaled model.
    Distill,
    /// Evaluate the group-action logic task on a sampled path.
    LogicEval,
    /// Full pipeline: build, pretrain, search, improve, distill, evaluate.
    Pipeline,
    /// Scaling sweep over the configured (K, M, epsilon) grid.
    Sweep,
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    let config = match load_config(&cli) {
        Ok(config) => config,
        Err(e) => {
            eprintln!("invalid config: {e}");
            return ExitCode::from(3);
        }
    };
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("thread pool: {e}");
        }
    }

    match run(&cli, &config) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            ExperimentConfig::parse(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn out_dir(cli: &Cli) -> anyhow::Result<PathBuf> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write(path: &Path, contents: &str) -> anyhow::Result<()> {
    std::fs::write(path, contents)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn build_kernel(
    config: &ExperimentConfig,
) -> anyhow::Result<(kernel::GraphSpec, kernel::TransitionKernel, kernel::SparseEdgeSet)> {
    let spec = config.graph.spec(config.seed)?;
    let p0 = kernel::build_unperturbed(&spec)?;
    let (k, edges) = kernel::plant_sparse_edges(&p0, &spec)?;
    Ok((spec, k, edges))
}

/// Returns Ok(false) for assertion/acceptance failures (exit code 2).
fn run(cli: &Cli, config: &ExperimentConfig) -> anyhow::Result<bool> {
    match cli.command {
        Command::Generate => {
            let (_, k, _) = build_kernel(config)?;
            let dir = out_dir(cli)?;
            write(&dir.join("kernel.txt"), &kernel::kernel_to_string(&k))?;
            Ok(true)
        }
        Command::Validate => {
            let (spec, k, edges) = build_kernel(config)?;
            let report =
                kernel::validate_assumptions(&k, &edges, &spec, &ValidationThresholds::default());
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(report.all_passed())
        }
        Command::Simulate => {
            let (spec, k, edges) = build_kernel(config)?;
            let (x_in, x_out) =
                kernel::sample_task(&k, &edges, &TaskPolicy::new(config.eval.task_seed))?;
            let horizon = if config.eval.horizon > 0 {
                config.eval.horizon
            } else {
                dynamics::default_horizon(&k)
            };
            let hit = dynamics::hitting_time_mc(
                &k, x_in, &[x_out], horizon, config.eval.rollouts, config.seed,
            )?;
            let escape = dynamics::escape_time_mc(
                &k,
                x_in,
                k.cluster_of(x_in),
                horizon,
                config.eval.rollouts,
                config.seed ^ 1,
            )?;
            match cli.format {
                Format::Csv => {
                    println!("{}", dynamics::estimate_csv_header());
                    println!(
                        "{}",
                        dynamics::estimate_csv_row("hitting", &k, x_in, &x_out.to_string(), &hit)
                    );
                    println!(
                        "{}",
                        dynamics::estimate_csv_row(
                            "escape",
                            &k,
                            x_in,
                            &format!("outside-cluster-{}", k.cluster_of(x_in)),
                            &escape
                        )
                    );
                }
                Format::Json => {
                    let value = serde_json::json!({
                        "K": spec.num_clusters,
                        "M": spec.cluster_size,
                        "epsilon": spec.epsilon,
                        "task": [x_in, x_out],
                        "hitting": hit,
                        "escape": escape,
                    });
                    println!("{}", serde_json::to_string_pretty(&value)?);
                }
            }
            Ok(true)
        }
        Command::Pretrain => {
            let (spec, k, _) = build_kernel(config)?;
            let mut schedule = if config.pretrain.t1 == 0 || config.pretrain.t2 == 0 {
                TrainSchedule::paper(spec.num_clusters, spec.cluster_size, spec.epsilon.max(1e-3))
            } else {
                TrainSchedule::new(config.pretrain.t1, config.pretrain.t2)
            };
            schedule.c_thres = config.pretrain.c_thres;
            schedule.source_dist = parse_source_dist(&config.pretrain.source_dist)?;
            if config.pretrain.trace_every > 0 {
                schedule.trace_every = config.pretrain.trace_every;
            }
            let (model, trace) = pretrain::train_two_stage(&k, &schedule)?;
            let dir = out_dir(cli)?;
            write(&dir.join("model.txt"), &model.to_text())?;
            write(&dir.join("pretrain_trace.csv"), &pretrain::trace_to_csv(&trace))?;
            let sup = pretrain::sup_error(&model, &k);
            println!("sup error {sup:.3e}");
            Ok(sup <= config.thresholds.pretrain_error_factor * spec.epsilon)
        }
        Command::Search => {
            let (spec, k, _) = build_kernel(config)?;
            let defaults =
                search::default_schedule(spec.num_clusters, spec.cluster_size, spec.epsilon);
            let schedule = search::SearchSchedule {
                rounds: if config.search.rounds > 0 { config.search.rounds } else { defaults.rounds },
                num_rollouts: if config.search.num_rollouts > 0 {
                    config.search.num_rollouts
                } else {
                    defaults.num_rollouts
                },
                t0: if config.search.t0 > 0 { config.search.t0 } else { defaults.t0 },
                t_max: if config.search.t_max > 0 { config.search.t_max } else { defaults.t_max },
                mode: if config.search.mode.eq_ignore_ascii_case("rl") {
                    let mut ppo_schedule = PpoSchedule::new(spec.epsilon_max().max(2.0 * spec.epsilon));
                    ppo_schedule.alpha_coeff = config.ppo.alpha_coeff;
                    SearchMode::Rl(ppo_schedule)
                } else {
                    SearchMode::Prm
                },
                source_dist: parse_source_dist(&config.search.source_dist)?,
            };
            let out = search::run_search(&k, &schedule, config.seed)?;
            let dir = out_dir(cli)?;
            write(&dir.join("search_report.json"), &serde_json::to_string_pretty(&out.report)?)?;
            if let Some(model) = &out.model {
                write(&dir.join("model_rl.txt"), &model.to_text())?;
            }
            println!("M_s = {:?}, equals planted: {}", out.m_s, out.report.equals_planted);
            Ok(true)
        }
        Command::Ppo => {
            let (spec, k, edges) = build_kernel(config)?;
            let eps_max = if config.ppo.epsilon_max > 0.0 {
                config.ppo.epsilon_max
            } else {
                spec.epsilon_max().max(2.0 * spec.epsilon)
            };
            let mut schedule = PpoSchedule::new(eps_max);
            schedule.alpha_coeff = config.ppo.alpha_coeff;
            schedule.sign_gradient = config.ppo.sign_gradient;
            let model = pretrain::SoftmaxTable::from_kernel(&k);
            let (tuned, trace) = ppo::run_ppo(&model, &k, &edges.pairs(), &schedule)?;
            let dir = out_dir(cli)?;
            write(&dir.join("ppo_trace.csv"), &ppo::ppo_trace_csv(&trace))?;
            write(&dir.join("model_ppo.txt"), &tuned.to_text())?;
            println!("TV change {:.4e}", ppo::tv_change(&model, &tuned));
            Ok(true)
        }
        Command::Distill => {
            let (spec, k, _) = build_kernel(config)?;
            let mut schedule =
                DistillSchedule::paper(spec.num_clusters, spec.cluster_size, spec.epsilon);
            if config.distill.t_dist > 0 {
                schedule.t_dist = config.distill.t_dist;
            }
            if config.distill.t_thres > 0 {
                schedule.t_thres = config.distill.t_thres;
            }
            schedule.c_thres = config.distill.c_thres;
            schedule.beta =
                Some((config.distill.c_beta * spec.cluster_size as f64 / spec.epsilon).ln());
            let labeling = ClusterLabeling::designated(&k);
            let ddist = distill::population_ddist(&k, &labeling)?;
            let (z, trace) = distill::train_distill(&ddist, &schedule)?;
            let zplus = distill::rescale(&z, schedule.beta_value());
            let reps = labeling.reps_by_cluster(&k)?;
            let dir = out_dir(cli)?;
            write(
                &dir.join("distilled.txt"),
                &distill::distilled_to_string(&zplus, &reps, schedule.beta_value()),
            )?;
            write(&dir.join("distill_trace.csv"), &pretrain::trace_to_csv(&trace))?;
            let (_, residual) = distill::laziness_identity(&z, &zplus);
            println!("laziness residual {residual:.3e}");
            Ok(residual <= config.thresholds.laziness_residual)
        }
        Command::LogicEval => {
            let (_, k, edges) = build_kernel(config)?;
            let instance = LogicInstance::new(
                FiniteGroup::cyclic(4),
                &edges,
                k.num_states(),
                config.seed,
            )?;
            instance.verify_zero_mean()?;
            let (x_in, x_out) =
                kernel::sample_task(&k, &edges, &TaskPolicy::new(config.eval.task_seed))?;
            let policy = PathPolicy {
                horizon: dynamics::default_horizon(&k),
                seed: config.seed,
            };
            let path = metachain::logic::task_path(&k, x_in, x_out, &policy)?;
            let (value, label) = metachain::logic::path_logic(&instance, &k, &path)?;
            let report = serde_json::json!({
                "task": [x_in, x_out],
                "path_len": path.len(),
                "sparse_crossings": path.sparse_crossings.len(),
                "logic_value": value,
                "label": label,
            });
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(true)
        }
        Command::Pipeline => {
            let report = pipeline::run_pipeline(config)?;
            let dir = out_dir(cli)?;
            write(&dir.join("pipeline_report.json"), &report.to_json())?;
            if let Some(stage) = &report.failed_stage {
                eprintln!("pipeline failed at stage {stage}: {:?}", report.message);
            }
            Ok(report.passed)
        }
        Command::Sweep => {
            let output = sweep::run_scaling_sweep(config)?;
            let dir = out_dir(cli)?;
            write(&dir.join("sweep.csv"), &output.csv)?;
            write(&dir.join("sweep_fits.json"), &serde_json::to_string_pretty(&output.fits)?)?;
            for (name, body) in &output.charts {
                write(&dir.join(name), body)?;
            }
            Ok(true)
        }
    }
}
