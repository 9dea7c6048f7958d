//! Configuration-driven experiment runner binding the simulator modules:
//! full pipeline runs (build, pretrain, search, fine-tune, distill, measure)
//! and scaling sweeps over (K, M, ε) grids.

pub mod config;
pub mod pipeline;
pub mod svg;
pub mod sweep;

pub use config::ExperimentConfig;
pub use pipeline::{run_pipeline, PipelineReport};
pub use sweep::{run_scaling_sweep, SweepOutput};
