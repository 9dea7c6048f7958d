//! Metastable Markov chains as a model of multi-step reasoning.
//!
//! A state space is partitioned into dense, rapidly mixing clusters joined by
//! sparse inter-cluster edges of probability O(ε). The crate builds such
//! kernels, simulates rollouts and stopping times, computes every dynamical
//! quantity exactly at desk scale (stationary measures, hitting times, escape
//! probabilities, stochastic complements, pseudo-spectral gaps, meta-chains),
//! and implements the training pipeline on top: two-stage pretraining of a
//! softmax world model, parallel sparse-edge search, PPO-Clip fine-tuning,
//! meta-chain distillation, and a group-action logic task with the
//! combinatorial hardness constructions.

pub mod distill;
pub mod dynamics;
pub mod kernel;
pub mod logic;
pub mod oracle;
pub mod ppo;
pub mod pretrain;
pub mod rng;
pub mod search;

mod error;

pub use error::{Error, Result};
pub use kernel::{GraphSpec, SparseEdgeSet, SparseTopology, TransitionKernel};

/// Largest state count accepted by the dense oracle routines.
pub const DENSE_GUARD: usize = 4096;
