//! Planning and simulation for training Transformer models on variable-length
//! sequence corpora with heterogeneous parallel strategies.
//!
//! The crate is organized around a per-iteration pipeline:
//!
//! 1. [`workload`] ingests or synthesizes sequence-length corpora and samples
//!    token-budgeted mini-batches.
//! 2. [`scheme`] defines parallel schemes `<TP,PP,CP>` and strategies (linear
//!    combinations of schemes across training pipelines).
//! 3. [`cost`] fits and evaluates the quadratic latency model `T(l, P)`, the
//!    memory-derived capacity `MaxLen(P)`, and the efficiency threshold
//!    `UtilLen(P)`.
//! 4. [`dispatch`] balances a mini-batch across pipelines (exact minimax
//!    branch-and-bound plus a multi-trial greedy solver).
//! 5. [`packing`] partitions each pipeline's sequences into micro-batches
//!    minimizing `max micro-batch time x (PP - 1 + V)`.
//! 6. [`planner`] drives dispatch + packing per candidate strategy and selects
//!    the best one per mini-batch.
//! 7. [`proposal`] builds the candidate strategy set offline via dynamic
//!    programming over (GPU budget, length ceiling).
//! 8. [`comm`] generates pull/push resharding plans between the fully-sharded
//!    optimizer layout and a strategy's propagation layout.
//! 9. [`sim`] replays plans through a 1F1B pipeline schedule and reconciles
//!    simulated latencies against the planner's estimates.
//!
//! Everything runs on CPU; no GPU execution is involved.

pub mod artifact;
pub mod comm;
pub mod cost;
pub mod dispatch;
pub mod packing;
pub mod planner;
pub mod proposal;
pub mod scheme;
pub mod seed;
pub mod sim;
pub mod workload;

pub use cost::CostProfile;
pub use scheme::{ParallelScheme, Strategy};
