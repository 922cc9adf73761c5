//! Explanation-free interpretability scoring for sparse-coder latents.
//!
//! The crate is organised around the flow of evidence:
//!
//! * [`activation_store`] ingests per-token activation dumps and builds
//!   per-latent decile profiles.
//! * [`task_builder`] turns profiles into five-example intruder tasks.
//! * [`llm_evaluator`] asks a chat-completion endpoint to find the intruder.
//! * [`embedding_scorer`] scores latents by how well activating examples
//!   cluster in sentence-embedding space.
//! * [`scoring_stats`] aggregates verdicts into accuracies, bins, decile
//!   matrices and evaluator agreement tables.
//! * [`synthetic_bench`] plants latents with known behaviour so every stage
//!   can be checked offline.
//! * [`annotation_service`] serves tasks to human annotators over HTTP.

pub mod activation_store;
pub mod annotation_service;
pub mod embedding_scorer;
mod error;
pub mod jsonl;
pub mod llm_evaluator;
pub mod scoring_stats;
pub mod seeding;
pub mod synthetic_bench;
pub mod task_builder;
pub mod verdict;

pub use activation_store::{ActivationRecord, ActivationStore, LatentProfile, TokenizedContext};
pub use error::{Error, Result};
pub use task_builder::{IntruderTask, RenderedExample, TaskVariant};
pub use verdict::Verdict;

/// Number of examples shown in one intruder task.
pub const EXAMPLES_PER_TASK: usize = 5;

/// Number of activation-strength deciles.
pub const NUM_DECILES: usize = 10;

/// Default context window length, in tokens.
pub const WINDOW_LEN: usize = 32;
