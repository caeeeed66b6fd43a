//! The annotation loop: seeding, detector-driven refinement, convergence,
//! review and checkpointing.

pub mod checkpoint;
pub mod config;
pub mod experiment;
pub mod iterate;
pub mod prompts;
pub mod review;
pub mod runner;

pub use checkpoint::{CheckpointDir, CheckpointManifest};
pub use config::{PipelineConfig, SeedPrompts};
pub use experiment::{fine_fraction_experiment, FractionMean, FractionReport, FractionRun};
pub use iterate::{
    check_convergence, iteration_delta, run_iteration, seed_annotate, segment_with_retry, select_seed_images,
    training_examples, Convergence,
};
pub use prompts::{benchmark_prompts, sample_point_prompts, truth_prompts, PromptBenchmark, PromptStrategy, StrategyScore};
pub use review::{apply_corrections, CorrectionPayload, FieldError, PromptPoint, ReviewKind, ReviewStatus, ReviewTask};
pub use runner::Pipeline;
