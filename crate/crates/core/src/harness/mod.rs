//! Synthetic data, experiment configuration and end-to-end runs.
//!
//! A run simulates data from a ground-truth image, optionally pre-trains the
//! network on synthetic phantoms and extracts a parameter subspace (both
//! cached on disk by configuration), then optimises with the configured
//! method and stopping rule while logging loss and PSNR at every step.

mod config;
mod phantoms;
mod pipeline;
mod summary;

pub use config::{
    BasisKind, ExperimentConfig, GroundTruthConfig, Method, OptimizerKind, PretrainStage, Seeds, StopConfig,
    StopKind, SubspaceStage, Task,
};
pub use phantoms::{PhantomKind, PhantomSpec, PhantomStream};
pub use pipeline::{
    build_operator, build_problem, extract_subspace, ground_truth, run_pipeline, simulate, training_pairs,
    Pretrained, Problem, RunFailure, RunReport, Session, TraceRow,
};
pub use summary::{
    ablate_basis, basis_variant, compare_methods, scale_header, MethodSummary, Stat, Summary, BASIS_VARIANTS,
};
