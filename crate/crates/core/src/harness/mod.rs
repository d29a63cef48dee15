//! Experiment plumbing: configuration, trainers, evaluation, sweeps and the
//! files each command reads and writes.

mod adapter;
mod bc;
mod commands;
mod config;
mod eval;
mod metrics;
mod pg;

pub use adapter::{
    artifact_ref, binding_from_header, header, policy_config, resolve, ArtifactFile, Resolved,
    VOCAB_FILE,
};
pub use bc::{batch_loss, first_action, train_bc, BcConfig, BcData};
pub use commands::*;
pub use config::{AsaConfig, AsaKind, ExperimentConfig, SweepAxis, TrainConfig, TrainerKind};
pub use eval::{
    eval_seed, evaluate, evaluate_expert, EvalReport, History, InstructionStats, EVAL_STREAM,
};
pub use metrics::{MetricsLog, Record, Summary, METRICS_HEADER};
pub use pg::{train_pg, valid_probability, PgConfig};
