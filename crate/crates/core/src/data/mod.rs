//! Reasoning-annotated dataset construction from scripted demonstrations.

mod annotate;
mod dataset;
mod schema;

use thiserror::Error;

pub use annotate::{
    annotate_keyframe, cot_template, cot_words, extract_keyframes, phase_of_cot, propagate_annotations, Annotation,
    DemoFrame, DemoTrajectory, Phase,
};
pub use dataset::{
    build_dataset, demo_seed, policy_vocab, read_manifest, read_records, records_for_demo, write_dataset, CotRecord,
    DataConfig, Dataset, Manifest, Source, DATASET_FILE, MANIFEST_FILE, TRAJECTORY_FILE,
};
pub use schema::{check_temporal_consistency, validate_schema, validate_schema_ids, SchemaViolation, TemporalReport};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset not found: {0}")]
    Missing(String),
    #[error("corrupt dataset record {index}: {message}")]
    Corrupt { index: usize, message: String },
    #[error(transparent)]
    Env(#[from] crate::env::EnvError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;
