//! Symbolic grid-world pick-and-place simulator with a scripted expert.

mod expert;
mod suite;
mod trajectory;
mod world;

use thiserror::Error;

pub use expert::{chunk_from_plan, expert_chunk, expert_plan, Primitive, CLOSE, OPEN};
pub use suite::{Cell, SuiteConfig, TaskSpec, Zone};
pub use trajectory::{read_records, run_expert, write_records, ExpertDemo, TrajectoryRecord};
pub use world::{quantize, Gripper, Object, StepResult, WorldState, ACTION_THRESHOLD};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid suite: {0}")]
    Suite(String),
    #[error("could not place task {task} after {attempts} attempts")]
    Placement { task: String, attempts: u64 },
    #[error("bad action chunk: {0}")]
    Chunk(String),
    #[error("expert failed: {0}")]
    ExpertFailure(String),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, EnvError>;
