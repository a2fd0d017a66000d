use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::expert::{expert_plan, Primitive};
use super::suite::{SuiteConfig, TaskSpec};
use super::world::WorldState;
use super::{EnvError, Result};

/// One primitive step of an episode: the state before the step and the
/// command applied to it. The final record of an episode holds the terminal
/// state with a no-op command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub task_id: usize,
    pub seed: u64,
    pub step: usize,
    pub state: WorldState,
    pub observation: Vec<String>,
    pub action: Primitive,
    pub gripper_open: bool,
}

/// A scripted demonstration on one seeded scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertDemo {
    pub task: TaskSpec,
    pub seed: u64,
    pub records: Vec<TrajectoryRecord>,
    pub success: bool,
}

impl ExpertDemo {
    /// Primitive steps executed (the terminal record excluded).
    pub fn len(&self) -> usize {
        self.records.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn actions(&self) -> Vec<Primitive> {
        self.records.iter().map(|r| r.action).collect()
    }
}

fn record(task: &TaskSpec, seed: u64, state: &WorldState, action: Primitive) -> TrajectoryRecord {
    TrajectoryRecord {
        task_id: task.id,
        seed,
        step: state.step_count,
        state: state.clone(),
        observation: state.observation(),
        action,
        gripper_open: state.gripper.is_open(),
    }
}

/// Runs the scripted expert one primitive at a time until success or the
/// step limit.
pub fn run_expert(suite: &SuiteConfig, task: &TaskSpec, seed: u64) -> Result<ExpertDemo> {
    let mut state = WorldState::reset(suite, task, seed)?;
    let mut records = Vec::new();
    while !state.done() {
        let plan = expert_plan(&state)?;
        let Some(&action) = plan.first() else {
            return Err(EnvError::ExpertFailure(format!("empty plan on unsolved scene (seed {seed})")));
        };
        records.push(record(task, seed, &state, action));
        state.step_primitive(&action);
    }
    records.push(record(task, seed, &state, [0.0; 3]));
    Ok(ExpertDemo {
        task: task.clone(),
        seed,
        success: state.success(),
        records,
    })
}

pub fn write_records(w: &mut impl Write, records: &[TrajectoryRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_records(r: impl BufRead) -> Result<Vec<TrajectoryRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
