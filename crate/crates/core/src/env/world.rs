use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::suite::{Cell, SuiteConfig, TaskSpec, Zone};
use super::{EnvError, Result};
use crate::model::ActionChunk;

/// Dead-zone threshold for every action dimension.
pub const ACTION_THRESHOLD: f64 = 1.0 / 3.0;

const MAX_PLACEMENT_ATTEMPTS: u64 = 100;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Object {
    pub name: String,
    pub cell: Cell,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gripper {
    pub cell: Cell,
    pub closed: bool,
    /// Index of the carried object.
    pub held: Option<usize>,
}

impl Gripper {
    pub fn is_open(&self) -> bool {
        !self.closed
    }

    /// Observation word for the gripper: `open`, `closed` or `holding`.
    pub fn state_word(&self) -> &'static str {
        match (self.closed, self.held) {
            (_, Some(_)) => "holding",
            (true, None) => "closed",
            (false, None) => "open",
        }
    }
}

/// Full simulator state. Object 0 is always the task object.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldState {
    pub width: i32,
    pub height: i32,
    pub objects: Vec<Object>,
    pub target_zone: Zone,
    pub gripper: Gripper,
    pub step_count: usize,
    pub max_steps: usize,
}

/// Outcome of executing one chunk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepResult {
    pub observation: Vec<String>,
    pub done: bool,
    pub success: bool,
    /// Primitive steps actually executed.
    pub executed: usize,
}

/// Per-dimension move from a continuous command.
pub fn quantize(v: f64) -> i32 {
    if v > ACTION_THRESHOLD {
        1
    } else if v < -ACTION_THRESHOLD {
        -1
    } else {
        0
    }
}

fn sub_seed(seed: u64, attempt: u64) -> u64 {
    seed ^ attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl WorldState {
    /// Seeded initial scene for `task`. Placements that violate a scene
    /// constraint are redrawn from the next sub-seed.
    pub fn reset(suite: &SuiteConfig, task: &TaskSpec, seed: u64) -> Result<Self> {
        let zone = suite
            .zones
            .get(task.zone)
            .ok_or_else(|| EnvError::Suite(format!("task {} names missing zone {}", task.name, task.zone)))?;
        let target = suite
            .objects
            .get(task.object)
            .ok_or_else(|| EnvError::Suite(format!("task {} names missing object {}", task.name, task.object)))?;
        let [w, h] = suite.grid;
        for attempt in 0..MAX_PLACEMENT_ATTEMPTS {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, attempt));
            let mut draw = || Cell::new(rng.random_range(0..w), rng.random_range(0..h));
            let gripper = draw();
            let mut cells = vec![draw()];
            for _ in 0..suite.distractors {
                cells.push(draw());
            }
            let distinct = cells.iter().enumerate().all(|(i, c)| !cells[..i].contains(c));
            let placeable = distinct && cells.iter().all(|&c| !zone.contains(c)) && cells[0] != gripper;
            if !placeable {
                continue;
            }
            let mut others: Vec<&String> = suite.objects.iter().filter(|o| *o != target).collect();
            others.shuffle(&mut rng);
            let names = std::iter::once(target).chain(others);
            let objects = names
                .zip(cells)
                .map(|(n, cell)| Object { name: n.clone(), cell })
                .collect();
            return Ok(Self {
                width: w,
                height: h,
                objects,
                target_zone: zone.clone(),
                gripper: Gripper {
                    cell: gripper,
                    closed: false,
                    held: None,
                },
                step_count: 0,
                max_steps: task.max_steps,
            });
        }
        Err(EnvError::Placement {
            task: task.name.clone(),
            attempts: MAX_PLACEMENT_ATTEMPTS,
        })
    }

    pub fn in_bounds(&self, c: Cell) -> bool {
        (0..self.width).contains(&c.x) && (0..self.height).contains(&c.y)
    }

    pub fn target(&self) -> &Object {
        &self.objects[0]
    }

    /// Index of the resting (not carried) object at `c`.
    pub fn object_at(&self, c: Cell) -> Option<usize> {
        self.objects
            .iter()
            .enumerate()
            .find(|(i, o)| o.cell == c && self.gripper.held != Some(*i))
            .map(|(i, _)| i)
    }

    /// Task predicate: target object resting inside the target zone.
    pub fn success(&self) -> bool {
        self.gripper.held != Some(0) && self.target_zone.contains(self.target().cell)
    }

    pub fn done(&self) -> bool {
        self.success() || self.step_count >= self.max_steps
    }

    /// `gripper <cell> <state> {<object> <cell>} zone <lo> <hi>`.
    pub fn observation(&self) -> Vec<String> {
        let mut obs = vec![
            "gripper".to_string(),
            self.gripper.cell.token(),
            self.gripper.state_word().to_string(),
        ];
        for o in &self.objects {
            obs.push(o.name.clone());
            obs.push(o.cell.token());
        }
        obs.push("zone".into());
        obs.push(self.target_zone.lo_cell().token());
        obs.push(self.target_zone.hi_cell().token());
        obs
    }

    /// One primitive step: move, then apply the grip command.
    pub fn step_primitive(&mut self, action: &[f64]) {
        let (dx, dy, grip) = (quantize(action[0]), quantize(action[1]), quantize(action[2]));
        let next = Cell::new(self.gripper.cell.x + dx, self.gripper.cell.y + dy);
        let blocked = match self.gripper.held {
            Some(_) => self.object_at(next).is_some(),
            None => false,
        };
        if (dx, dy) != (0, 0) && self.in_bounds(next) && !blocked {
            self.gripper.cell = next;
            if let Some(i) = self.gripper.held {
                self.objects[i].cell = next;
            }
        }
        if grip > 0 && !self.gripper.closed {
            self.gripper.closed = true;
            self.gripper.held = self.object_at(self.gripper.cell);
        } else if grip < 0 && self.gripper.closed {
            self.gripper.closed = false;
            self.gripper.held = None;
        }
        self.step_count += 1;
    }

    /// Executes up to `h` primitive steps, stopping early on success or at
    /// the step limit.
    pub fn step_chunk(&mut self, chunk: &ActionChunk) -> Result<StepResult> {
        if chunk.dims != 3 {
            return Err(EnvError::Chunk(format!("expected 3 action dims, got {}", chunk.dims)));
        }
        let mut executed = 0;
        for i in 0..chunk.horizon {
            if self.done() {
                break;
            }
            self.step_primitive(chunk.step(i));
            executed += 1;
        }
        Ok(StepResult {
            observation: self.observation(),
            done: self.done(),
            success: self.success(),
            executed,
        })
    }

    /// Debug rendering, top row first. `G` marks the gripper (`g` when
    /// open), objects use their initial letter, `:` marks zone cells.
    pub fn ascii(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for WorldState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for y in (0..self.height).rev() {
            let row: String = (0..self.width)
                .map(|x| {
                    let c = Cell::new(x, y);
                    if self.gripper.cell == c {
                        if self.gripper.closed {
                            'G'
                        } else {
                            'g'
                        }
                    } else if let Some(i) = self.object_at(c) {
                        self.objects[i].name.chars().next().unwrap_or('?')
                    } else if self.target_zone.contains(c) {
                        ':'
                    } else {
                        '.'
                    }
                })
                .collect();
            writeln!(f, "{row}")?;
        }
        write!(f, "step {} gripper {}", self.step_count, self.gripper.state_word())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ActionTokenizer;

    fn tok() -> ActionTokenizer {
        ActionTokenizer::new(256).unwrap()
    }

    fn scene(gripper: Cell, object: Cell) -> WorldState {
        let suite = SuiteConfig::default();
        let task = &suite.tasks()[0];
        let mut s = WorldState::reset(&suite, task, 0).unwrap();
        s.gripper.cell = gripper;
        s.objects[0].cell = object;
        s
    }

    #[test]
    fn zero_chunk_only_counts_steps() {
        let mut s = scene(Cell::new(3, 3), Cell::new(4, 1));
        let before = s.clone();
        let r = s.step_chunk(&ActionChunk::zeros(5, 3, &tok())).unwrap();
        assert_eq!(s.step_count, 5);
        s.step_count = 0;
        assert_eq!(s, before);
        assert!(!r.done);
    }

    #[test]
    fn wall_moves_are_noops() {
        let mut s = scene(Cell::new(0, 0), Cell::new(4, 1));
        s.step_primitive(&[-1.0, -1.0, 0.0]);
        assert_eq!(s.gripper.cell, Cell::new(0, 0));
    }

    #[test]
    fn observation_length() {
        let s = scene(Cell::new(0, 0), Cell::new(4, 1));
        assert_eq!(s.observation().len(), SuiteConfig::observation_len(1));
    }

    #[test]
    fn closing_on_empty_cell_holds_nothing() {
        let mut s = scene(Cell::new(0, 0), Cell::new(4, 1));
        s.step_primitive(&[0.0, 0.0, 1.0]);
        assert_eq!(s.gripper.state_word(), "closed");
    }

    #[test]
    fn display_marks_gripper_and_object() {
        let s = scene(Cell::new(0, 0), Cell::new(4, 1));
        let text = s.ascii();
        let rows: Vec<&str> = text.lines().collect();
        assert_eq!(&rows[6][..1], "g");
        assert_eq!(&rows[5][4..5], "b");
        assert_eq!(&rows[0][..2], "::");
    }
}
