use std::fmt;

use serde::{Deserialize, Serialize};

use crate::env::{chunk_from_plan, ExpertDemo, WorldState};
use crate::model::{ActionChunk, ActionTokenizer, Special};

/// Subtask stages, in the only order they may appear along a demo.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Approach,
    Grasp,
    Transport,
    Release,
    Finish,
}

impl Phase {
    pub const ALL: [Phase; 5] = [
        Phase::Approach,
        Phase::Grasp,
        Phase::Transport,
        Phase::Release,
        Phase::Finish,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Phase::Approach => "approach",
            Phase::Grasp => "grasp",
            Phase::Transport => "transport",
            Phase::Release => "release",
            Phase::Finish => "finish",
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.word() == w)
    }

    /// Stage implied by the ground-truth state.
    pub fn of_state(s: &WorldState) -> Self {
        if s.success() {
            Phase::Finish
        } else if s.gripper.held == Some(0) {
            if s.target_zone.contains(s.gripper.cell) {
                Phase::Release
            } else {
                Phase::Transport
            }
        } else if s.gripper.cell == s.target().cell && s.gripper.is_open() {
            Phase::Grasp
        } else {
            Phase::Approach
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.word())
    }
}

/// Words used by reasoning traces beyond the observation vocabulary.
pub fn cot_words() -> Vec<String> {
    let mut w: Vec<String> = ["gripper", "at", ";", "subtask"].map(String::from).to_vec();
    w.extend(Phase::ALL.iter().map(|p| p.word().to_string()));
    w
}

/// `<think> gripper at (x,y) ; <obj> at (u,v) ; subtask <phase> </think>`.
pub fn cot_template(s: &WorldState, phase: Phase) -> Vec<String> {
    let target = s.target();
    [
        Special::ThinkOpen.text(),
        "gripper",
        "at",
        &s.gripper.cell.token(),
        ";",
        &target.name,
        "at",
        &target.cell.token(),
        ";",
        "subtask",
        phase.word(),
        Special::ThinkClose.text(),
    ]
    .map(String::from)
    .to_vec()
}

/// Phase word of a templated trace.
pub fn phase_of_cot<S: AsRef<str>>(cot: &[S]) -> Option<Phase> {
    let i = cot.iter().position(|t| t.as_ref() == "subtask")?;
    Phase::from_word(cot.get(i + 1)?.as_ref())
}

/// One frame of a demonstration: the state, the gripper flag and the
/// chunk of upcoming expert commands.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoFrame {
    pub state: WorldState,
    pub observation: Vec<String>,
    pub gripper_open: bool,
    pub chunk: ActionChunk,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoTrajectory {
    pub task_id: usize,
    pub instruction: Vec<String>,
    pub seed: u64,
    pub frames: Vec<DemoFrame>,
    pub success: bool,
}

impl DemoTrajectory {
    /// Frame `t` carries the expert commands `t..t+horizon`, zero-padded.
    pub fn from_demo(demo: &ExpertDemo, horizon: usize, tok: &ActionTokenizer) -> Self {
        let actions = demo.actions();
        let frames = demo
            .records
            .iter()
            .enumerate()
            .map(|(t, r)| DemoFrame {
                state: r.state.clone(),
                observation: r.observation.clone(),
                gripper_open: r.gripper_open,
                chunk: chunk_from_plan(&actions[t..actions.len() - 1], horizon, tok),
            })
            .collect();
        Self {
            task_id: demo.task.id,
            instruction: demo.task.instruction.clone(),
            seed: demo.seed,
            frames,
            success: demo.success,
        }
    }
}

/// Frame 0, every gripper-flag change, and the last frame; sorted, unique.
pub fn extract_keyframes(gripper_open: &[bool]) -> Vec<usize> {
    if gripper_open.is_empty() {
        return Vec::new();
    }
    let mut keys = vec![0];
    keys.extend((1..gripper_open.len()).filter(|&i| gripper_open[i] != gripper_open[i - 1]));
    keys.push(gripper_open.len() - 1);
    keys.dedup();
    keys
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Annotation {
    pub phase: Phase,
    pub cot: Vec<String>,
}

/// Oracle annotation of a keyframe from its ground-truth state.
pub fn annotate_keyframe(traj: &DemoTrajectory, index: usize) -> Annotation {
    let state = &traj.frames[index].state;
    let phase = Phase::of_state(state);
    Annotation {
        phase,
        cot: cot_template(state, phase),
    }
}

/// Every frame takes the stage of the closest keyframe at or before it,
/// with its own positions filled into the template.
pub fn propagate_annotations(traj: &DemoTrajectory, keyframes: &[(usize, Annotation)]) -> Vec<Annotation> {
    let mut out = Vec::with_capacity(traj.frames.len());
    let mut k = 0;
    for (t, frame) in traj.frames.iter().enumerate() {
        while k + 1 < keyframes.len() && keyframes[k + 1].0 <= t {
            k += 1;
        }
        let (key_t, key) = &keyframes[k];
        debug_assert!(*key_t <= t, "frame 0 is always a keyframe");
        if *key_t == t {
            out.push(key.clone());
        } else {
            out.push(Annotation {
                phase: key.phase,
                cot: cot_template(&frame.state, key.phase),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keyframe_edge_cases() {
        assert_eq!(extract_keyframes(&[true]), vec![0]);
        assert_eq!(extract_keyframes(&[true, true, true]), vec![0, 2]);
        assert_eq!(extract_keyframes(&[true, false, false, true]), vec![0, 1, 3]);
        assert!(extract_keyframes(&[]).is_empty());
    }

    #[test]
    fn phase_words_round_trip() {
        for p in Phase::ALL {
            assert_eq!(Phase::from_word(p.word()), Some(p));
        }
        assert!(Phase::Approach < Phase::Finish);
    }
}
