use std::collections::{HashMap, VecDeque};

use super::suite::Cell;
use super::world::WorldState;
use super::{EnvError, Result};
use crate::model::{ActionChunk, ActionTokenizer};

/// One primitive command `[dx, dy, grip]`.
pub type Primitive = [f64; 3];

pub const CLOSE: Primitive = [0.0, 0.0, 1.0];
pub const OPEN: Primitive = [0.0, 0.0, -1.0];

fn step_to(from: Cell, to: Cell) -> Primitive {
    [(to.x - from.x) as f64, (to.y - from.y) as f64, 0.0]
}

/// Axis-aligned path, x first, excluding `from`.
fn manhattan_path(from: Cell, to: Cell) -> Vec<Cell> {
    let mut path = Vec::new();
    let mut c = from;
    while c.x != to.x {
        c.x += (to.x - c.x).signum();
        path.push(c);
    }
    while c.y != to.y {
        c.y += (to.y - c.y).signum();
        path.push(c);
    }
    path
}

/// Shortest 4-connected path to any cell in `goals`, avoiding `blocked`.
fn bfs_path(state: &WorldState, from: Cell, goals: &[Cell], blocked: &dyn Fn(Cell) -> bool) -> Option<Vec<Cell>> {
    let mut parent: HashMap<Cell, Cell> = HashMap::new();
    let mut queue = VecDeque::from([from]);
    parent.insert(from, from);
    while let Some(c) = queue.pop_front() {
        if goals.contains(&c) {
            let mut path = vec![c];
            let mut cur = c;
            while parent[&cur] != from {
                cur = parent[&cur];
                path.push(cur);
            }
            if c == from {
                return Some(Vec::new());
            }
            path.reverse();
            return Some(path);
        }
        for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
            let n = Cell::new(c.x + dx, c.y + dy);
            if state.in_bounds(n) && !blocked(n) && !parent.contains_key(&n) {
                parent.insert(n, c);
                queue.push_back(n);
            }
        }
    }
    None
}

/// Complete primitive plan from `state` to task success: reach the target,
/// close, carry it to the nearest free zone cell, open.
pub fn expert_plan(state: &WorldState) -> Result<Vec<Primitive>> {
    let mut plan = Vec::new();
    if state.success() {
        return Ok(plan);
    }
    let mut at = state.gripper.cell;
    if state.gripper.closed && state.gripper.held != Some(0) {
        plan.push(OPEN);
    }
    if state.gripper.held != Some(0) {
        let obj = state.target().cell;
        for c in manhattan_path(at, obj) {
            plan.push(step_to(at, c));
            at = c;
        }
        plan.push(CLOSE);
    }
    // The held target leaves its cell; every other object is an obstacle.
    let occupied = |c: Cell| state.objects.iter().skip(1).any(|o| o.cell == c);
    let goals: Vec<Cell> = state.target_zone.cells().into_iter().filter(|&c| !occupied(c)).collect();
    let nearest = goals
        .iter()
        .copied()
        .min_by_key(|g| (g.manhattan(at), g.x, g.y))
        .ok_or_else(|| EnvError::ExpertFailure("target zone fully occupied".into()))?;
    let direct = manhattan_path(at, nearest);
    let path = if direct.iter().any(|&c| occupied(c)) {
        bfs_path(state, at, &goals, &occupied)
            .ok_or_else(|| EnvError::ExpertFailure(format!("no free path from {} to the zone", at.token())))?
    } else {
        direct
    };
    for c in path {
        plan.push(step_to(at, c));
        at = c;
    }
    plan.push(OPEN);
    Ok(plan)
}

/// Chunk of the next `horizon` expert primitives, zero-padded.
pub fn expert_chunk(state: &WorldState, horizon: usize, tok: &ActionTokenizer) -> Result<ActionChunk> {
    let plan = expert_plan(state)?;
    Ok(chunk_from_plan(&plan, horizon, tok))
}

/// Packs `plan[..horizon]` into a chunk, padding with no-op steps.
pub fn chunk_from_plan(plan: &[Primitive], horizon: usize, tok: &ActionTokenizer) -> ActionChunk {
    let mut values = Vec::with_capacity(horizon * 3);
    for i in 0..horizon {
        values.extend_from_slice(plan.get(i).unwrap_or(&[0.0; 3]));
    }
    ActionChunk::from_values(horizon, 3, values, tok).expect("expert commands lie in [-1, 1]")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::SuiteConfig;

    #[test]
    fn manhattan_goes_x_first() {
        let p = manhattan_path(Cell::new(0, 0), Cell::new(2, 1));
        assert_eq!(p, vec![Cell::new(1, 0), Cell::new(2, 0), Cell::new(2, 1)]);
    }

    #[test]
    fn plan_solves_scene() {
        let suite = SuiteConfig::default();
        for task in suite.tasks() {
            let mut s = WorldState::reset(&suite, &task, 11).unwrap();
            for a in expert_plan(&s).unwrap() {
                s.step_primitive(&a);
            }
            assert!(s.success(), "{}", task.name);
        }
    }

    #[test]
    fn plan_routes_around_distractors() {
        let suite = SuiteConfig::with_distractors(3);
        for seed in 0..200 {
            let task = &suite.tasks()[(seed % 10) as usize];
            let mut s = WorldState::reset(&suite, task, seed).unwrap();
            let plan = expert_plan(&s).unwrap();
            for a in plan {
                s.step_primitive(&a);
            }
            assert!(s.success(), "seed {seed}\n{s}");
        }
    }
}
