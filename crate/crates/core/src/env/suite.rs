use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EnvError, Result};

/// A grid cell. `(0,0)` is the bottom-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub x: i32,
    pub y: i32,
}

impl Cell {
    pub const fn new(x: i32, y: i32) -> Self {
        Self { x, y }
    }

    /// Token form, e.g. `(3,4)`.
    pub fn token(&self) -> String {
        format!("({},{})", self.x, self.y)
    }

    pub fn manhattan(&self, other: Cell) -> i32 {
        (self.x - other.x).abs() + (self.y - other.y).abs()
    }
}

/// Axis-aligned rectangle of cells, inclusive on both corners.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Zone {
    pub name: String,
    pub lo: [i32; 2],
    pub hi: [i32; 2],
}

impl Zone {
    pub fn contains(&self, c: Cell) -> bool {
        (self.lo[0]..=self.hi[0]).contains(&c.x) && (self.lo[1]..=self.hi[1]).contains(&c.y)
    }

    pub fn lo_cell(&self) -> Cell {
        Cell::new(self.lo[0], self.lo[1])
    }

    pub fn hi_cell(&self) -> Cell {
        Cell::new(self.hi[0], self.hi[1])
    }

    /// Cells in row-major order (y, then x).
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for y in self.lo[1]..=self.hi[1] {
            for x in self.lo[0]..=self.hi[0] {
                out.push(Cell::new(x, y));
            }
        }
        out
    }
}

/// Suite definition as written in the TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub name: String,
    pub grid: [i32; 2],
    pub max_steps: usize,
    /// Extra non-target objects placed in every scene.
    pub distractors: usize,
    /// Whitespace-separated template with `{object}` and `{zone}` slots.
    pub instruction: String,
    pub objects: Vec<String>,
    pub zones: Vec<Zone>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            grid: [7, 7],
            max_steps: 40,
            distractors: 0,
            instruction: "move {object} to {zone}".into(),
            objects: ["block", "ball", "cup", "can", "box"].map(String::from).to_vec(),
            zones: vec![
                Zone {
                    name: "zone_a".into(),
                    lo: [0, 5],
                    hi: [1, 6],
                },
                Zone {
                    name: "zone_b".into(),
                    lo: [5, 5],
                    hi: [6, 6],
                },
            ],
        }
    }
}

impl SuiteConfig {
    /// Held-out variant with distractor objects.
    pub fn with_distractors(n: usize) -> Self {
        Self {
            name: format!("distractors-{n}"),
            distractors: n,
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = toml::from_str(&text).map_err(|e| EnvError::Suite(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(EnvError::Suite(m));
        let [w, h] = self.grid;
        if w < 2 || h < 2 {
            return fail(format!("grid {w}x{h} too small"));
        }
        if self.objects.is_empty() || self.zones.is_empty() {
            return fail("suite needs at least one object and one zone".into());
        }
        if self.distractors + 1 > self.objects.len() {
            return fail(format!(
                "{} distractors need {} distinct objects, suite has {}",
                self.distractors,
                self.distractors + 1,
                self.objects.len()
            ));
        }
        if self.max_steps == 0 {
            return fail("max_steps must be positive".into());
        }
        for z in &self.zones {
            let inside = |c: [i32; 2]| (0..w).contains(&c[0]) && (0..h).contains(&c[1]);
            if !inside(z.lo) || !inside(z.hi) || z.lo[0] > z.hi[0] || z.lo[1] > z.hi[1] {
                return fail(format!("zone {} is not a rectangle inside the grid", z.name));
            }
        }
        if !self.instruction.contains("{object}") || !self.instruction.contains("{zone}") {
            return fail("instruction template must mention {object} and {zone}".into());
        }
        Ok(())
    }

    /// One task per (object, zone) pair, objects outermost.
    pub fn tasks(&self) -> Vec<TaskSpec> {
        let mut out = Vec::new();
        for (oi, obj) in self.objects.iter().enumerate() {
            for (zi, zone) in self.zones.iter().enumerate() {
                let instruction = self
                    .instruction
                    .split_whitespace()
                    .map(|w| w.replace("{object}", obj).replace("{zone}", &zone.name))
                    .collect();
                out.push(TaskSpec {
                    id: out.len(),
                    name: format!("{obj}-{}", zone.name),
                    instruction,
                    object: oi,
                    zone: zi,
                    max_steps: self.max_steps,
                });
            }
        }
        out
    }

    /// Every word the environment can emit in instructions or observations.
    pub fn words(&self) -> Vec<String> {
        let mut words: Vec<String> = ["gripper", "open", "closed", "holding", "zone"].map(String::from).to_vec();
        for w in self.instruction.split_whitespace() {
            if !w.contains('{') {
                words.push(w.to_string());
            }
        }
        words.extend(self.objects.iter().cloned());
        words.extend(self.zones.iter().map(|z| z.name.clone()));
        for y in 0..self.grid[1] {
            for x in 0..self.grid[0] {
                words.push(Cell::new(x, y).token());
            }
        }
        let mut seen = std::collections::HashSet::new();
        words.retain(|w| seen.insert(w.clone()));
        words
    }

    /// Number of observation tokens for a scene of `objects` objects.
    pub fn observation_len(objects: usize) -> usize {
        6 + 2 * objects
    }
}

/// A language-conditioned task: move `object` into `zone`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: usize,
    pub name: String,
    pub instruction: Vec<String>,
    /// Index into the suite's object list.
    pub object: usize,
    /// Index into the suite's zone list.
    pub zone: usize,
    pub max_steps: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_has_ten_tasks() {
        let s = SuiteConfig::default();
        s.validate().unwrap();
        let tasks = s.tasks();
        assert_eq!(tasks.len(), 10);
        assert_eq!(tasks[0].instruction, vec!["move", "block", "to", "zone_a"]);
    }

    #[test]
    fn toml_round_trip() {
        let s = SuiteConfig::with_distractors(2);
        let text = toml::to_string(&s).unwrap();
        let back: SuiteConfig = toml::from_str(&text).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn rejects_zone_outside_grid() {
        let mut s = SuiteConfig::default();
        s.zones[0].hi = [9, 9];
        assert!(s.validate().is_err());
    }

    #[test]
    fn words_are_unique() {
        let w = SuiteConfig::default().words();
        let set: std::collections::HashSet<_> = w.iter().collect();
        assert_eq!(set.len(), w.len());
        assert!(w.contains(&"(6,6)".to_string()));
    }
}
