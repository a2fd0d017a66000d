use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::annotate::{annotate_keyframe, cot_words, extract_keyframes, propagate_annotations, DemoTrajectory};
use super::schema::{check_temporal_consistency, validate_schema};
use super::{DataError, Result};
use crate::env::{run_expert, write_records, ExpertDemo, SuiteConfig};
use crate::model::{ActionTokenizer, ModelConfig, VocabSpec};
use crate::util::{config_hash, derive_seed};

const DEMO_STREAM: u64 = 1;

/// How a trace was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Keyframe,
    Propagated,
}

/// One supervised frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CotRecord {
    pub task_id: usize,
    /// Index of the demo this frame came from.
    pub demo: usize,
    pub frame_idx: usize,
    pub obs_tokens: Vec<String>,
    pub instr_tokens: Vec<String>,
    pub cot_tokens: Vec<String>,
    /// Bin ids, row-major over the chunk.
    pub action_tokens: Vec<usize>,
    pub source: Source,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_demos: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n_demos: 500, seed: 0 }
    }
}

/// Counts and filter statistics written next to the dataset.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub suite: String,
    pub seed: u64,
    pub n_demos: usize,
    pub config_hash: String,
    pub demos_kept: usize,
    pub demos_failed: usize,
    pub demos_unsuccessful: usize,
    /// Frames over kept demos, terminal frames included.
    pub frames: usize,
    pub records: usize,
    pub keyframe_records: usize,
    pub propagated_records: usize,
    pub schema_rejections: BTreeMap<String, usize>,
    pub temporal_drops: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub records: Vec<CotRecord>,
    pub manifest: Manifest,
    /// Kept demonstrations, for trajectory dumps.
    pub demos: Vec<ExpertDemo>,
}

/// Vocabulary covering instructions, observations and reasoning traces.
pub fn policy_vocab(suite: &SuiteConfig, bins: usize) -> Result<VocabSpec> {
    let mut words = suite.words();
    for w in cot_words() {
        if !words.contains(&w) {
            words.push(w);
        }
    }
    Ok(VocabSpec::new(words, bins)?)
}

/// Seed of demo `index` under dataset seed `seed`.
pub fn demo_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, DEMO_STREAM, index as u64)
}

/// Records for one successful demo, after schema and temporal filtering.
pub fn records_for_demo(
    demo: &ExpertDemo,
    demo_index: usize,
    model: &ModelConfig,
    tok: &ActionTokenizer,
    manifest: &mut Manifest,
) -> Vec<CotRecord> {
    let traj = DemoTrajectory::from_demo(demo, model.chunk_len, tok);
    let flags: Vec<bool> = traj.frames.iter().map(|f| f.gripper_open).collect();
    let keys = extract_keyframes(&flags);
    let annotated: Vec<_> = keys.iter().map(|&k| (k, annotate_keyframe(&traj, k))).collect();
    let per_frame = propagate_annotations(&traj, &annotated);
    let mut records = Vec::with_capacity(per_frame.len());
    for (t, (frame, ann)) in traj.frames.iter().zip(per_frame).enumerate() {
        if let Err(reason) = validate_schema(&ann.cot, model.max_cot_len) {
            *manifest.schema_rejections.entry(reason.to_string()).or_default() += 1;
            continue;
        }
        records.push(CotRecord {
            task_id: traj.task_id,
            demo: demo_index,
            frame_idx: t,
            obs_tokens: frame.observation.clone(),
            instr_tokens: traj.instruction.clone(),
            cot_tokens: ann.cot,
            action_tokens: frame.chunk.bins.clone(),
            source: if keys.binary_search(&t).is_ok() {
                Source::Keyframe
            } else {
                Source::Propagated
            },
        });
    }
    let (kept, report) = check_temporal_consistency(records);
    manifest.temporal_drops += report.total();
    kept
}

/// expert → keyframes → annotate → propagate → validate → filter.
pub fn build_dataset(suite: &SuiteConfig, data: &DataConfig, model: &ModelConfig) -> Result<Dataset> {
    let tok = ActionTokenizer::new(model.bins)?;
    let tasks = suite.tasks();
    let mut manifest = Manifest {
        suite: suite.name.clone(),
        seed: data.seed,
        n_demos: data.n_demos,
        config_hash: config_hash(&(suite, data, model)),
        ..Manifest::default()
    };
    let mut records = Vec::new();
    let mut demos = Vec::new();
    for i in 0..data.n_demos {
        let task = &tasks[i % tasks.len()];
        let demo = match run_expert(suite, task, demo_seed(data.seed, i)) {
            Ok(d) => d,
            Err(e) => {
                log::warn!("demo {i} ({}) skipped: {e}", task.name);
                manifest.demos_failed += 1;
                continue;
            }
        };
        if !demo.success {
            log::warn!("demo {i} ({}) skipped: expert did not succeed", task.name);
            manifest.demos_unsuccessful += 1;
            continue;
        }
        manifest.demos_kept += 1;
        manifest.frames += demo.records.len();
        records.extend(records_for_demo(&demo, i, model, &tok, &mut manifest));
        demos.push(demo);
    }
    manifest.records = records.len();
    manifest.keyframe_records = records.iter().filter(|r| r.source == Source::Keyframe).count();
    manifest.propagated_records = manifest.records - manifest.keyframe_records;
    Ok(Dataset {
        records,
        manifest,
        demos,
    })
}

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRAJECTORY_FILE: &str = "trajectories.jsonl";

/// Writes `dataset.jsonl`, `manifest.json` and `trajectories.jsonl`.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(File::create(dir.join(DATASET_FILE))?);
    for r in &ds.records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    let mut m = BufWriter::new(File::create(dir.join(MANIFEST_FILE))?);
    serde_json::to_writer_pretty(&mut m, &ds.manifest)?;
    m.write_all(b"\n")?;
    m.flush()?;
    let mut t = BufWriter::new(File::create(dir.join(TRAJECTORY_FILE))?);
    for d in &ds.demos {
        write_records(&mut t, &d.records)?;
    }
    t.flush()?;
    Ok(())
}

/// Reads records from a dataset file; a bad line reports its index.
pub fn read_records(path: &Path) -> Result<Vec<CotRecord>> {
    let f = File::open(path).map_err(|e| DataError::Missing(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| DataError::Corrupt {
            index: i,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let f = File::open(path).map_err(|e| DataError::Missing(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_reader(BufReader::new(f))?)
}
