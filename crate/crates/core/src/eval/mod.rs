//! Success-rate evaluation, reasoning interventions, decoding latency and
//! the ablation table.

mod ablation;
mod latency;
mod plot;
mod policy;

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ablation::{run_ablation_suite, write_ablation, AblationConfig, AblationReport, AblationRow, LatencyRow};
pub use latency::{measure_latency, LatencyReport, LatencyTiming, ModeLatency};
pub use plot::{bar_chart_svg, line_chart_svg, Series};
pub use policy::{intervene_cot, CotMode, Decision, DecodeMode, ExpertPolicy, ModelPolicy, Policy};

use crate::env::{EnvError, SuiteConfig, TaskSpec, WorldState};
use crate::model::{ModelError, PolicySnapshot};
use crate::util::{config_hash, derive_seed};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid eval config: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

const EVAL_STREAM: u64 = 1000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_conditions: usize,
    pub seed: u64,
    pub cot_mode: CotMode,
    pub decode_mode: DecodeMode,
    /// Seed of the random-trace intervention.
    pub intervention_seed: u64,
    /// Inner length of random traces; measured from full-trace runs when unset.
    pub random_cot_len: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_conditions: 20,
            seed: 0,
            cot_mode: CotMode::Full,
            decode_mode: DecodeMode::Hybrid,
            intervention_seed: 0,
            random_cot_len: None,
        }
    }
}

impl EvalConfig {
    /// Fifty initial conditions per task.
    pub fn full_scale() -> Self {
        Self {
            n_conditions: 50,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_conditions == 0 {
            return Err(EvalError::Config("n_conditions must be at least 1".into()));
        }
        Ok(())
    }
}

/// Seed of initial condition `condition` of `task`.
pub fn condition_seed(seed: u64, task: &TaskSpec, condition: usize) -> u64 {
    derive_seed(seed, EVAL_STREAM + task.id as u64, condition as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub task_id: usize,
    pub condition: usize,
    pub success: bool,
    pub steps: usize,
    pub decisions: usize,
    pub format_ok: bool,
    /// Inner lengths of the traces used at each decision.
    pub cot_lengths: Vec<usize>,
    /// Rendered traces, one per decision.
    pub traces: Vec<String>,
}

/// Runs one episode to success or the step limit.
pub fn run_episode(
    policy: &mut dyn Policy,
    suite: &SuiteConfig,
    task: &TaskSpec,
    seed: u64,
    condition: usize,
) -> Result<EpisodeResult> {
    let mut state = WorldState::reset(suite, task, seed)?;
    let mut res = EpisodeResult {
        task_id: task.id,
        condition,
        success: false,
        steps: 0,
        decisions: 0,
        format_ok: true,
        cot_lengths: Vec::new(),
        traces: Vec::new(),
    };
    while !state.done() {
        let d = policy.act(task, &state)?;
        res.decisions += 1;
        res.format_ok &= d.format_ok;
        res.cot_lengths.push(d.cot.len().saturating_sub(2));
        if let Some(v) = policy.vocab() {
            res.traces.push(v.decode_all(&d.cot).join(" "));
        }
        state.step_chunk(&d.chunk)?;
    }
    res.success = state.success();
    res.steps = state.step_count;
    Ok(res)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: usize,
    pub name: String,
    pub successes: usize,
    pub episodes: usize,
    pub sr: f64,
}

/// Deterministic part of an evaluation; wall-clock lives in [`EvalTiming`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub suite: String,
    pub config_hash: String,
    pub cot_mode: CotMode,
    pub decode_mode: DecodeMode,
    pub n_conditions: usize,
    pub per_task: Vec<TaskResult>,
    pub average_sr: f64,
    pub forward_passes: u64,
    pub decisions: usize,
    pub format_rate: f64,
    pub median_cot_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTiming {
    pub episode_seconds: Vec<f64>,
    pub mean_episode_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct EvalRun {
    pub report: EvalReport,
    pub timing: EvalTiming,
    pub episodes: Vec<EpisodeResult>,
}

/// Median of `values`, lower middle for even counts; 0 when empty.
pub fn median(values: &[usize]) -> usize {
    if values.is_empty() {
        return 0;
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    v[(v.len() - 1) / 2]
}

/// Evaluates `policy` over every task of `suite`.
pub fn evaluate_policy(
    policy: &mut dyn Policy,
    suite: &SuiteConfig,
    cfg: &EvalConfig,
    counter: Option<&PolicySnapshot>,
) -> Result<EvalRun> {
    cfg.validate()?;
    let passes_before = counter.map_or(0, |s| s.forward_passes());
    let mut episodes = Vec::new();
    let mut seconds = Vec::new();
    let mut per_task = Vec::new();
    for task in suite.tasks() {
        let mut successes = 0;
        for c in 0..cfg.n_conditions {
            let start = Instant::now();
            let ep = run_episode(policy, suite, &task, condition_seed(cfg.seed, &task, c), c)?;
            seconds.push(start.elapsed().as_secs_f64());
            successes += usize::from(ep.success);
            episodes.push(ep);
        }
        per_task.push(TaskResult {
            task_id: task.id,
            name: task.name.clone(),
            successes,
            episodes: cfg.n_conditions,
            sr: successes as f64 / cfg.n_conditions as f64,
        });
    }
    let average_sr = per_task.iter().map(|t| t.sr).sum::<f64>() / per_task.len() as f64;
    let lengths: Vec<usize> = episodes.iter().flat_map(|e| e.cot_lengths.iter().copied()).collect();
    let report = EvalReport {
        suite: suite.name.clone(),
        config_hash: config_hash(&(suite, cfg)),
        cot_mode: cfg.cot_mode,
        decode_mode: cfg.decode_mode,
        n_conditions: cfg.n_conditions,
        per_task,
        average_sr,
        forward_passes: counter.map_or(0, |s| s.forward_passes() - passes_before),
        decisions: episodes.iter().map(|e| e.decisions).sum(),
        format_rate: episodes.iter().filter(|e| e.format_ok).count() as f64 / episodes.len() as f64,
        median_cot_len: median(&lengths),
    };
    let mean = seconds.iter().sum::<f64>() / seconds.len() as f64;
    Ok(EvalRun {
        report,
        timing: EvalTiming {
            episode_seconds: seconds,
            mean_episode_seconds: mean,
        },
        episodes,
    })
}

/// Greedy evaluation of a snapshot under `cfg`. Without a configured
/// random-trace length, the median length of a full-trace run is used.
pub fn evaluate(snap: &PolicySnapshot, suite: &SuiteConfig, cfg: &EvalConfig) -> Result<EvalRun> {
    let k = match (cfg.cot_mode, cfg.random_cot_len) {
        (CotMode::Random, None) => {
            let full = EvalConfig {
                cot_mode: CotMode::Full,
                decode_mode: DecodeMode::Hybrid,
                ..cfg.clone()
            };
            evaluate(snap, suite, &full)?.report.median_cot_len
        }
        (_, k) => k.unwrap_or(0),
    };
    let mut policy = ModelPolicy::new(snap, cfg.cot_mode, cfg.decode_mode, k, cfg.intervention_seed);
    evaluate_policy(&mut policy, suite, cfg, Some(snap))
}
