use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{DecodeMode, Result};
use crate::data::demo_seed;
use crate::env::{run_expert, SuiteConfig, TaskSpec, WorldState};
use crate::model::{decode_actions_autoregressive, decode_actions_parallel, generate_cot, Decoding, PolicySnapshot};
use crate::sft::encode_prefix;

const LATENCY_STREAM_SEED: u64 = 0x1A7E;

/// Exact forward-pass counts for one decoding mode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeLatency {
    pub decode_mode: DecodeMode,
    pub chunks: usize,
    /// Passes spent on the action block of each chunk (identical for every chunk).
    pub action_passes_per_chunk: u64,
    pub cot_passes: u64,
    pub total_passes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub hybrid: ModeLatency,
    pub ar_emulation: ModeLatency,
}

/// Wall-clock means in seconds per chunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyTiming {
    pub chunks: usize,
    pub cot_seconds: f64,
    pub hybrid_action_seconds: f64,
    pub ar_action_seconds: f64,
    /// Full step time (trace + actions) of AR emulation over hybrid.
    pub relative_inference_time: f64,
}

/// Decision states drawn from scripted episodes, one every `horizon` steps.
fn decision_states(suite: &SuiteConfig, horizon: usize, n: usize) -> Result<Vec<(TaskSpec, WorldState)>> {
    let tasks = suite.tasks();
    let mut out = Vec::with_capacity(n);
    let mut i = 0;
    while out.len() < n {
        let task = &tasks[i % tasks.len()];
        let demo = run_expert(suite, task, demo_seed(LATENCY_STREAM_SEED, i))?;
        for r in demo.records.iter().step_by(horizon.max(1)) {
            if out.len() < n && !r.state.done() {
                out.push((task.clone(), r.state.clone()));
            }
        }
        i += 1;
    }
    Ok(out)
}

/// Times trace generation and both action decoders on `n_chunks` states.
pub fn measure_latency(
    snap: &PolicySnapshot,
    suite: &SuiteConfig,
    n_chunks: usize,
) -> Result<(LatencyReport, LatencyTiming)> {
    let cfg = snap.config();
    let states = decision_states(suite, cfg.chunk_len, n_chunks.max(1))?;
    let mut cot_passes = 0;
    let mut cot_secs = 0.0;
    let mut modes = Vec::new();
    let mut contexts = Vec::with_capacity(states.len());
    for (task, state) in &states {
        let prefix = encode_prefix(snap.vocab(), &task.instruction, &state.observation())?;
        let before = snap.forward_passes();
        let start = Instant::now();
        let cot = generate_cot(snap, &prefix, cfg.max_cot_len, &mut Decoding::Greedy)?;
        cot_secs += start.elapsed().as_secs_f64();
        cot_passes += snap.forward_passes() - before;
        let mut ctx = prefix.clone();
        ctx.extend_from_slice(&cot.tokens);
        contexts.push((ctx, prefix.len()));
    }
    for mode in [DecodeMode::Hybrid, DecodeMode::ArEmulation] {
        let mut per_chunk = Vec::with_capacity(contexts.len());
        let mut secs = 0.0;
        for (ctx, p) in &contexts {
            let before = snap.forward_passes();
            let start = Instant::now();
            match mode {
                DecodeMode::Hybrid => {
                    decode_actions_parallel(snap, ctx, *p, &mut Decoding::Greedy)?;
                }
                DecodeMode::ArEmulation => {
                    decode_actions_autoregressive(snap, ctx, *p)?;
                }
            }
            secs += start.elapsed().as_secs_f64();
            per_chunk.push(snap.forward_passes() - before);
        }
        let first = per_chunk[0];
        assert!(per_chunk.iter().all(|&c| c == first), "pass count varies across chunks");
        let total: u64 = per_chunk.iter().sum();
        modes.push((
            ModeLatency {
                decode_mode: mode,
                chunks: contexts.len(),
                action_passes_per_chunk: first,
                cot_passes,
                total_passes: total + cot_passes,
            },
            secs / contexts.len() as f64,
        ));
    }
    let n = contexts.len() as f64;
    let (ar, ar_secs) = modes.pop().expect("two modes");
    let (hybrid, hy_secs) = modes.pop().expect("two modes");
    let cot_mean = cot_secs / n;
    Ok((
        LatencyReport {
            hybrid,
            ar_emulation: ar,
        },
        LatencyTiming {
            chunks: contexts.len(),
            cot_seconds: cot_mean,
            hybrid_action_seconds: hy_secs,
            ar_action_seconds: ar_secs,
            relative_inference_time: (cot_mean + ar_secs) / (cot_mean + hy_secs),
        },
    ))
}
