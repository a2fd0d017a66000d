//! The six top-level commands. Each writes into its own run directory
//! `<out>/<command>-<hash12>` and returns that path.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::data::{build_dataset, policy_vocab, read_records, write_dataset, DataError, DATASET_FILE};
use crate::eval::{
    evaluate, line_chart_svg, measure_latency, run_ablation_suite, write_ablation, AblationConfig, DecodeMode, EvalError,
    Series,
};
use crate::model::{ModelError, PolicySnapshot};
use crate::rl::{train_rl, RlError};
use crate::sft::{build_examples, train_sft, SftError};
use crate::util::sha256_hex;

#[derive(Debug, Error)]
pub enum CommandError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sft(#[from] SftError),
    #[error(transparent)]
    Rl(#[from] RlError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("cannot read {path}: {source}")]
    Input {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CommandError>;

pub const CONFIG_FILE: &str = "config.toml";
pub const REPORT_FILE: &str = "report.json";
pub const EPISODES_FILE: &str = "episodes.jsonl";
pub const LATENCY_FILE: &str = "latency.json";
/// Wall-clock measurements; the only output that differs between reruns.
pub const TIMING_FILE: &str = "timing.json";

/// Overrides the seed that drives `command`.
pub fn apply_seed(cfg: &mut RunConfig, command: &str, seed: u64) {
    match command {
        "datagen" => cfg.data.seed = seed,
        "sft" => cfg.sft.seed = seed,
        "rl" => cfg.rl.seed = seed,
        "eval" => cfg.eval.seed = seed,
        "ablate" => cfg.ablation.seeds = (0..cfg.ablation.seeds.len().max(1) as u64).map(|i| seed + i).collect(),
        _ => {}
    }
}

fn digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|source| CommandError::Input {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(sha256_hex(&bytes))
}

fn prepare(cfg: &RunConfig, out: &Path, command: &str, inputs: &[String]) -> Result<PathBuf> {
    let dir = cfg.run_dir(out, command, inputs);
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join(CONFIG_FILE), cfg.to_toml())?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<PolicySnapshot> {
    Ok(PolicySnapshot::load(path)?)
}

/// Expert demonstrations, annotation and filtering.
pub fn datagen(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let dir = prepare(cfg, out, "datagen", &[])?;
    let ds = build_dataset(&cfg.suite, &cfg.data, &cfg.model)?;
    write_dataset(&dir, &ds)?;
    log::info!("datagen: {} records from {} demos", ds.manifest.records, ds.manifest.demos_kept);
    Ok(dir)
}

/// Supervised training from a fresh initialization. Uses `sft.dataset` when
/// set, otherwise generates the dataset into `<run>/data`.
pub fn sft(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let inputs = match &cfg.sft.dataset {
        Some(p) => vec![digest(p)?],
        None => Vec::new(),
    };
    let dir = prepare(cfg, out, "sft", &inputs)?;
    let records = match &cfg.sft.dataset {
        Some(p) => read_records(p)?,
        None => {
            let data_dir = dir.join("data");
            let ds = build_dataset(&cfg.suite, &cfg.data, &cfg.model)?;
            write_dataset(&data_dir, &ds)?;
            read_records(&data_dir.join(DATASET_FILE))?
        }
    };
    let vocab = policy_vocab(&cfg.suite, cfg.model.bins)?;
    let examples = build_examples(&records, &vocab, &cfg.model);
    let init = PolicySnapshot::init(cfg.model.clone(), vocab)?;
    let outcome = train_sft(&cfg.sft, init, &examples, &dir)?;
    log::info!("sft: final checkpoint {}", outcome.checkpoint.display());
    Ok(dir)
}

/// GRPO from an SFT checkpoint, which also serves as the frozen reference.
pub fn rl(cfg: &RunConfig, init: &Path, out: &Path) -> Result<PathBuf> {
    let dir = prepare(cfg, out, "rl", &[digest(init)?])?;
    let snap = load_checkpoint(init)?;
    let outcome = train_rl(&cfg.rl, &snap, &cfg.suite, &dir)?;
    let points = |f: &dyn Fn(&crate::rl::RlMetrics) -> Option<f64>| -> Vec<(f64, f64)> {
        outcome
            .metrics
            .iter()
            .filter_map(|m| f(m).map(|v| (m.iteration as f64, v)))
            .collect()
    };
    let series = vec![
        Series {
            name: "mean_reward".into(),
            points: points(&|m| Some(m.mean_reward)),
        },
        Series {
            name: "greedy_sr".into(),
            points: points(&|m| m.sr),
        },
        Series {
            name: "format_rate".into(),
            points: points(&|m| Some(m.format_rate)),
        },
    ];
    std::fs::write(dir.join("training.svg"), line_chart_svg("rl training", &series))?;
    Ok(dir)
}

/// Greedy success-rate evaluation of one checkpoint.
pub fn eval(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<PathBuf> {
    let dir = prepare(cfg, out, "eval", &[digest(checkpoint)?])?;
    let snap = load_checkpoint(checkpoint)?;
    let run = evaluate(&snap, &cfg.suite, &cfg.eval)?;
    write_json(&dir.join(REPORT_FILE), &run.report)?;
    write_json(&dir.join(TIMING_FILE), &run.timing)?;
    let mut episodes = BufWriter::new(File::create(dir.join(EPISODES_FILE))?);
    for e in &run.episodes {
        serde_json::to_writer(&mut episodes, e)?;
        episodes.write_all(b"\n")?;
    }
    episodes.flush()?;
    log::info!("eval: average sr {:.3}", run.report.average_sr);
    Ok(dir)
}

/// Trace ablations of both checkpoints plus decoding latency.
pub fn ablate(cfg: &RunConfig, sft_ckpt: &Path, rl_ckpt: &Path, out: &Path) -> Result<PathBuf> {
    let dir = prepare(cfg, out, "ablate", &[digest(sft_ckpt)?, digest(rl_ckpt)?])?;
    let sft = load_checkpoint(sft_ckpt)?;
    let rl = load_checkpoint(rl_ckpt)?;
    let acfg = AblationConfig {
        latency_chunks: cfg.latency.chunks,
        ..cfg.ablation.clone()
    };
    let (report, timing) = run_ablation_suite(&sft, &rl, &cfg.suite, &acfg)?;
    write_ablation(&dir, &report)?;
    write_json(&dir.join(TIMING_FILE), &timing)?;
    Ok(dir)
}

/// Forward-pass counts and wall-clock of hybrid versus autoregressive
/// action decoding.
pub fn latency(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<PathBuf> {
    let dir = prepare(cfg, out, "latency", &[digest(checkpoint)?])?;
    let snap = load_checkpoint(checkpoint)?;
    let (report, timing) = measure_latency(&snap, &cfg.suite, cfg.latency.chunks)?;
    write_json(&dir.join(LATENCY_FILE), &report)?;
    write_json(&dir.join(TIMING_FILE), &timing)?;
    let labels = vec![format!("{:?}", DecodeMode::Hybrid), format!("{:?}", DecodeMode::ArEmulation)];
    let passes = [report.hybrid.action_passes_per_chunk as f64, report.ar_emulation.action_passes_per_chunk as f64];
    std::fs::write(
        dir.join("passes.svg"),
        crate::eval::bar_chart_svg("action-block forward passes per chunk", &labels, &passes),
    )?;
    Ok(dir)
}
