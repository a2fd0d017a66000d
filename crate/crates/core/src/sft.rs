//! Supervised cold start: teacher-forced reasoning plus direct action
//! targets, both supervised by one forward pass per example.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{CotRecord, DataError};
use crate::model::{
    bind_params, forward_on_tape, ModelConfig, ModelError, PolicySnapshot, SequenceLayout, TokenId, VocabSpec,
    ACT_QUERY, BOS, THINK_CLOSE, THINK_OPEN,
};
use crate::optim::{accumulate, all_finite, zero_grads, Adam, AdamConfig};
use crate::tensor::{Tape, TensorError};

#[derive(Debug, Error)]
pub enum SftError {
    #[error("record {index} does not fit the model: {reason}")]
    TooLong { index: usize, reason: String },
    #[error("empty batch")]
    EmptyBatch,
    #[error("no usable training records")]
    NoData,
    #[error("non-finite loss at step {step}; diagnostics in {dump}")]
    NonFinite { step: usize, dump: String },
    #[error("invalid sft config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SftError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub seed: u64,
    /// Dataset file; the CLI fills this from the datagen output when unset.
    pub dataset: Option<PathBuf>,
    pub cot_weight: f64,
    pub action_weight: f64,
    /// Probability of replacing an example's trace with `<think> </think>`.
    pub cot_dropout: f64,
    pub checkpoint_every: usize,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
}

/// Learning-rate schedule over the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Cosine decay to a tenth of the base rate at the last step.
    Cosine,
}

impl LrSchedule {
    pub fn rate(self, base: f64, step: usize, steps: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let t = if steps > 1 { step as f64 / (steps - 1) as f64 } else { 1.0 };
                base * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
            }
        }
    }
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 1e-3,
            steps: 3000,
            seed: 0,
            dataset: None,
            cot_weight: 1.0,
            action_weight: 1.0,
            cot_dropout: 0.5,
            checkpoint_every: 1000,
            schedule: LrSchedule::Cosine,
            adam: AdamConfig::default(),
        }
    }
}

impl SftConfig {
    /// Full-scale batch and step counts.
    pub fn full_scale() -> Self {
        Self {
            batch_size: 128,
            learning_rate: 2.5e-5,
            steps: 150_000,
            cot_dropout: 0.0,
            schedule: LrSchedule::Constant,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(SftError::Config("batch_size must be at least 1".into()));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(SftError::Config("learning_rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.cot_dropout) {
            return Err(SftError::Config("cot_dropout must lie in [0, 1]".into()));
        }
        if self.cot_weight < 0.0 || self.action_weight < 0.0 {
            return Err(SftError::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Model input with per-position targets. Reasoning position `t` predicts
/// reasoning token `t+1`; action slot `i` predicts action token `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingExample {
    pub tokens: Vec<TokenId>,
    pub layout: SequenceLayout,
    pub targets: Vec<TokenId>,
    pub loss_mask: Vec<bool>,
}

impl TrainingExample {
    pub fn cot_mask(&self) -> Vec<bool> {
        let (p, c) = (self.layout.prefix_len, self.layout.context_len());
        (0..self.layout.total()).map(|i| self.loss_mask[i] && (p..c).contains(&i)).collect()
    }

    pub fn action_mask(&self) -> Vec<bool> {
        let c = self.layout.context_len();
        (0..self.layout.total()).map(|i| self.loss_mask[i] && i >= c).collect()
    }

    /// Same example with the trace replaced by `<think> </think>`. Only the
    /// action slots are supervised.
    pub fn with_empty_cot(&self) -> Self {
        let p = self.layout.prefix_len;
        let slots = self.layout.action_len;
        let mut tokens = self.tokens[..p].to_vec();
        tokens.extend([THINK_OPEN, THINK_CLOSE]);
        tokens.extend(std::iter::repeat_n(ACT_QUERY, slots));
        let layout = SequenceLayout::new(p, 2, slots);
        let mut targets = vec![0; layout.total()];
        let mut loss_mask = vec![false; layout.total()];
        targets[p] = THINK_CLOSE;
        let c = self.layout.context_len();
        for i in 0..slots {
            targets[p + 2 + i] = self.targets[c + i];
            loss_mask[p + 2 + i] = true;
        }
        Self {
            tokens,
            layout,
            targets,
            loss_mask,
        }
    }
}

/// `<bos> instruction observation` as vocabulary ids.
pub fn encode_prefix<S: AsRef<str>>(vocab: &VocabSpec, instr: &[S], obs: &[S]) -> std::result::Result<Vec<TokenId>, ModelError> {
    let mut p = vec![BOS];
    p.extend(vocab.encode_all(instr)?);
    p.extend(vocab.encode_all(obs)?);
    Ok(p)
}

pub fn build_training_example(record: &CotRecord, vocab: &VocabSpec, cfg: &ModelConfig) -> Result<TrainingExample> {
    let too_long = |reason: String| SftError::TooLong {
        index: record.frame_idx,
        reason,
    };
    let prefix = encode_prefix(vocab, &record.instr_tokens, &record.obs_tokens)?;
    let cot = vocab.encode_all(&record.cot_tokens)?;
    if cot.len() < 2 || cot.len() > cfg.max_cot_len {
        return Err(too_long(format!("trace of {} tokens, limit {}", cot.len(), cfg.max_cot_len)));
    }
    if prefix.len() + cot.len() > cfg.max_context {
        return Err(too_long(format!(
            "context of {} tokens, limit {}",
            prefix.len() + cot.len(),
            cfg.max_context
        )));
    }
    let slots = cfg.action_slots();
    if record.action_tokens.len() != slots {
        return Err(too_long(format!("{} action tokens, expected {slots}", record.action_tokens.len())));
    }
    if let Some(&b) = record.action_tokens.iter().find(|&&b| b >= vocab.bins()) {
        return Err(too_long(format!("action bin {b} outside {} bins", vocab.bins())));
    }
    let layout = SequenceLayout::new(prefix.len(), cot.len(), slots);
    let mut tokens = prefix;
    tokens.extend_from_slice(&cot);
    tokens.extend(std::iter::repeat_n(ACT_QUERY, slots));
    let mut targets = vec![0; layout.total()];
    let mut loss_mask = vec![false; layout.total()];
    for t in 0..cot.len() - 1 {
        targets[layout.prefix_len + t] = cot[t + 1];
        loss_mask[layout.prefix_len + t] = true;
    }
    for (i, &b) in record.action_tokens.iter().enumerate() {
        targets[layout.action_start() + i] = vocab.action_token(b);
        loss_mask[layout.action_start() + i] = true;
    }
    Ok(TrainingExample {
        tokens,
        layout,
        targets,
        loss_mask,
    })
}

/// Converts records, skipping (and logging) those that do not fit.
pub fn build_examples(records: &[CotRecord], vocab: &VocabSpec, cfg: &ModelConfig) -> Vec<TrainingExample> {
    records
        .iter()
        .enumerate()
        .filter_map(|(i, r)| match build_training_example(r, vocab, cfg) {
            Ok(e) => Some(e),
            Err(e) => {
                log::warn!("skipping record {i}: {e}");
                None
            }
        })
        .collect()
}

/// Loss values of one step, averaged over supervised tokens of the batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SftMetrics {
    pub step: usize,
    pub loss: f64,
    pub cot_loss: f64,
    pub action_loss: f64,
}

/// Weighted loss and gradient of a batch, accumulated one example at a
/// time. The loss is the weighted token sum over the batch divided by the
/// batch's supervised-token count.
pub fn batch_gradient(
    batch: &[TrainingExample],
    snap: &PolicySnapshot,
    cfg: &SftConfig,
) -> Result<(SftMetrics, Vec<Vec<f64>>)> {
    if batch.is_empty() {
        return Err(SftError::EmptyBatch);
    }
    let total: usize = batch.iter().map(|e| e.loss_mask.iter().filter(|&&m| m).count()).sum();
    let mut grads = zero_grads(snap.params());
    let (mut cot_sum, mut cot_n, mut act_sum, mut act_n) = (0.0, 0usize, 0.0, 0usize);
    let mut loss = 0.0;
    let mut tape = Tape::new();
    for ex in batch {
        tape.clear();
        let bound = bind_params(&mut tape, snap, true);
        let logits = forward_on_tape(&mut tape, snap, &bound, &ex.tokens, ex.layout)?;
        let mut parts = Vec::new();
        for (mask, weight, sum, n) in [
            (ex.cot_mask(), cfg.cot_weight, &mut cot_sum, &mut cot_n),
            (ex.action_mask(), cfg.action_weight, &mut act_sum, &mut act_n),
        ] {
            let count = mask.iter().filter(|&&m| m).count();
            if count == 0 {
                continue;
            }
            let ce = tape.cross_entropy(logits, &ex.targets, &mask)?;
            *sum += tape.value(ce).item() * count as f64;
            *n += count;
            parts.push(tape.scale(ce, weight * count as f64 / total as f64)?);
        }
        let mut l = parts[0];
        for &p in &parts[1..] {
            l = tape.add(l, p)?;
        }
        loss += tape.value(l).item();
        let g = tape.backward(l)?;
        accumulate(&g, &bound, &mut grads);
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Ok((
        SftMetrics {
            step: 0,
            loss,
            cot_loss: mean(cot_sum, cot_n),
            action_loss: mean(act_sum, act_n),
        },
        grads,
    ))
}

/// One optimizer step on `batch`.
pub fn sft_step(
    batch: &[TrainingExample],
    snap: &mut PolicySnapshot,
    opt: &mut Adam,
    cfg: &SftConfig,
) -> Result<SftMetrics> {
    let (metrics, grads) = batch_gradient(batch, snap, cfg)?;
    if !metrics.loss.is_finite() || !all_finite(&grads) {
        return Err(SftError::NonFinite {
            step: opt.steps() as usize,
            dump: String::new(),
        });
    }
    opt.step(snap.params_mut(), &grads, cfg.learning_rate);
    Ok(metrics)
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Result of a training run.
#[derive(Debug)]
pub struct SftOutcome {
    pub snapshot: PolicySnapshot,
    pub metrics: Vec<SftMetrics>,
    pub checkpoint: PathBuf,
}

/// Seeded batch order: a fresh permutation of the examples per epoch.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn dump_nonfinite(out: &Path, step: usize, batch: &[usize], metrics: &SftMetrics) -> Result<PathBuf> {
    let path = out.join(format!("nonfinite-step{step}.json"));
    let body = serde_json::json!({
        "step": step,
        "batch": batch,
        "loss": metrics.loss.to_string(),
        "cot_loss": metrics.cot_loss.to_string(),
        "action_loss": metrics.action_loss.to_string(),
    });
    std::fs::write(&path, serde_json::to_vec_pretty(&body)?)?;
    Ok(path)
}

/// Trains from `init` on `examples`, writing `metrics.jsonl`, periodic
/// checkpoints under `checkpoints/` and `final.ckpt` into `out`.
pub fn train_sft(
    cfg: &SftConfig,
    mut snap: PolicySnapshot,
    examples: &[TrainingExample],
    out: &Path,
) -> Result<SftOutcome> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(SftError::NoData);
    }
    std::fs::create_dir_all(out.join("checkpoints"))?;
    let mut metrics_file = BufWriter::new(File::create(out.join(METRICS_FILE))?);
    let mut opt = Adam::new(snap.params(), cfg.adam);
    let mut batcher = Batcher::new(examples.len(), cfg.seed);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_D50F);
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = batcher.next(cfg.batch_size);
        let batch: Vec<TrainingExample> = idx
            .iter()
            .map(|&i| {
                if cfg.cot_dropout > 0.0 && drop_rng.random::<f64>() < cfg.cot_dropout {
                    examples[i].with_empty_cot()
                } else {
                    examples[i].clone()
                }
            })
            .collect();
        let (mut m, grads) = batch_gradient(&batch, &snap, cfg)?;
        m.step = step;
        if !m.loss.is_finite() || !all_finite(&grads) {
            let dump = dump_nonfinite(out, step, &idx, &m)?;
            return Err(SftError::NonFinite {
                step,
                dump: dump.display().to_string(),
            });
        }
        opt.step(snap.params_mut(), &grads, cfg.schedule.rate(cfg.learning_rate, step, cfg.steps));
        serde_json::to_writer(&mut metrics_file, &m)?;
        metrics_file.write_all(b"\n")?;
        if step % 100 == 0 {
            log::info!(
                "sft step {step}: loss {:.4} cot {:.4} action {:.4}",
                m.loss,
                m.cot_loss,
                m.action_loss
            );
        }
        history.push(m);
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.steps {
            snap.save(&out.join("checkpoints").join(format!("step-{:06}.ckpt", step + 1)))?;
        }
    }
    metrics_file.flush()?;
    let checkpoint = out.join(FINAL_CHECKPOINT);
    snap.save(&checkpoint)?;
    Ok(SftOutcome {
        snapshot: snap,
        metrics: history,
        checkpoint,
    })
}
