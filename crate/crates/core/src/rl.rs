//! Online group-relative policy optimization: grouped rollouts, outcome and
//! format reward, standardized group advantages, a token-level asymmetric
//! clipped surrogate and an exact KL penalty to a frozen reference.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::validate_schema_ids;
use crate::env::{EnvError, SuiteConfig, TaskSpec, WorldState};
use crate::eval::{evaluate, EvalConfig, EvalError};
use crate::model::{
    bind_trainable, decode_actions_parallel, forward, generate_cot, generated_log_softmax, logprobs_from_logits,
    sequence_logprobs_on_tape, Decoding, ModelError, PolicySnapshot, PolicyStep, SnapshotRole,
};
use crate::optim::{accumulate, all_finite, zero_grads, Adam, AdamConfig};
use crate::sft::encode_prefix;
use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::util::derive_seed;

#[derive(Debug, Error)]
pub enum RlError {
    #[error("invalid rl config: {0}")]
    Config(String),
    #[error("empty minibatch")]
    EmptyBatch,
    #[error("non-finite {what} in trajectory {trajectory}; dump at {dump}")]
    NonFinite {
        what: &'static str,
        trajectory: usize,
        dump: String,
    },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, RlError>;

const ENV_STREAM: u64 = 2000;
const SAMPLE_STREAM: u64 = 3000;
const SHUFFLE_STREAM: u64 = 4000;

/// Below this reward spread a group carries no learning signal.
pub const DEGENERATE_STD: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub alpha_s: f64,
    pub alpha_f: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            alpha_s: 1.0,
            alpha_f: 0.1,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha_s.is_nan() || self.alpha_s <= 0.0 {
            return Err(RlError::Config("alpha_s must be positive".into()));
        }
        if self.alpha_f.is_nan() || self.alpha_f < 0.0 {
            return Err(RlError::Config("alpha_f must be non-negative".into()));
        }
        Ok(())
    }
}

/// One decision of a rollout with the behavior log-probability of every
/// generated token, ordered as [`PolicyStep::generated_targets`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutStep {
    pub prefix: Vec<usize>,
    pub cot: Vec<usize>,
    pub actions: Vec<usize>,
    pub logprobs: Vec<f64>,
    pub cot_ok: bool,
}

impl RolloutStep {
    pub fn policy_step(&self) -> PolicyStep {
        PolicyStep {
            prefix: self.prefix.clone(),
            cot: self.cot.clone(),
            actions: self.actions.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: usize,
    pub env_seed: u64,
    pub steps: Vec<RolloutStep>,
    pub success: bool,
    pub format_ok: bool,
    pub reward: f64,
}

impl Trajectory {
    /// Generated tokens across all steps.
    pub fn token_count(&self) -> usize {
        self.steps.iter().map(|s| s.policy_step().generated_len()).sum()
    }

    pub fn logprob_count(&self) -> usize {
        self.steps.iter().map(|s| s.logprobs.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub task_id: usize,
    pub trajectories: Vec<Trajectory>,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    pub fn rewards(&self) -> Vec<f64> {
        self.trajectories.iter().map(|t| t.reward).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub eps_low: f64,
    pub eps_high: f64,
    pub beta: f64,
    pub temperature: f64,
    /// Trajectories per gradient step.
    pub minibatch_size: usize,
    /// Passes over each rollout batch.
    pub epochs: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub reward: RewardConfig,
    /// Greedy initial conditions per task for the per-iteration success rate;
    /// 0 skips the measurement.
    pub eval_conditions: usize,
    pub eval_seed: u64,
    pub checkpoint_every: usize,
    pub adam: AdamConfig,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            eps_low: 0.2,
            eps_high: 0.28,
            beta: 0.01,
            temperature: 1.0,
            minibatch_size: 16,
            epochs: 2,
            iterations: 20,
            learning_rate: 1e-4,
            seed: 0,
            reward: RewardConfig::default(),
            eval_conditions: 5,
            eval_seed: 77,
            checkpoint_every: 5,
            adam: AdamConfig::default(),
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        self.reward.validate()?;
        if self.group_size < 2 {
            return Err(RlError::Config("group_size must be at least 2".into()));
        }
        if !(0.0 < self.eps_low && self.eps_low <= self.eps_high && self.eps_high < 1.0) {
            return Err(RlError::Config("clip ratios need 0 < eps_low <= eps_high < 1".into()));
        }
        if self.beta.is_nan() || self.beta < 0.0 {
            return Err(RlError::Config("beta must be non-negative".into()));
        }
        if self.minibatch_size == 0 || self.epochs == 0 {
            return Err(RlError::Config("minibatch_size and epochs must be at least 1".into()));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(RlError::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// `alpha_s·[success] + alpha_f·[format_ok]`.
pub fn compute_reward(success: bool, format_ok: bool, cfg: &RewardConfig) -> f64 {
    cfg.alpha_s * f64::from(u8::from(success)) + cfg.alpha_f * f64::from(u8::from(format_ok))
}

/// Standardizes rewards with the population standard deviation; all zeros
/// when the spread is below [`DEGENERATE_STD`].
pub fn compute_group_advantage(rewards: &[f64]) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std <= DEGENERATE_STD {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / std).collect()
}

/// Per-token `min(ω·A, clamp(ω, 1−eps_low, 1+eps_high)·A)`.
pub fn clipped_surrogate(ratios: &[f64], advantage: f64, eps_low: f64, eps_high: f64) -> Vec<f64> {
    ratios
        .iter()
        .map(|&w| (w * advantage).min(w.clamp(1.0 - eps_low, 1.0 + eps_high) * advantage))
        .collect()
}

/// Summed clipped surrogate of the tokens whose current log-probs are `lp`,
/// with importance ratios against `behavior`. Returns the scalar and the
/// ratio values.
pub fn surrogate_on_tape(
    tape: &mut Tape,
    lp: Var,
    behavior: &[f64],
    advantage: f64,
    eps_low: f64,
    eps_high: f64,
) -> Result<(Var, Vec<f64>)> {
    let b = tape.constant(Tensor::vector(behavior.to_vec())?);
    let diff = tape.sub(lp, b)?;
    let w = tape.exp(diff)?;
    let ratios = tape.value(w).values().to_vec();
    let unclipped = tape.scale(w, advantage)?;
    let bounded = tape.clamp(w, 1.0 - eps_low, 1.0 + eps_high)?;
    let bounded = tape.scale(bounded, advantage)?;
    let s = tape.minimum(unclipped, bounded)?;
    Ok((tape.sum(s)?, ratios))
}

/// Whether the clamped branch is the binding one for this token.
pub fn is_clipped(ratio: f64, advantage: f64, eps_low: f64, eps_high: f64) -> bool {
    (advantage > 0.0 && ratio > 1.0 + eps_high) || (advantage < 0.0 && ratio < 1.0 - eps_low)
}

/// `Σ_v p·(log p − log q)` for one pair of log-probability rows.
pub fn kl_from_logprobs(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(&lp, &lq)| lp.exp() * (lp - lq)).sum()
}

/// Exact KL(current ∥ reference) averaged over every generated position of
/// `steps`.
pub fn kl_penalty(current: &PolicySnapshot, reference: &PolicySnapshot, steps: &[PolicyStep]) -> Result<f64> {
    let (mut total, mut n) = (0.0, 0usize);
    for step in steps {
        let p = generated_log_softmax(&forward(current, &step.model_input(), step.layout())?, step)?;
        let q = generated_log_softmax(&forward(reference, &step.model_input(), step.layout())?, step)?;
        for r in 0..p.rows() {
            total += kl_from_logprobs(p.row(r), q.row(r));
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

/// Runs one sampled episode with `behavior`.
pub fn rollout_episode(
    behavior: &PolicySnapshot,
    suite: &SuiteConfig,
    task: &TaskSpec,
    env_seed: u64,
    temperature: f64,
    rng: &mut ChaCha8Rng,
    reward: &RewardConfig,
) -> Result<Trajectory> {
    let cfg = behavior.config();
    let mut state = WorldState::reset(suite, task, env_seed)?;
    let mut steps = Vec::new();
    while !state.done() {
        let prefix = encode_prefix(behavior.vocab(), &task.instruction, &state.observation())?;
        let cot = generate_cot(behavior, &prefix, cfg.max_cot_len, &mut Decoding::Sample { temperature, rng })?;
        let cot_ok = !cot.truncated && validate_schema_ids(&cot.tokens, cfg.max_cot_len).is_ok();
        let mut context = prefix.clone();
        context.extend_from_slice(&cot.tokens);
        let decoded = decode_actions_parallel(behavior, &context, prefix.len(), &mut Decoding::Sample { temperature, rng })?;
        let step = PolicyStep {
            prefix,
            cot: cot.tokens,
            actions: decoded.tokens,
        };
        let logprobs = logprobs_from_logits(&decoded.logits, &step)?;
        state.step_chunk(&decoded.chunk)?;
        steps.push(RolloutStep {
            prefix: step.prefix,
            cot: step.cot,
            actions: step.actions,
            logprobs,
            cot_ok,
        });
    }
    let success = state.success();
    let format_ok = steps.iter().all(|s| s.cot_ok);
    Ok(Trajectory {
        task_id: task.id,
        env_seed,
        steps,
        success,
        format_ok,
        reward: compute_reward(success, format_ok, reward),
    })
}

/// `group_size` sampled episodes of `task` on distinct initial conditions
/// derived from `seed`, with standardized advantages.
pub fn collect_rollouts(
    behavior: &PolicySnapshot,
    suite: &SuiteConfig,
    task: &TaskSpec,
    group_size: usize,
    seed: u64,
    temperature: f64,
    reward: &RewardConfig,
) -> Result<RolloutGroup> {
    if group_size < 2 {
        return Err(RlError::Config("group_size must be at least 2".into()));
    }
    let mut trajectories = Vec::with_capacity(group_size);
    for i in 0..group_size as u64 {
        let env_seed = derive_seed(seed, ENV_STREAM + task.id as u64, i);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SAMPLE_STREAM + task.id as u64, i));
        trajectories.push(rollout_episode(behavior, suite, task, env_seed, temperature, &mut rng, reward)?);
    }
    let rewards: Vec<f64> = trajectories.iter().map(|t| t.reward).collect();
    Ok(RolloutGroup {
        task_id: task.id,
        advantages: compute_group_advantage(&rewards),
        trajectories,
    })
}

/// Per-step values of one gradient step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoStats {
    /// Value of the maximized objective before the update.
    pub objective: f64,
    pub surrogate: f64,
    pub kl: f64,
    pub clip_frac: f64,
    pub tokens: usize,
    /// Importance ratios per trajectory, concatenated over its steps.
    pub ratios: Vec<Vec<f64>>,
    pub advantages: Vec<f64>,
}

/// Objective of a minibatch from stored ratios, advantages and KL:
/// trajectory-averaged token-mean surrogate minus `beta·kl`.
pub fn objective_from_parts(ratios: &[Vec<f64>], advantages: &[f64], kl: f64, cfg: &GrpoConfig) -> f64 {
    let mut total = 0.0;
    for (w, &a) in ratios.iter().zip(advantages) {
        let s = clipped_surrogate(w, a, cfg.eps_low, cfg.eps_high);
        total += s.iter().sum::<f64>() / s.len() as f64;
    }
    total / ratios.len() as f64 - cfg.beta * kl
}

/// Objective and gradient of a minibatch of `(trajectory, advantage)` pairs.
/// The gradient is that of the loss `−objective`.
pub fn grpo_gradient(
    batch: &[(&Trajectory, f64)],
    current: &PolicySnapshot,
    reference: &PolicySnapshot,
    cfg: &GrpoConfig,
) -> Result<(GrpoStats, Vec<Vec<f64>>)> {
    if batch.is_empty() {
        return Err(RlError::EmptyBatch);
    }
    let m = batch.len() as f64;
    let kl_positions: usize = batch.iter().map(|(t, _)| t.token_count()).sum();
    let mut grads = zero_grads(current.params());
    let mut tape = Tape::new();
    let (mut surrogate, mut kl_sum, mut clipped) = (0.0, 0.0, 0usize);
    let mut all_ratios = Vec::with_capacity(batch.len());
    for (ti, &(traj, adv)) in batch.iter().enumerate() {
        let n = traj.token_count() as f64;
        let mut ratios = Vec::with_capacity(traj.token_count());
        for rs in &traj.steps {
            let step = rs.policy_step();
            tape.clear();
            let bound = bind_trainable(&mut tape, current);
            let (lp_rows, lp) = sequence_logprobs_on_tape(&mut tape, current, &bound, &step)?;
            let (s, wv) = surrogate_on_tape(&mut tape, lp, &rs.logprobs, adv, cfg.eps_low, cfg.eps_high)?;
            if let Some(i) = wv.iter().position(|x| !x.is_finite()) {
                return Err(RlError::NonFinite {
                    what: "importance ratio",
                    trajectory: ti,
                    dump: format!("token {i}"),
                });
            }
            clipped += wv.iter().filter(|&&x| is_clipped(x, adv, cfg.eps_low, cfg.eps_high)).count();
            ratios.extend_from_slice(&wv);
            let s = tape.scale(s, 1.0 / (n * m))?;
            surrogate += tape.value(s).item();

            let reference_rows = generated_log_softmax(&forward(reference, &step.model_input(), step.layout())?, &step)?;
            let q = tape.constant(reference_rows);
            let p = tape.exp(lp_rows)?;
            let gap = tape.sub(lp_rows, q)?;
            let kl = tape.mul(p, gap)?;
            let kl = tape.sum(kl)?;
            kl_sum += tape.value(kl).item();
            let kl = tape.scale(kl, cfg.beta / kl_positions as f64)?;
            let loss = tape.sub(kl, s)?;
            let g = tape.backward(loss)?;
            accumulate(&g, &bound, &mut grads);
        }
        all_ratios.push(ratios);
    }
    let kl = kl_sum / kl_positions as f64;
    Ok((
        GrpoStats {
            objective: surrogate - cfg.beta * kl,
            surrogate,
            kl,
            clip_frac: clipped as f64 / kl_positions as f64,
            tokens: kl_positions,
            ratios: all_ratios,
            advantages: batch.iter().map(|&(_, a)| a).collect(),
        },
        grads,
    ))
}

/// One ascent step on the minibatch objective.
pub fn grpo_step(
    batch: &[(&Trajectory, f64)],
    current: &mut PolicySnapshot,
    reference: &PolicySnapshot,
    opt: &mut Adam,
    cfg: &GrpoConfig,
) -> Result<GrpoStats> {
    let (stats, grads) = grpo_gradient(batch, current, reference, cfg)?;
    if !stats.objective.is_finite() || !all_finite(&grads) {
        return Err(RlError::NonFinite {
            what: "gradient",
            trajectory: 0,
            dump: String::new(),
        });
    }
    opt.step(current.params_mut(), &grads, cfg.learning_rate);
    Ok(stats)
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlMetrics {
    pub iteration: usize,
    pub mean_reward: f64,
    /// Greedy success rate of the policy that collected this iteration's rollouts.
    pub sr: Option<f64>,
    pub kl: f64,
    pub clip_frac: f64,
    pub format_rate: f64,
    pub rollout_sr: f64,
    pub objective: f64,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Debug)]
pub struct RlOutcome {
    pub snapshot: PolicySnapshot,
    pub metrics: Vec<RlMetrics>,
    pub checkpoint: PathBuf,
}

fn greedy_sr(snap: &PolicySnapshot, suite: &SuiteConfig, cfg: &GrpoConfig) -> Result<Option<f64>> {
    if cfg.eval_conditions == 0 {
        return Ok(None);
    }
    let ec = EvalConfig {
        n_conditions: cfg.eval_conditions,
        seed: cfg.eval_seed,
        ..EvalConfig::default()
    };
    Ok(Some(evaluate(snap, suite, &ec)?.report.average_sr))
}

fn dump_trajectory(out: &Path, iteration: usize, traj: &Trajectory) -> Result<String> {
    let path = out.join(format!("nonfinite-iter{iteration}.json"));
    std::fs::write(&path, serde_json::to_vec(traj)?)?;
    Ok(path.display().to_string())
}

/// Trains from `init`, which also becomes the frozen reference. Writes
/// `metrics.jsonl`, periodic checkpoints and `final.ckpt` into `out`.
pub fn train_rl(cfg: &GrpoConfig, init: &PolicySnapshot, suite: &SuiteConfig, out: &Path) -> Result<RlOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out.join("checkpoints"))?;
    let reference = init.with_role(SnapshotRole::Reference);
    let mut current = init.with_role(SnapshotRole::Current);
    let mut opt = Adam::new(current.params(), cfg.adam);
    let mut metrics_file = BufWriter::new(File::create(out.join(METRICS_FILE))?);
    let mut history = Vec::with_capacity(cfg.iterations);
    let tasks = suite.tasks();
    for iteration in 0..cfg.iterations {
        let behavior = current.with_role(SnapshotRole::Behavior);
        let sr = greedy_sr(&behavior, suite, cfg)?;
        let iter_seed = derive_seed(cfg.seed, 1, iteration as u64);
        let mut groups = Vec::with_capacity(tasks.len());
        for task in &tasks {
            groups.push(collect_rollouts(
                &behavior,
                suite,
                task,
                cfg.group_size,
                iter_seed,
                cfg.temperature,
                &cfg.reward,
            )?);
        }
        let pairs: Vec<(&Trajectory, f64)> = groups
            .iter()
            .flat_map(|g| g.trajectories.iter().zip(g.advantages.iter().copied()))
            .collect();
        let n = pairs.len() as f64;
        let mean_reward = pairs.iter().map(|(t, _)| t.reward).sum::<f64>() / n;
        let format_rate = pairs.iter().filter(|(t, _)| t.format_ok).count() as f64 / n;
        let rollout_sr = pairs.iter().filter(|(t, _)| t.success).count() as f64 / n;

        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SHUFFLE_STREAM, iteration as u64));
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let (mut kl, mut clip, mut objective, mut updates) = (0.0, 0.0, 0.0, 0usize);
        for _ in 0..cfg.epochs {
            order.shuffle(&mut shuffle_rng);
            for chunk in order.chunks(cfg.minibatch_size) {
                let batch: Vec<(&Trajectory, f64)> = chunk.iter().map(|&i| pairs[i]).collect();
                if batch.iter().all(|&(_, a)| a == 0.0) && cfg.beta == 0.0 {
                    continue;
                }
                let stats = match grpo_step(&batch, &mut current, &reference, &mut opt, cfg) {
                    Ok(s) => s,
                    Err(RlError::NonFinite { what, trajectory, .. }) => {
                        let dump = dump_trajectory(out, iteration, batch[trajectory].0)?;
                        return Err(RlError::NonFinite { what, trajectory, dump });
                    }
                    Err(e) => return Err(e),
                };
                kl += stats.kl;
                clip += stats.clip_frac;
                objective += stats.objective;
                updates += 1;
            }
        }
        let u = updates.max(1) as f64;
        let m = RlMetrics {
            iteration,
            mean_reward,
            sr,
            kl: kl / u,
            clip_frac: clip / u,
            format_rate,
            rollout_sr,
            objective: objective / u,
        };
        log::info!(
            "rl iteration {iteration}: reward {:.3} rollout sr {:.3} greedy sr {:?} kl {:.5} clip {:.3}",
            m.mean_reward,
            m.rollout_sr,
            m.sr,
            m.kl,
            m.clip_frac
        );
        serde_json::to_writer(&mut metrics_file, &m)?;
        metrics_file.write_all(b"\n")?;
        metrics_file.flush()?;
        history.push(m);
        if cfg.checkpoint_every > 0 && (iteration + 1) % cfg.checkpoint_every == 0 && iteration + 1 < cfg.iterations {
            current.save(&out.join("checkpoints").join(format!("iter-{:04}.ckpt", iteration + 1)))?;
        }
    }
    let checkpoint = out.join(FINAL_CHECKPOINT);
    current.save(&checkpoint)?;
    Ok(RlOutcome {
        snapshot: current,
        metrics: history,
        checkpoint,
    })
}
