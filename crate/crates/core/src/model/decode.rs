//! Reasoning generation, parallel action decoding and sequence scoring.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::actions::{ActionChunk, ActionTokenizer};
use super::layout::SequenceLayout;
use super::params::PolicySnapshot;
use super::transformer::{bind_params, forward, forward_on_tape, BlockAttention, KvCache};
use super::vocab::{TokenId, ACT_QUERY, THINK_CLOSE, THINK_OPEN};
use super::{ModelError, Result};
use crate::tensor::{kernels, Tape, Tensor};

/// Token selection rule.
#[derive(Debug)]
pub enum Decoding<'a> {
    Greedy,
    Sample { temperature: f64, rng: &'a mut ChaCha8Rng },
}

impl Decoding<'_> {
    /// Sampling at temperature zero is greedy decoding.
    fn is_greedy(&self) -> bool {
        match self {
            Decoding::Greedy => true,
            Decoding::Sample { temperature, .. } => *temperature <= 0.0,
        }
    }

    /// Picks an index of `logits` restricted to `range`.
    fn choose(&mut self, logits: &[f64], range: std::ops::Range<usize>) -> usize {
        let slice = &logits[range.clone()];
        if self.is_greedy() {
            return range.start + kernels::argmax(slice);
        }
        let Decoding::Sample { temperature, rng } = self else {
            unreachable!()
        };
        let scaled: Vec<f64> = slice.iter().map(|l| l / *temperature).collect();
        let mut probs = vec![0.0; scaled.len()];
        kernels::softmax_row(&scaled, &mut probs);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return range.start + i;
            }
        }
        range.start + probs.len() - 1
    }
}

/// One decision of the policy: `prefix`, reasoning `cot` (delimiters
/// included) and the realized action tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyStep {
    pub prefix: Vec<TokenId>,
    pub cot: Vec<TokenId>,
    pub actions: Vec<TokenId>,
}

impl PolicyStep {
    pub fn layout(&self) -> SequenceLayout {
        SequenceLayout::new(self.prefix.len(), self.cot.len(), self.actions.len())
    }

    /// Model input: prefix and reasoning followed by query slots.
    pub fn model_input(&self) -> Vec<TokenId> {
        let mut t = Vec::with_capacity(self.prefix.len() + self.cot.len() + self.actions.len());
        t.extend_from_slice(&self.prefix);
        t.extend_from_slice(&self.cot);
        t.extend(std::iter::repeat_n(ACT_QUERY, self.actions.len()));
        t
    }

    /// `(position, realized token)` for every generated token: reasoning
    /// tokens after the opening delimiter (predicted one position earlier),
    /// then each action slot.
    pub fn generated_targets(&self) -> Vec<(usize, TokenId)> {
        let layout = self.layout();
        let cot = self.cot.iter().skip(1).enumerate().map(|(t, &tok)| (layout.prefix_len + t, tok));
        let act = self.actions.iter().enumerate().map(|(i, &tok)| (layout.action_start() + i, tok));
        cot.chain(act).collect()
    }

    pub fn generated_len(&self) -> usize {
        self.cot.len().saturating_sub(1) + self.actions.len()
    }
}

/// Result of reasoning generation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratedCot {
    pub tokens: Vec<TokenId>,
    /// Set when the length limit forced the closing delimiter.
    pub truncated: bool,
}

/// Autoregressive reasoning from `<think>`, stopping at `</think>` or when
/// `max_cot_len` tokens (delimiters included) have been produced.
pub fn generate_cot(
    snap: &PolicySnapshot,
    prefix: &[TokenId],
    max_cot_len: usize,
    decoding: &mut Decoding<'_>,
) -> Result<GeneratedCot> {
    if max_cot_len < 2 {
        return Err(ModelError::Config(format!("max_cot_len must be at least 2, got {max_cot_len}")));
    }
    if prefix.is_empty() {
        return Err(ModelError::Layout("empty prefix".into()));
    }
    let cfg = snap.config();
    if prefix.len() + max_cot_len > cfg.max_context {
        return Err(ModelError::Layout(format!(
            "prefix {} + reasoning {} exceeds max_context {}",
            prefix.len(),
            max_cot_len,
            cfg.max_context
        )));
    }
    let vocab = snap.vocab().size();
    let mut cache = KvCache::new(snap);
    let positions: Vec<usize> = (0..prefix.len()).collect();
    cache.extend(snap, prefix, &positions, cfg.prefix_attention.into())?;
    let mut tokens = vec![THINK_OPEN];
    loop {
        let pos = prefix.len() + tokens.len() - 1;
        let last = *tokens.last().expect("nonempty");
        let logits = cache.extend(snap, &[last], &[pos], BlockAttention::Full)?;
        let next = decoding.choose(logits.row(0), 0..vocab);
        if next == THINK_CLOSE {
            tokens.push(next);
            return Ok(GeneratedCot {
                tokens,
                truncated: false,
            });
        }
        if tokens.len() + 1 >= max_cot_len {
            tokens.push(THINK_CLOSE);
            return Ok(GeneratedCot {
                tokens,
                truncated: true,
            });
        }
        tokens.push(next);
    }
}

/// Output of one parallel action decode.
#[derive(Debug, Clone)]
pub struct DecodedActions {
    pub chunk: ActionChunk,
    /// Vocabulary ids of the chosen action tokens.
    pub tokens: Vec<TokenId>,
    /// Logits of the single forward pass over the whole layout.
    pub logits: Tensor,
}

fn chunk_from_tokens(snap: &PolicySnapshot, tokens: &[TokenId]) -> Result<ActionChunk> {
    let cfg = snap.config();
    let tok = ActionTokenizer::new(cfg.bins)?;
    let bins = tokens
        .iter()
        .map(|&t| snap.vocab().bin_of(t).ok_or_else(|| ModelError::Layout(format!("token {t} is not an action"))))
        .collect::<Result<Vec<_>>>()?;
    ActionChunk::from_bins(cfg.chunk_len, cfg.action_dim, bins, &tok)
}

fn check_context(context: &[TokenId], prefix_len: usize) -> Result<()> {
    if context.len() <= prefix_len || context[prefix_len] != THINK_OPEN || context.last() != Some(&THINK_CLOSE) {
        return Err(ModelError::Layout(
            "context must be prefix followed by reasoning delimited by <think> ... </think>".into(),
        ));
    }
    Ok(())
}

/// Decodes all `h·d` action tokens with one forward pass over
/// `context + [ACT_QUERY; h·d]`. Each slot picks from the action bins only.
pub fn decode_actions_parallel(
    snap: &PolicySnapshot,
    context: &[TokenId],
    prefix_len: usize,
    decoding: &mut Decoding<'_>,
) -> Result<DecodedActions> {
    check_context(context, prefix_len)?;
    let slots = snap.config().action_slots();
    let layout = SequenceLayout::new(prefix_len, context.len() - prefix_len, slots);
    let mut input = context.to_vec();
    input.extend(std::iter::repeat_n(ACT_QUERY, slots));
    let logits = forward(snap, &input, layout)?;
    let range = snap.vocab().action_range();
    let tokens: Vec<TokenId> = (0..slots)
        .map(|i| decoding.choose(logits.row(layout.action_start() + i), range.clone()))
        .collect();
    let chunk = chunk_from_tokens(snap, &tokens)?;
    Ok(DecodedActions { chunk, tokens, logits })
}

/// Token-by-token emulation of an autoregressive action decoder: pass `i`
/// sees the `i` tokens already chosen in earlier slots plus one query slot,
/// so the block costs `h·d` forward passes.
pub fn decode_actions_autoregressive(
    snap: &PolicySnapshot,
    context: &[TokenId],
    prefix_len: usize,
) -> Result<(ActionChunk, Vec<TokenId>)> {
    check_context(context, prefix_len)?;
    let slots = snap.config().action_slots();
    let range = snap.vocab().action_range();
    let mut chosen: Vec<TokenId> = Vec::with_capacity(slots);
    for i in 0..slots {
        let layout = SequenceLayout::new(prefix_len, context.len() - prefix_len, i + 1);
        let mut input = context.to_vec();
        input.extend_from_slice(&chosen);
        input.push(ACT_QUERY);
        let logits = forward(snap, &input, layout)?;
        let row = logits.row(layout.action_start() + i);
        chosen.push(range.start + kernels::argmax(&row[range.clone()]));
    }
    let chunk = chunk_from_tokens(snap, &chosen)?;
    Ok((chunk, chosen))
}

/// Log-probabilities of generated tokens from a logits matrix, in the order
/// of [`PolicyStep::generated_targets`]. Computed with the same tape
/// primitives the trainer uses.
pub fn logprobs_from_logits(logits: &Tensor, step: &PolicyStep) -> Result<Vec<f64>> {
    let targets = step.generated_targets();
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let rows: Vec<usize> = targets.iter().map(|&(p, _)| p).collect();
    let picked = tape.select_rows(l, &rows)?;
    let lp = tape.log_softmax(picked)?;
    let picks: Vec<(usize, usize)> = targets.iter().enumerate().map(|(i, &(_, t))| (i, t)).collect();
    let g = tape.gather(lp, &picks)?;
    Ok(tape.value(g).values().to_vec())
}

/// Full-vocabulary log-softmax rows at the generated positions.
pub fn generated_log_softmax(logits: &Tensor, step: &PolicyStep) -> Result<Tensor> {
    let rows: Vec<usize> = step.generated_targets().iter().map(|&(p, _)| p).collect();
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let picked = tape.select_rows(l, &rows)?;
    let lp = tape.log_softmax(picked)?;
    Ok(tape.value(lp).clone())
}

/// Per-token log-probabilities of every generated token of `step`.
pub fn sequence_logprobs(snap: &PolicySnapshot, step: &PolicyStep) -> Result<Vec<f64>> {
    let logits = forward(snap, &step.model_input(), step.layout())?;
    logprobs_from_logits(&logits, step)
}

/// Same as [`sequence_logprobs`] but on a caller-provided tape with
/// trainable parameters; returns the log-softmax rows and gathered values.
pub fn sequence_logprobs_on_tape(
    tape: &mut Tape,
    snap: &PolicySnapshot,
    bound: &super::transformer::BoundParams,
    step: &PolicyStep,
) -> Result<(crate::tensor::Var, crate::tensor::Var)> {
    let logits = forward_on_tape(tape, snap, bound, &step.model_input(), step.layout())?;
    let targets = step.generated_targets();
    let rows: Vec<usize> = targets.iter().map(|&(p, _)| p).collect();
    let picked = tape.select_rows(logits, &rows)?;
    let lp = tape.log_softmax(picked)?;
    let picks: Vec<(usize, usize)> = targets.iter().enumerate().map(|(i, &(_, t))| (i, t)).collect();
    let g = tape.gather(lp, &picks)?;
    Ok((lp, g))
}

/// Convenience for callers that just need a fresh trainable binding.
pub fn bind_trainable(tape: &mut Tape, snap: &PolicySnapshot) -> super::transformer::BoundParams {
    bind_params(tape, snap, true)
}
