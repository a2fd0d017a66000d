use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Result;
use crate::data::validate_schema_ids;
use crate::env::{expert_chunk, TaskSpec, WorldState};
use crate::model::{
    decode_actions_autoregressive, decode_actions_parallel, generate_cot, ActionChunk, ActionTokenizer, Decoding,
    PolicySnapshot, TokenId, VocabSpec, THINK_CLOSE, THINK_OPEN,
};
use crate::sft::encode_prefix;

/// What the policy does with its reasoning trace before acting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CotMode {
    #[default]
    Full,
    Mask,
    Random,
}

/// How the action block is decoded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    #[default]
    Hybrid,
    ArEmulation,
}

/// Replacement trace for an intervention. `Mask` ignores `rng`; `Random`
/// draws `k` text tokens uniformly.
pub fn intervene_cot(
    cot: &[TokenId],
    mode: CotMode,
    k: usize,
    vocab: &VocabSpec,
    rng: &mut ChaCha8Rng,
) -> Vec<TokenId> {
    match mode {
        CotMode::Full => cot.to_vec(),
        CotMode::Mask => vec![THINK_OPEN, THINK_CLOSE],
        CotMode::Random => {
            let words = vocab.text_range();
            let mut out = Vec::with_capacity(k + 2);
            out.push(THINK_OPEN);
            out.extend((0..k).map(|_| rng.random_range(words.clone())));
            out.push(THINK_CLOSE);
            out
        }
    }
}

/// One policy decision.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub chunk: ActionChunk,
    /// Trace that conditioned the actions, delimiters included.
    pub cot: Vec<TokenId>,
    /// Whether the trace passed the schema check without truncation.
    pub format_ok: bool,
}

pub trait Policy {
    fn act(&mut self, task: &TaskSpec, state: &WorldState) -> Result<Decision>;

    /// Vocabulary used to render traces, when the policy has one.
    fn vocab(&self) -> Option<&VocabSpec> {
        None
    }
}

/// Greedy transformer policy with optional reasoning interventions.
pub struct ModelPolicy<'a> {
    snap: &'a PolicySnapshot,
    cot_mode: CotMode,
    decode_mode: DecodeMode,
    random_len: usize,
    rng: ChaCha8Rng,
}

impl<'a> ModelPolicy<'a> {
    pub fn new(snap: &'a PolicySnapshot, cot_mode: CotMode, decode_mode: DecodeMode, random_len: usize, seed: u64) -> Self {
        Self {
            snap,
            cot_mode,
            decode_mode,
            random_len,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Policy for ModelPolicy<'_> {
    fn act(&mut self, task: &TaskSpec, state: &WorldState) -> Result<Decision> {
        let snap = self.snap;
        let cfg = snap.config();
        let prefix = encode_prefix(snap.vocab(), &task.instruction, &state.observation())?;
        let (cot, format_ok) = match self.cot_mode {
            CotMode::Full => {
                let g = generate_cot(snap, &prefix, cfg.max_cot_len, &mut Decoding::Greedy)?;
                let ok = !g.truncated && validate_schema_ids(&g.tokens, cfg.max_cot_len).is_ok();
                (g.tokens, ok)
            }
            mode => (intervene_cot(&[], mode, self.random_len, snap.vocab(), &mut self.rng), true),
        };
        let mut context = prefix.clone();
        context.extend_from_slice(&cot);
        let chunk = match self.decode_mode {
            DecodeMode::Hybrid => decode_actions_parallel(snap, &context, prefix.len(), &mut Decoding::Greedy)?.chunk,
            DecodeMode::ArEmulation => decode_actions_autoregressive(snap, &context, prefix.len())?.0,
        };
        Ok(Decision { chunk, cot, format_ok })
    }

    fn vocab(&self) -> Option<&VocabSpec> {
        Some(self.snap.vocab())
    }
}

/// The scripted expert behind the policy interface.
pub struct ExpertPolicy {
    horizon: usize,
    tok: ActionTokenizer,
}

impl ExpertPolicy {
    pub fn new(horizon: usize, bins: usize) -> Result<Self> {
        Ok(Self {
            horizon,
            tok: ActionTokenizer::new(bins)?,
        })
    }
}

impl Policy for ExpertPolicy {
    fn act(&mut self, _task: &TaskSpec, state: &WorldState) -> Result<Decision> {
        Ok(Decision {
            chunk: expert_chunk(state, self.horizon, &self.tok)?,
            cot: vec![THINK_OPEN, THINK_CLOSE],
            format_ok: true,
        })
    }
}
