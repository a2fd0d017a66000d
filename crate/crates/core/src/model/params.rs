use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layout::PrefixAttention;
use super::vocab::VocabSpec;
use super::{ModelError, Result};
use crate::tensor::{read_checkpoint, write_checkpoint, Tensor};
use crate::util::sha256_hex;

/// Architecture and action-space sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    /// Hidden width of the feed-forward block.
    pub mlp_dim: usize,
    /// Action chunk length (steps per chunk).
    #[serde(rename = "h")]
    pub chunk_len: usize,
    /// Control dimensions per step.
    #[serde(rename = "d")]
    pub action_dim: usize,
    /// Uniform bins per action cell.
    #[serde(rename = "B")]
    pub bins: usize,
    pub max_cot_len: usize,
    /// Positions available to prefix + reasoning tokens.
    pub max_context: usize,
    pub prefix_attention: PrefixAttention,
    pub init_std: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            model_dim: 64,
            mlp_dim: 128,
            chunk_len: 5,
            action_dim: 3,
            bins: 256,
            max_cot_len: 16,
            max_context: 48,
            prefix_attention: PrefixAttention::Bidirectional,
            init_std: 0.05,
            init_seed: 7,
        }
    }
}

impl ModelConfig {
    /// Chunk geometry used at full scale: 10-step chunks over a 7-dim arm.
    pub fn full_scale_chunking() -> Self {
        Self {
            chunk_len: 10,
            action_dim: 7,
            ..Self::default()
        }
    }

    pub fn action_slots(&self) -> usize {
        self.chunk_len * self.action_dim
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.layers == 0 || self.heads == 0 || self.model_dim == 0 || self.mlp_dim == 0 {
            return fail("layers, heads, model_dim and mlp_dim must be positive".into());
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return fail(format!("model_dim {} not divisible by heads {}", self.model_dim, self.heads));
        }
        if self.chunk_len == 0 || self.action_dim == 0 {
            return fail("h and d must be at least 1".into());
        }
        if self.bins < 2 {
            return fail(format!("B must be at least 2, got {}", self.bins));
        }
        if self.max_cot_len < 2 {
            return fail(format!("max_cot_len must be at least 2, got {}", self.max_cot_len));
        }
        Ok(())
    }
}

/// Which policy a snapshot plays during RL.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SnapshotRole {
    Current,
    Behavior,
    Reference,
}

/// Parameter positions for one transformer block.
#[derive(Debug, Clone)]
pub(crate) struct BlockIndex {
    pub ln1_gamma: usize,
    pub ln1_beta: usize,
    pub query: Vec<usize>,
    pub key: Vec<usize>,
    pub value: Vec<usize>,
    pub out: Vec<usize>,
    pub out_bias: usize,
    pub ln2_gamma: usize,
    pub ln2_beta: usize,
    pub up: usize,
    pub up_bias: usize,
    pub down: usize,
    pub down_bias: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct ParamIndex {
    pub token_embed: usize,
    pub position_embed: usize,
    pub blocks: Vec<BlockIndex>,
    pub final_gamma: usize,
    pub final_beta: usize,
    pub head: usize,
    pub head_bias: usize,
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Ones,
    Zeros,
}

fn param_plan(cfg: &ModelConfig, vocab: usize) -> (Vec<(String, Vec<usize>, Init)>, ParamIndex) {
    let d = cfg.model_dim;
    let dh = cfg.head_dim();
    let mut plan = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, init: Init| {
        plan.push((name, shape, init));
        plan.len() - 1
    };
    let token_embed = add("embed.token".into(), vec![vocab, d], Init::Normal);
    let position_embed = add(
        "embed.position".into(),
        vec![cfg.max_context + cfg.action_slots(), d],
        Init::Normal,
    );
    let mut blocks = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let p = format!("blocks.{l}");
        let ln1_gamma = add(format!("{p}.ln1.gamma"), vec![d], Init::Ones);
        let ln1_beta = add(format!("{p}.ln1.beta"), vec![d], Init::Zeros);
        let (mut query, mut key, mut value, mut out) = (vec![], vec![], vec![], vec![]);
        for h in 0..cfg.heads {
            query.push(add(format!("{p}.attn.h{h}.query"), vec![d, dh], Init::Normal));
            key.push(add(format!("{p}.attn.h{h}.key"), vec![d, dh], Init::Normal));
            value.push(add(format!("{p}.attn.h{h}.value"), vec![d, dh], Init::Normal));
            out.push(add(format!("{p}.attn.h{h}.out"), vec![dh, d], Init::Normal));
        }
        let out_bias = add(format!("{p}.attn.out_bias"), vec![d], Init::Zeros);
        let ln2_gamma = add(format!("{p}.ln2.gamma"), vec![d], Init::Ones);
        let ln2_beta = add(format!("{p}.ln2.beta"), vec![d], Init::Zeros);
        let up = add(format!("{p}.mlp.up"), vec![d, cfg.mlp_dim], Init::Normal);
        let up_bias = add(format!("{p}.mlp.up_bias"), vec![cfg.mlp_dim], Init::Zeros);
        let down = add(format!("{p}.mlp.down"), vec![cfg.mlp_dim, d], Init::Normal);
        let down_bias = add(format!("{p}.mlp.down_bias"), vec![d], Init::Zeros);
        blocks.push(BlockIndex {
            ln1_gamma,
            ln1_beta,
            query,
            key,
            value,
            out,
            out_bias,
            ln2_gamma,
            ln2_beta,
            up,
            up_bias,
            down,
            down_bias,
        });
    }
    let final_gamma = add("final_ln.gamma".into(), vec![d], Init::Ones);
    let final_beta = add("final_ln.beta".into(), vec![d], Init::Zeros);
    let head = add("head.weight".into(), vec![d, vocab], Init::Normal);
    let head_bias = add("head.bias".into(), vec![vocab], Init::Zeros);
    let index = ParamIndex {
        token_embed,
        position_embed,
        blocks,
        final_gamma,
        final_beta,
        head,
        head_bias,
    };
    (plan, index)
}

/// Named parameter tensors, shared copy-on-write between snapshots.
#[derive(Debug, Clone)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Arc<Tensor>>,
}

impl ParamSet {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn shared(&self, i: usize) -> Arc<Tensor> {
        Arc::clone(&self.tensors[i])
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &*self.tensors[i])
    }

    /// Mutable access; copies the tensor first if another snapshot shares it.
    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        Arc::make_mut(&mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter().map(|t| &**t))
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }
}

/// A complete policy: configuration, vocabulary, parameters and role.
///
/// Snapshots are read-only while rollouts run; the forward-pass counter is
/// the only interior state.
#[derive(Debug)]
pub struct PolicySnapshot {
    config: ModelConfig,
    vocab: VocabSpec,
    params: ParamSet,
    pub(crate) index: ParamIndex,
    role: SnapshotRole,
    passes: AtomicU64,
}

impl Clone for PolicySnapshot {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            params: self.params.clone(),
            index: self.index.clone(),
            role: self.role,
            passes: AtomicU64::new(0),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    role: SnapshotRole,
    vocab_sha256: String,
}

impl PolicySnapshot {
    /// Random initialization from `config.init_seed`.
    pub fn init(config: ModelConfig, vocab: VocabSpec) -> Result<Self> {
        Self::build(config, vocab, true)
    }

    /// All-zero parameters (layer-norm scales included).
    pub fn zeros(config: ModelConfig, vocab: VocabSpec) -> Result<Self> {
        Self::build(config, vocab, false)
    }

    fn build(config: ModelConfig, vocab: VocabSpec, random: bool) -> Result<Self> {
        config.validate()?;
        if vocab.bins() != config.bins {
            return Err(ModelError::Config(format!(
                "vocabulary has {} action bins, config expects {}",
                vocab.bins(),
                config.bins
            )));
        }
        let (plan, index) = param_plan(&config, vocab.size());
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let normal = Normal::new(0.0, config.init_std).map_err(|e| ModelError::Config(e.to_string()))?;
        let mut names = Vec::with_capacity(plan.len());
        let mut tensors = Vec::with_capacity(plan.len());
        for (name, shape, init) in plan {
            let len: usize = shape.iter().product();
            let values = match (random, init) {
                (false, _) | (true, Init::Zeros) => vec![0.0; len],
                (true, Init::Ones) => vec![1.0; len],
                (true, Init::Normal) => (0..len).map(|_| normal.sample(&mut rng)).collect(),
            };
            names.push(name);
            tensors.push(Arc::new(Tensor::new(shape, values)?));
        }
        Ok(Self {
            config,
            vocab,
            params: ParamSet { names, tensors },
            index,
            role: SnapshotRole::Current,
            passes: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &VocabSpec {
        &self.vocab
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn role(&self) -> SnapshotRole {
        self.role
    }

    /// A copy sharing parameter storage, carrying a new role.
    pub fn with_role(&self, role: SnapshotRole) -> Self {
        let mut s = self.clone();
        s.role = role;
        s
    }

    pub fn forward_passes(&self) -> u64 {
        self.passes.load(Ordering::Relaxed)
    }

    pub(crate) fn count_pass(&self) {
        self.passes.fetch_add(1, Ordering::Relaxed);
    }

    /// True when both snapshots hold bit-identical parameters.
    pub fn same_parameters(&self, other: &Self) -> bool {
        self.params.names == other.params.names
            && self
                .params
                .tensors
                .iter()
                .zip(&other.params.tensors)
                .all(|(a, b)| a.shape() == b.shape() && a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()))
    }

    pub fn vocab_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".vocab.json");
        PathBuf::from(s)
    }

    /// Writes the binary checkpoint and its vocabulary sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let vocab_json = serde_json::to_string_pretty(&self.vocab)?;
        let meta = CheckpointMeta {
            config: self.config.clone(),
            role: self.role,
            vocab_sha256: sha256_hex(vocab_json.as_bytes()),
        };
        let meta = serde_json::to_string(&meta)?;
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &meta, self.params.iter())?;
        std::fs::write(path, buf)?;
        std::fs::write(Self::vocab_path(path), vocab_json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let (meta, tensors) = read_checkpoint(&mut bytes.as_slice())?;
        let meta: CheckpointMeta = serde_json::from_str(&meta)?;
        let vocab_json = std::fs::read_to_string(Self::vocab_path(path))?;
        if sha256_hex(vocab_json.as_bytes()) != meta.vocab_sha256 {
            return Err(ModelError::Load(format!(
                "vocabulary sidecar for {} does not match the checkpoint",
                path.display()
            )));
        }
        let vocab: VocabSpec = serde_json::from_str(&vocab_json)?;
        let mut snap = Self::zeros(meta.config, vocab)?;
        if tensors.len() != snap.params.len() {
            return Err(ModelError::Load(format!(
                "expected {} tensors, found {}",
                snap.params.len(),
                tensors.len()
            )));
        }
        for (i, (name, t)) in tensors.into_iter().enumerate() {
            if name != snap.params.names[i] || t.shape() != snap.params.get(i).shape() {
                return Err(ModelError::Load(format!(
                    "tensor {i} is {name} {:?}, expected {} {:?}",
                    t.shape(),
                    snap.params.names[i],
                    snap.params.get(i).shape()
                )));
            }
            snap.params.tensors[i] = Arc::new(t);
        }
        snap.role = meta.role;
        Ok(snap)
    }
}
