//! Forward computation, on a tape for training and incrementally with a
//! key/value cache for decoding. Both paths issue the same kernel calls in
//! the same order, so their logits agree bit for bit.

use super::layout::{build_hybrid_mask, PrefixAttention, SequenceLayout};
use super::params::PolicySnapshot;
use super::vocab::TokenId;
use super::{ModelError, Result};
use crate::tensor::{kernels, Tape, Tensor, Var};

/// Parameters registered on a tape, in snapshot order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Registers every parameter as a leaf; `trainable` decides whether
/// gradients are tracked.
pub fn bind_params(tape: &mut Tape, snap: &PolicySnapshot, trainable: bool) -> BoundParams {
    let p = snap.params();
    let vars = (0..p.len()).map(|i| tape.leaf(p.shared(i), trainable)).collect();
    BoundParams { vars }
}

fn position_ids(snap: &PolicySnapshot, layout: SequenceLayout) -> Result<Vec<usize>> {
    let cfg = snap.config();
    if layout.context_len() > cfg.max_context {
        return Err(ModelError::Layout(format!(
            "context of {} tokens exceeds max_context {}",
            layout.context_len(),
            cfg.max_context
        )));
    }
    if layout.action_len > cfg.action_slots() {
        return Err(ModelError::Layout(format!(
            "{} action slots exceed h*d = {}",
            layout.action_len,
            cfg.action_slots()
        )));
    }
    let ctx = 0..layout.context_len();
    let slots = (0..layout.action_len).map(|j| cfg.max_context + j);
    Ok(ctx.chain(slots).collect())
}

/// Full forward pass recorded on `tape`; returns logits `[total × V]`.
pub fn forward_on_tape(
    tape: &mut Tape,
    snap: &PolicySnapshot,
    bound: &BoundParams,
    tokens: &[TokenId],
    layout: SequenceLayout,
) -> Result<Var> {
    if tokens.len() != layout.total() {
        return Err(ModelError::Layout(format!(
            "{} tokens for a layout of {}",
            tokens.len(),
            layout.total()
        )));
    }
    if layout.total() == 0 {
        return Err(ModelError::Layout("empty sequence".into()));
    }
    let vocab = snap.vocab().size();
    if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
        return Err(ModelError::Layout(format!("token id {bad} outside vocabulary of {vocab}")));
    }
    let cfg = snap.config();
    let idx = &snap.index;
    let v = |i: usize| bound.vars[i];
    let positions = position_ids(snap, layout)?;
    let mask = build_hybrid_mask(layout, cfg.prefix_attention);
    let scale = 1.0 / (cfg.head_dim() as f64).sqrt();

    let tok = tape.embedding(v(idx.token_embed), tokens)?;
    let pos = tape.embedding(v(idx.position_embed), &positions)?;
    let mut x = tape.add(tok, pos)?;
    for block in &idx.blocks {
        let h = tape.layer_norm(x, v(block.ln1_gamma), v(block.ln1_beta))?;
        let mut attn: Option<Var> = None;
        for head in 0..cfg.heads {
            let q = tape.matmul(h, v(block.query[head]))?;
            let k = tape.matmul(h, v(block.key[head]))?;
            let val = tape.matmul(h, v(block.value[head]))?;
            let scores = tape.matmul_nt(q, k)?;
            let scores = tape.scale(scores, scale)?;
            let probs = tape.masked_softmax(scores, mask.mask())?;
            let mixed = tape.matmul(probs, val)?;
            let o = tape.matmul(mixed, v(block.out[head]))?;
            attn = Some(match attn {
                None => o,
                Some(acc) => tape.add(acc, o)?,
            });
        }
        let attn = tape.add_row(attn.expect("at least one head"), v(block.out_bias))?;
        x = tape.add(x, attn)?;
        let h2 = tape.layer_norm(x, v(block.ln2_gamma), v(block.ln2_beta))?;
        let up = tape.matmul(h2, v(block.up))?;
        let up = tape.add_row(up, v(block.up_bias))?;
        let act = tape.gelu(up)?;
        let down = tape.matmul(act, v(block.down))?;
        let down = tape.add_row(down, v(block.down_bias))?;
        x = tape.add(x, down)?;
    }
    let xf = tape.layer_norm(x, v(idx.final_gamma), v(idx.final_beta))?;
    let logits = tape.matmul(xf, v(idx.head))?;
    let logits = tape.add_row(logits, v(idx.head_bias))?;
    snap.count_pass();
    Ok(logits)
}

/// Inference forward pass: logits `[total × V]` for every position.
pub fn forward(snap: &PolicySnapshot, tokens: &[TokenId], layout: SequenceLayout) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, snap, false);
    let logits = forward_on_tape(&mut tape, snap, &bound, tokens, layout)?;
    Ok(tape.value(logits).clone())
}

/// How rows appended in one [`KvCache::extend`] call see each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockAttention {
    Full,
    Causal,
}

impl From<PrefixAttention> for BlockAttention {
    fn from(p: PrefixAttention) -> Self {
        match p {
            PrefixAttention::Bidirectional => BlockAttention::Full,
            PrefixAttention::Causal => BlockAttention::Causal,
        }
    }
}

/// Cached keys and values for incremental decoding.
#[derive(Debug, Clone)]
pub struct KvCache {
    /// `[layer][head]` flattened `len × head_dim` rows.
    keys: Vec<Vec<Vec<f64>>>,
    values: Vec<Vec<Vec<f64>>>,
    len: usize,
}

fn add_vec(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn add_row_vec(x: &mut [f64], bias: &[f64]) {
    for row in x.chunks_mut(bias.len()) {
        for (o, b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

fn layer_norm_rows(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let d = gamma.len();
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(d).zip(out.chunks_mut(d)) {
        kernels::layer_norm_row(row, gamma, beta, o);
    }
    out
}

impl KvCache {
    pub fn new(snap: &PolicySnapshot) -> Self {
        let cfg = snap.config();
        Self {
            keys: vec![vec![Vec::new(); cfg.heads]; cfg.layers],
            values: vec![vec![Vec::new(); cfg.heads]; cfg.layers],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends `tokens` at `positions` (embedding-table ids) and returns
    /// their logits `[tokens.len() × V]`. Each new row attends to every
    /// cached row plus the new rows allowed by `block`.
    pub fn extend(
        &mut self,
        snap: &PolicySnapshot,
        tokens: &[TokenId],
        positions: &[usize],
        block: BlockAttention,
    ) -> Result<Tensor> {
        let cfg = snap.config();
        let m = tokens.len();
        if m == 0 || positions.len() != m {
            return Err(ModelError::Layout("extend needs one position per token".into()));
        }
        let d = cfg.model_dim;
        let dh = cfg.head_dim();
        let p = snap.params();
        let idx = &snap.index;
        let vocab = snap.vocab().size();
        let table_rows = p.get(idx.position_embed).rows();
        for (&t, &pos) in tokens.iter().zip(positions) {
            if t >= vocab || pos >= table_rows {
                return Err(ModelError::Layout(format!("token {t} at position {pos} out of range")));
            }
        }
        let scale = 1.0 / (dh as f64).sqrt();
        let total = self.len + m;
        let allow: Vec<Vec<bool>> = (0..m)
            .map(|r| {
                (0..total)
                    .map(|k| k < self.len || block == BlockAttention::Full || k - self.len <= r)
                    .collect()
            })
            .collect();

        let tok_table = p.get(idx.token_embed);
        let pos_table = p.get(idx.position_embed);
        let mut tok = Vec::with_capacity(m * d);
        let mut pos = Vec::with_capacity(m * d);
        for (&t, &ps) in tokens.iter().zip(positions) {
            tok.extend_from_slice(tok_table.row(t));
            pos.extend_from_slice(pos_table.row(ps));
        }
        let mut x = add_vec(&tok, &pos);

        for (l, block_idx) in idx.blocks.iter().enumerate() {
            let h = layer_norm_rows(&x, p.get(block_idx.ln1_gamma).values(), p.get(block_idx.ln1_beta).values());
            let mut attn: Option<Vec<f64>> = None;
            for head in 0..cfg.heads {
                let q = kernels::matmul(&h, p.get(block_idx.query[head]).values(), m, d, dh);
                let k = kernels::matmul(&h, p.get(block_idx.key[head]).values(), m, d, dh);
                let val = kernels::matmul(&h, p.get(block_idx.value[head]).values(), m, d, dh);
                self.keys[l][head].extend_from_slice(&k);
                self.values[l][head].extend_from_slice(&val);
                let keys = &self.keys[l][head];
                let values = &self.values[l][head];
                let mut scores = kernels::matmul_nt(&q, keys, m, dh, total);
                for s in scores.iter_mut() {
                    *s *= scale;
                }
                let mut probs = vec![0.0; m * total];
                for r in 0..m {
                    kernels::masked_softmax_row(
                        &scores[r * total..(r + 1) * total],
                        &allow[r],
                        &mut probs[r * total..(r + 1) * total],
                    );
                }
                let mixed = kernels::matmul(&probs, values, m, total, dh);
                let o = kernels::matmul(&mixed, p.get(block_idx.out[head]).values(), m, dh, d);
                attn = Some(match attn {
                    None => o,
                    Some(acc) => add_vec(&acc, &o),
                });
            }
            let mut attn = attn.expect("at least one head");
            add_row_vec(&mut attn, p.get(block_idx.out_bias).values());
            x = add_vec(&x, &attn);
            let h2 = layer_norm_rows(&x, p.get(block_idx.ln2_gamma).values(), p.get(block_idx.ln2_beta).values());
            let mut up = kernels::matmul(&h2, p.get(block_idx.up).values(), m, d, cfg.mlp_dim);
            add_row_vec(&mut up, p.get(block_idx.up_bias).values());
            let act: Vec<f64> = up.iter().map(|&u| kernels::gelu(u)).collect();
            let mut down = kernels::matmul(&act, p.get(block_idx.down).values(), m, cfg.mlp_dim, d);
            add_row_vec(&mut down, p.get(block_idx.down_bias).values());
            x = add_vec(&x, &down);
        }
        let xf = layer_norm_rows(&x, p.get(idx.final_gamma).values(), p.get(idx.final_beta).values());
        let mut logits = kernels::matmul(&xf, p.get(idx.head).values(), m, d, vocab);
        add_row_vec(&mut logits, p.get(idx.head_bias).values());
        self.len = total;
        snap.count_pass();
        Ok(Tensor::matrix(m, vocab, logits)?)
    }
}
