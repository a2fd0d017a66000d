use serde::{Deserialize, Serialize};

use crate::tensor::Mask;

/// How prefix (observation + instruction) tokens attend among themselves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PrefixAttention {
    #[default]
    Bidirectional,
    Causal,
}

/// Segment lengths of one assembled sequence: prefix, reasoning, action slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SequenceLayout {
    pub prefix_len: usize,
    pub cot_len: usize,
    pub action_len: usize,
}

/// Which segment a position belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Prefix,
    Cot(usize),
    Action(usize),
}

impl SequenceLayout {
    pub fn new(prefix_len: usize, cot_len: usize, action_len: usize) -> Self {
        Self {
            prefix_len,
            cot_len,
            action_len,
        }
    }

    pub fn total(&self) -> usize {
        self.prefix_len + self.cot_len + self.action_len
    }

    pub fn context_len(&self) -> usize {
        self.prefix_len + self.cot_len
    }

    pub fn action_start(&self) -> usize {
        self.context_len()
    }

    pub fn segment(&self, pos: usize) -> Segment {
        if pos < self.prefix_len {
            Segment::Prefix
        } else if pos < self.context_len() {
            Segment::Cot(pos - self.prefix_len)
        } else {
            Segment::Action(pos - self.context_len())
        }
    }

    /// Positions whose logits predict a generated token: every reasoning
    /// position except the closing delimiter, then every action slot.
    pub fn generated_positions(&self) -> Vec<usize> {
        let cot = (0..self.cot_len.saturating_sub(1)).map(|t| self.prefix_len + t);
        cot.chain(self.action_start()..self.total()).collect()
    }
}

/// Attention matrix for a layout: causal over reasoning tokens, bidirectional
/// within the action block, prefix as configured.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HybridMask {
    layout: SequenceLayout,
    mask: Mask,
}

impl HybridMask {
    pub fn layout(&self) -> SequenceLayout {
        self.layout
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.mask.allowed(q, k)
    }
}

/// Builds the hybrid attention mask for `layout`.
pub fn build_hybrid_mask(layout: SequenceLayout, prefix: PrefixAttention) -> HybridMask {
    let n = layout.total();
    let mut allow = vec![false; n * n];
    let p = layout.prefix_len;
    let ctx = layout.context_len();
    for q in 0..n {
        let row = &mut allow[q * n..(q + 1) * n];
        match layout.segment(q) {
            Segment::Prefix => {
                let upto = match prefix {
                    PrefixAttention::Bidirectional => p,
                    PrefixAttention::Causal => q + 1,
                };
                row[..upto].iter_mut().for_each(|a| *a = true);
            }
            Segment::Cot(_) => row[..=q].iter_mut().for_each(|a| *a = true),
            Segment::Action(_) => row.iter_mut().for_each(|a| *a = true),
        }
        debug_assert!(q < ctx || row.iter().all(|&a| a));
    }
    HybridMask {
        layout,
        mask: Mask::new(n, n, allow).expect("square mask"),
    }
}
