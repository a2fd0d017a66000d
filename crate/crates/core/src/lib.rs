//! Think-then-act policy laboratory.
//!
//! A small hybrid-attention transformer generates a chain of thought with
//! causal attention, then decodes a whole action chunk in one bidirectional
//! pass. Around it sit a grid-world manipulation simulator, a keyframe-based
//! reasoning dataset builder, supervised and grouped policy-gradient training,
//! and an evaluation harness for reasoning interventions and decoding latency.

pub mod commands;
pub mod config;
pub mod data;
pub mod env;
pub mod eval;
pub mod model;
pub mod optim;
pub mod rl;
pub mod sft;
pub mod tensor;
pub mod util;

pub use tensor::{Tape, Tensor, TensorError, Var};
