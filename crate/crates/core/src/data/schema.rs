use std::fmt;

use serde::{Deserialize, Serialize};

use super::annotate::{phase_of_cot, Phase};
use super::dataset::CotRecord;
use crate::model::{Special, TokenId, THINK_CLOSE, THINK_OPEN};

/// Why a trace failed the schema check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemaViolation {
    MissingOpen,
    DuplicateDelimiter,
    MissingClose,
    TooLong,
}

impl fmt::Display for SchemaViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SchemaViolation::MissingOpen => "missing-open",
            SchemaViolation::DuplicateDelimiter => "duplicate-delimiter",
            SchemaViolation::MissingClose => "missing-close",
            SchemaViolation::TooLong => "too-long",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Open,
    Close,
    Word,
}

fn check(kinds: &[Kind], max_len: usize) -> Result<(), SchemaViolation> {
    if kinds.first() != Some(&Kind::Open) {
        return Err(SchemaViolation::MissingOpen);
    }
    let opens = kinds.iter().filter(|&&k| k == Kind::Open).count();
    let closes = kinds.iter().filter(|&&k| k == Kind::Close).count();
    let last_is_close = kinds.last() == Some(&Kind::Close) && kinds.len() >= 2;
    if opens > 1 || closes > 1 || (closes == 1 && !last_is_close) {
        return Err(SchemaViolation::DuplicateDelimiter);
    }
    if !last_is_close {
        return Err(SchemaViolation::MissingClose);
    }
    if kinds.len() > max_len {
        return Err(SchemaViolation::TooLong);
    }
    Ok(())
}

/// Exactly one `<think>` first, exactly one `</think>` last, nothing
/// delimiter-like between them, at most `max_len` tokens.
pub fn validate_schema<S: AsRef<str>>(cot: &[S], max_len: usize) -> Result<(), SchemaViolation> {
    let kinds: Vec<Kind> = cot
        .iter()
        .map(|t| match t.as_ref() {
            s if s == Special::ThinkOpen.text() => Kind::Open,
            s if s == Special::ThinkClose.text() => Kind::Close,
            _ => Kind::Word,
        })
        .collect();
    check(&kinds, max_len)
}

/// Same check over vocabulary ids.
pub fn validate_schema_ids(cot: &[TokenId], max_len: usize) -> Result<(), SchemaViolation> {
    let kinds: Vec<Kind> = cot
        .iter()
        .map(|&t| match t {
            THINK_OPEN => Kind::Open,
            THINK_CLOSE => Kind::Close,
            _ => Kind::Word,
        })
        .collect();
    check(&kinds, max_len)
}

/// Records removed by the temporal filter.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalReport {
    /// Frame indices whose stage went backwards.
    pub dropped: Vec<usize>,
    /// Frame indices whose trace names no stage.
    pub unlabeled: Vec<usize>,
}

impl TemporalReport {
    pub fn total(&self) -> usize {
        self.dropped.len() + self.unlabeled.len()
    }
}

/// Keeps records whose stage never precedes a stage already kept.
/// Records must be in frame order for one demo.
pub fn check_temporal_consistency(records: Vec<CotRecord>) -> (Vec<CotRecord>, TemporalReport) {
    let mut report = TemporalReport::default();
    let mut kept = Vec::with_capacity(records.len());
    let mut high: Option<Phase> = None;
    for r in records {
        match phase_of_cot(&r.cot_tokens) {
            None => report.unlabeled.push(r.frame_idx),
            Some(p) if high.is_some_and(|h| p < h) => report.dropped.push(r.frame_idx),
            Some(p) => {
                high = Some(p);
                kept.push(r);
            }
        }
    }
    (kept, report)
}
