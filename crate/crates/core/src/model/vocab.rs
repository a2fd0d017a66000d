use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{ModelError, Result};

pub type TokenId = usize;

/// Control tokens, always occupying the first ids of the vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Special {
    Pad,
    Bos,
    Eos,
    ThinkOpen,
    ThinkClose,
    ActQuery,
}

impl Special {
    pub const ALL: [Special; 6] = [
        Special::Pad,
        Special::Bos,
        Special::Eos,
        Special::ThinkOpen,
        Special::ThinkClose,
        Special::ActQuery,
    ];

    pub fn text(self) -> &'static str {
        match self {
            Special::Pad => "<pad>",
            Special::Bos => "<bos>",
            Special::Eos => "<eos>",
            Special::ThinkOpen => "<think>",
            Special::ThinkClose => "</think>",
            Special::ActQuery => "<act>",
        }
    }

    pub fn id(self) -> TokenId {
        self as TokenId
    }
}

pub const THINK_OPEN: TokenId = Special::ThinkOpen as TokenId;
pub const THINK_CLOSE: TokenId = Special::ThinkClose as TokenId;
pub const ACT_QUERY: TokenId = Special::ActQuery as TokenId;
pub const BOS: TokenId = Special::Bos as TokenId;

/// Token alphabet: special ids, then text words, then `bins` action bins.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct VocabSpec {
    words: Vec<String>,
    bins: usize,
    index: HashMap<String, TokenId>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    words: Vec<String>,
    bins: usize,
}

impl TryFrom<VocabFile> for VocabSpec {
    type Error = ModelError;

    fn try_from(f: VocabFile) -> Result<Self> {
        VocabSpec::new(f.words, f.bins)
    }
}

impl From<VocabSpec> for VocabFile {
    fn from(v: VocabSpec) -> Self {
        VocabFile {
            words: v.words,
            bins: v.bins,
        }
    }
}

impl PartialEq for VocabSpec {
    fn eq(&self, other: &Self) -> bool {
        self.words == other.words && self.bins == other.bins
    }
}

fn is_reserved(word: &str) -> bool {
    Special::ALL.iter().any(|s| s.text() == word) || parse_action_word(word).is_some()
}

fn parse_action_word(word: &str) -> Option<usize> {
    word.strip_prefix("<a")?.strip_suffix('>')?.parse().ok()
}

impl VocabSpec {
    pub fn new(words: Vec<String>, bins: usize) -> Result<Self> {
        if bins < 2 {
            return Err(ModelError::Config(format!("need at least 2 action bins, got {bins}")));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if is_reserved(w) {
                return Err(ModelError::Config(format!("word {w:?} collides with a reserved token")));
            }
            if index.insert(w.clone(), Special::ALL.len() + i).is_some() {
                return Err(ModelError::Config(format!("duplicate word {w:?}")));
            }
        }
        Ok(Self { words, bins, index })
    }

    pub fn size(&self) -> usize {
        Special::ALL.len() + self.words.len() + self.bins
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Ids of text words (instruction, observation and reasoning vocabulary).
    pub fn text_range(&self) -> std::ops::Range<TokenId> {
        Special::ALL.len()..Special::ALL.len() + self.words.len()
    }

    pub fn action_range(&self) -> std::ops::Range<TokenId> {
        let start = Special::ALL.len() + self.words.len();
        start..start + self.bins
    }

    pub fn action_token(&self, bin: usize) -> TokenId {
        debug_assert!(bin < self.bins);
        self.action_range().start + bin
    }

    pub fn bin_of(&self, id: TokenId) -> Option<usize> {
        let r = self.action_range();
        r.contains(&id).then(|| id - r.start)
    }

    pub fn word(&self, w: &str) -> Option<TokenId> {
        self.index.get(w).copied()
    }

    /// Maps any surface form (special, word or `<aN>`) to its id.
    pub fn encode(&self, token: &str) -> Result<TokenId> {
        if let Some(s) = Special::ALL.iter().find(|s| s.text() == token) {
            return Ok(s.id());
        }
        if let Some(bin) = parse_action_word(token) {
            if bin < self.bins {
                return Ok(self.action_token(bin));
            }
        }
        self.word(token)
            .ok_or_else(|| ModelError::UnknownToken(token.to_string()))
    }

    pub fn encode_all<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<TokenId>> {
        tokens.iter().map(|t| self.encode(t.as_ref())).collect()
    }

    pub fn decode(&self, id: TokenId) -> String {
        if id < Special::ALL.len() {
            return Special::ALL[id].text().to_string();
        }
        if let Some(bin) = self.bin_of(id) {
            return format!("<a{bin}>");
        }
        self.words
            .get(id - Special::ALL.len())
            .cloned()
            .unwrap_or_else(|| format!("<unk{id}>"))
    }

    pub fn decode_all(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter().map(|&id| self.decode(id)).collect()
    }
}
