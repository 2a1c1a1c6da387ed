//! Vocabularies, token sequences and lexicon-based phonemization.

mod lexicon;
mod vocab;

pub use lexicon::{phonemize, Lexicon};
pub use vocab::{build_vocab, Vocabulary, MIN_VOCAB_SIZE};

use serde::{Deserialize, Serialize};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const BOS_ID: u32 = 2;
pub const EOS_ID: u32 = 3;
pub const MASK_ID: u32 = 4;

pub const RESERVED_TOKENS: [&str; 5] = ["<pad>", "<unk>", "<bos>", "<eos>", "<mask>"];

/// Granularity of the token stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Word,
    Phoneme,
}

impl Level {
    /// Upper end of the human rating range at this level.
    pub fn scale_max(self) -> f64 {
        match self {
            Level::Word => 10.0,
            Level::Phoneme => 2.0,
        }
    }

    pub fn label_max(self) -> i64 {
        self.scale_max() as i64
    }
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Level::Word => write!(f, "word"),
            Level::Phoneme => write!(f, "phoneme"),
        }
    }
}

/// Encoded reference text. Stored sequences never contain PAD or MASK;
/// those ids are injected only at train or score time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub level: Level,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Lower-case and strip punctuation (apostrophes survive), collapsing runs of
/// separators to single spaces.
pub fn normalize_text(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut last_space = true;
    for c in s.chars() {
        if c.is_alphanumeric() || c == '\'' {
            for lc in c.to_lowercase() {
                out.push(lc);
            }
            last_space = false;
        } else if !last_space {
            out.push(' ');
            last_space = true;
        }
    }
    if out.ends_with(' ') {
        out.pop();
    }
    out
}
