use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::text::{normalize_text, Level, TokenSequence, RESERVED_TOKENS, UNK_ID};

pub const MIN_VOCAB_SIZE: usize = RESERVED_TOKENS.len() + 1;

/// Bijective token <-> id map with five fixed reserved ids at the front.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    level: Level,
    tokens: Vec<String>,
    index: HashMap<String, u32>, // non-reserved tokens only
}

impl Vocabulary {
    /// Build directly from an ordered token list that already starts with the
    /// reserved tokens (checkpoint loading, vocabulary files).
    pub fn from_tokens(level: Level, tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < MIN_VOCAB_SIZE {
            return Err(Error::invalid_input(format!(
                "vocabulary needs at least {MIN_VOCAB_SIZE} entries, got {}",
                tokens.len()
            )));
        }
        for (i, want) in RESERVED_TOKENS.iter().enumerate() {
            if tokens[i] != *want {
                return Err(Error::Format(format!(
                    "vocabulary id {i} must be '{want}', found '{}'",
                    tokens[i]
                )));
            }
        }
        let mut index = HashMap::new();
        for (i, tok) in tokens.iter().enumerate().skip(RESERVED_TOKENS.len()) {
            if index.insert(tok.clone(), i as u32).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary token '{tok}'")));
            }
        }
        Ok(Vocabulary { level, tokens, index })
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Id for a token. Reserved token strings deliberately do not resolve, so
    /// encoded reference text can never contain MASK or PAD.
    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    /// Whitespace-split encode; unknown tokens map to UNK.
    pub fn encode(&self, text: &str) -> TokenSequence {
        let normalized = normalize_text(text);
        let ids = normalized
            .split_whitespace()
            .map(|tok| self.id(tok).unwrap_or(UNK_ID))
            .collect();
        TokenSequence { ids, level: self.level }
    }

    /// Inverse of [`Vocabulary::encode`] for in-vocabulary sequences.
    pub fn decode(&self, seq: &TokenSequence) -> String {
        seq.ids
            .iter()
            .map(|&id| self.token(id).unwrap_or(RESERVED_TOKENS[UNK_ID as usize]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line; line number minus one is the id.
    pub fn write_file(&self, path: &Path) -> Result<()> {
        let mut body = String::new();
        for tok in &self.tokens {
            body.push_str(tok);
            body.push('\n');
        }
        std::fs::write(path, body)?;
        Ok(())
    }

    pub fn read_file(path: &Path, level: Level) -> Result<Self> {
        let body = std::fs::read_to_string(path)?;
        let tokens: Vec<String> = body.lines().map(|l| l.to_string()).collect();
        Vocabulary::from_tokens(level, tokens)
    }
}

/// Build a vocabulary from raw transcripts: the five reserved tokens plus the
/// `max_size - 5` most frequent tokens, ties broken lexicographically.
pub fn build_vocab(corpus: &[String], level: Level, max_size: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::invalid_input("build_vocab: empty corpus"));
    }
    if max_size < MIN_VOCAB_SIZE {
        return Err(Error::invalid_input(format!(
            "build_vocab: max_size must be at least {MIN_VOCAB_SIZE}"
        )));
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    for line in corpus {
        for tok in normalize_text(line).split_whitespace() {
            *counts.entry(tok.to_string()).or_insert(0) += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::invalid_input("build_vocab: corpus has no tokens"));
    }
    let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size - RESERVED_TOKENS.len());

    let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(ranked.into_iter().map(|(t, _)| t));
    Vocabulary::from_tokens(level, tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{BOS_ID, EOS_ID, MASK_ID, PAD_ID};

    #[test]
    fn frequency_then_lexicographic_order() {
        let v = build_vocab(&["a b a".to_string()], Level::Word, 10).unwrap();
        assert_eq!(v.id("a"), Some(5));
        assert_eq!(v.id("b"), Some(6));
        assert_eq!(v.size(), 7);
    }

    #[test]
    fn single_token_corpus() {
        let v = build_vocab(&["x".to_string()], Level::Word, 6).unwrap();
        assert_eq!(v.size(), 6);
        assert_eq!(v.id("x"), Some(5));
    }

    #[test]
    fn empty_corpus_is_invalid() {
        assert!(matches!(
            build_vocab(&[], Level::Word, 10),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn reserved_ids_are_fixed() {
        let v = build_vocab(&["z".to_string()], Level::Word, 8).unwrap();
        assert_eq!(v.token(PAD_ID), Some("<pad>"));
        assert_eq!(v.token(UNK_ID), Some("<unk>"));
        assert_eq!(v.token(BOS_ID), Some("<bos>"));
        assert_eq!(v.token(EOS_ID), Some("<eos>"));
        assert_eq!(v.token(MASK_ID), Some("<mask>"));
    }

    #[test]
    fn encode_maps_oov_to_unk() {
        let v = build_vocab(&["a b a".to_string()], Level::Word, 10).unwrap();
        assert_eq!(v.encode("a b").ids, vec![5, 6]);
        assert_eq!(v.encode("a z").ids, vec![5, UNK_ID]);
    }

    #[test]
    fn reserved_strings_never_encode_to_control_ids() {
        let v = build_vocab(&["a".to_string()], Level::Word, 10).unwrap();
        // Normalization strips the angle brackets; the leftover word is OOV.
        let ids = v.encode("<mask> a <pad>").ids;
        assert_eq!(ids, vec![UNK_ID, 5, UNK_ID]);
    }

    #[test]
    fn vocabulary_file_roundtrip() {
        let v = build_vocab(&["c a b a c c".to_string()], Level::Word, 8).unwrap();
        let dir = std::env::temp_dir().join("pascore_vocab_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("vocab.txt");
        v.write_file(&path).unwrap();
        let back = Vocabulary::read_file(&path, Level::Word).unwrap();
        assert_eq!(v, back);
    }

    #[test]
    fn deterministic_construction() {
        let corpus: Vec<String> = vec!["d c b a".into(), "c b a".into(), "b a".into(), "a".into()];
        let v1 = build_vocab(&corpus, Level::Word, 9).unwrap();
        let v2 = build_vocab(&corpus, Level::Word, 9).unwrap();
        assert_eq!(v1.tokens(), v2.tokens());
        // a(4) > b(3) > c(2) > d(1)
        assert_eq!(v1.id("a"), Some(5));
        assert_eq!(v1.id("d"), Some(8));
    }
}
