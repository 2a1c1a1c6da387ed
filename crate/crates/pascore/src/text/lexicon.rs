use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::text::{normalize_text, Level, TokenSequence, Vocabulary};

/// Word -> phoneme-sequence map. Keys are lower-cased; the first entry for a
/// word wins when a file lists multiple pronunciations.
#[derive(Debug, Clone, Default)]
pub struct Lexicon {
    entries: HashMap<String, Vec<String>>,
}

impl Lexicon {
    pub fn new() -> Self {
        Lexicon::default()
    }

    pub fn insert(&mut self, word: &str, phonemes: Vec<String>) {
        self.entries.entry(normalize_text(word)).or_insert(phonemes);
    }

    pub fn lookup(&self, word: &str) -> Option<&[String]> {
        self.entries.get(word).map(|v| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Parse `word<TAB>PH1 PH2 ...` lines. Blank lines and `#` comments are
    /// skipped.
    pub fn read_file(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path)?;
        let mut lex = Lexicon::new();
        for (ln, line) in body.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (word, rest) = line.split_once('\t').ok_or_else(|| {
                Error::Format(format!("{}:{}: expected word<TAB>phonemes", path.display(), ln + 1))
            })?;
            let phonemes: Vec<String> = rest.split_whitespace().map(|s| s.to_string()).collect();
            if phonemes.is_empty() {
                return Err(Error::Format(format!(
                    "{}:{}: no phonemes for '{word}'",
                    path.display(),
                    ln + 1
                )));
            }
            lex.insert(word, phonemes);
        }
        Ok(lex)
    }

    /// Every phoneme symbol used anywhere in the lexicon, sorted and deduped.
    pub fn phoneme_inventory(&self) -> Vec<String> {
        let mut symbols: Vec<String> = self
            .entries
            .values()
            .flat_map(|ph| ph.iter().cloned())
            .collect();
        symbols.sort();
        symbols.dedup();
        symbols
    }

    /// Check that every phoneme symbol resolves in the given vocabulary.
    pub fn validate(&self, phoneme_vocab: &Vocabulary) -> Result<()> {
        for sym in self.phoneme_inventory() {
            if phoneme_vocab.id(&normalize_text(&sym)).is_none() {
                return Err(Error::invalid_input(format!(
                    "lexicon phoneme '{sym}' missing from phoneme vocabulary"
                )));
            }
        }
        Ok(())
    }
}

/// Expand a word sequence into a phoneme sequence through the lexicon.
pub fn phonemize(
    words: &TokenSequence,
    word_vocab: &Vocabulary,
    lexicon: &Lexicon,
    phoneme_vocab: &Vocabulary,
) -> Result<TokenSequence> {
    if words.level != Level::Word {
        return Err(Error::invalid_input("phonemize expects a word-level sequence"));
    }
    let mut ids = Vec::new();
    for &wid in &words.ids {
        let word = word_vocab
            .token(wid)
            .ok_or_else(|| Error::invalid_input(format!("word id {wid} out of range")))?;
        let phonemes = lexicon
            .lookup(word)
            .ok_or_else(|| Error::MissingPronunciation(word.to_string()))?;
        for ph in phonemes {
            let pid = phoneme_vocab.id(&normalize_text(ph)).ok_or_else(|| {
                Error::invalid_input(format!("phoneme '{ph}' missing from phoneme vocabulary"))
            })?;
            ids.push(pid);
        }
    }
    Ok(TokenSequence { ids, level: Level::Phoneme })
}
