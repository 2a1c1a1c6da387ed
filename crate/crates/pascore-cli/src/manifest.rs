//! JSONL dataset manifests: one entry per line with id, audio path,
//! transcript, optional per-token labels and the token level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use pascore::text::{normalize_text, Level};
use pascore::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// WAV path, absolute or relative to the manifest's directory.
    pub audio: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<i64>>,
    pub level: Level,
}

impl ManifestEntry {
    pub fn audio_path(&self, manifest_dir: &Path) -> PathBuf {
        let p = Path::new(&self.audio);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            manifest_dir.join(p)
        }
    }

    /// Whitespace token count of the normalized transcript.
    pub fn token_count(&self) -> usize {
        normalize_text(&self.text).split_whitespace().count()
    }
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub dir: PathBuf,
}

impl Manifest {
    /// Parse and validate a manifest. `check_label_lengths` should be false
    /// when a lexicon will expand transcripts later (labels then align with
    /// the phonemized sequence and are re-checked after expansion).
    pub fn load(path: &Path, check_label_lengths: bool) -> Result<Manifest> {
        let body = std::fs::read_to_string(path)?;
        let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut entries = Vec::new();
        for (ln, line) in body.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| {
                Error::Format(format!("{}:{}: {e}", path.display(), ln + 1))
            })?;
            validate_entry(&entry, check_label_lengths)?;
            entries.push(entry);
        }
        if entries.is_empty() {
            return Err(Error::invalid_input(format!("{}: empty manifest", path.display())));
        }
        Ok(Manifest { entries, dir })
    }

    /// The single level shared by all entries.
    pub fn level(&self) -> Result<Level> {
        let level = self.entries[0].level;
        for e in &self.entries {
            if e.level != level {
                return Err(Error::invalid_input(format!(
                    "manifest mixes levels: entry '{}' is {} but '{}' is {level}",
                    e.id, e.level, self.entries[0].id
                )));
            }
        }
        Ok(level)
    }

    pub fn find(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }
}

fn validate_entry(entry: &ManifestEntry, check_label_lengths: bool) -> Result<()> {
    if entry.id.is_empty() {
        return Err(Error::invalid_input("manifest entry with empty id"));
    }
    if let Some(labels) = &entry.labels {
        let max = entry.level.label_max();
        if let Some(&bad) = labels.iter().find(|&&l| l < 0 || l > max) {
            return Err(Error::invalid_input(format!(
                "entry '{}': label {bad} outside 0..={max} for {} level",
                entry.id, entry.level
            )));
        }
        if check_label_lengths {
            let tokens = entry.token_count();
            if labels.len() != tokens {
                return Err(Error::invalid_input(format!(
                    "entry '{}': {} labels for {} tokens",
                    entry.id,
                    labels.len(),
                    tokens
                )));
            }
        }
    }
    Ok(())
}

pub fn to_jsonl(entries: &[ManifestEntry]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for e in entries {
        let line = serde_json::to_string(e)
            .map_err(|err| Error::Format(format!("manifest serialization: {err}")))?;
        out.extend_from_slice(line.as_bytes());
        out.push(b'\n');
    }
    Ok(out)
}
