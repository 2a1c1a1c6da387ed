//! Binary checkpoint format.
//!
//! Layout (all little-endian):
//! ```text
//! magic   8 bytes  "PASCKPT1"
//! version u32      currently 1
//! meta    u32 length + JSON: model config, vocabulary tokens, level
//! tensors u32 count, then per tensor:
//!         name (u16 length + UTF-8), rank (u8), dims (u32 each), f32 data
//! head    u8       1 if the score head is present
//! seed    u64      training seed
//! step    u64      optimizer steps taken
//! ```
//! Save/load round-trips are bit-identical: tensor order is the parameter
//! set's insertion order and every f32 is stored via `to_le_bytes`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use pascore::model::{has_score_head, ModelConfig};
use pascore::nn::{ParamSet, Tensor};
use pascore::text::{Level, Vocabulary};
use pascore::{Error, Result};

use crate::util::write_atomic;

const MAGIC: &[u8; 8] = b"PASCKPT1";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    level: Level,
    vocab: Vec<String>,
}

pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamSet,
    pub seed: u64,
    pub step: u64,
}

impl Checkpoint {
    pub fn has_head(&self) -> bool {
        has_score_head(&self.params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = Meta {
            model: self.config.clone(),
            level: self.vocab.level(),
            vocab: self.vocab.tokens().to_vec(),
        };
        let meta_json = serde_json::to_vec(&meta)
            .map_err(|e| Error::Format(format!("checkpoint meta serialization: {e}")))?;

        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&meta_json);

        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, tensor) in self.params.iter() {
            let name_bytes = name.as_bytes();
            buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
            buf.extend_from_slice(name_bytes);
            buf.push(tensor.shape().len() as u8);
            for &d in tensor.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in tensor.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf.push(u8::from(self.has_head()));
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&self.step.to_le_bytes());
        write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)?;
        let mut r = Reader { bytes: &bytes, pos: 0, path };

        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(Error::Format(format!("{}: not a checkpoint file", path.display())));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "{}: unsupported checkpoint version {version} (supported: {VERSION})",
                path.display()
            )));
        }
        let meta_len = r.u32()? as usize;
        let meta_bytes = r.take(meta_len)?;
        let meta: Meta = serde_json::from_slice(meta_bytes)
            .map_err(|e| Error::Format(format!("{}: bad checkpoint meta: {e}", path.display())))?;
        meta.model.validate()?;
        let vocab = Vocabulary::from_tokens(meta.level, meta.vocab)?;
        if vocab.size() != meta.model.vocab_size {
            return Err(Error::Format(format!(
                "{}: vocabulary size {} does not match config vocab_size {}",
                path.display(),
                vocab.size(),
                meta.model.vocab_size
            )));
        }

        let n_tensors = r.u32()? as usize;
        let mut params = ParamSet::new();
        for _ in 0..n_tensors {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|e| Error::Format(format!("{}: bad tensor name: {e}", path.display())))?;
            let rank = r.u8()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            let count: usize = dims.iter().product();
            let raw = r.take(count * 4)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let tensor = Tensor::new(dims, data)
                .map_err(|e| Error::Format(format!("{}: tensor '{name}': {e}", path.display())))?;
            params.insert(name, tensor);
        }
        let head_flag = r.u8()? == 1;
        let seed = r.u64()?;
        let step = r.u64()?;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{}: trailing bytes after checkpoint", path.display())));
        }

        let ckpt = Checkpoint { config: meta.model, vocab, params, seed, step };
        if ckpt.has_head() != head_flag {
            return Err(Error::Format(format!(
                "{}: head flag disagrees with stored tensors",
                path.display()
            )));
        }
        Ok(ckpt)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!("{}: truncated checkpoint", self.path.display())));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use pascore::model::init_params;
    use pascore::text::build_vocab;

    fn sample_checkpoint() -> Checkpoint {
        let vocab = build_vocab(&["a b c d".to_string()], Level::Word, 9).unwrap();
        let config = ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_encoder_layers: 1,
            n_decoder_layers: 1,
            ffn_dim: 16,
            vocab_size: vocab.size(),
            ..ModelConfig::default()
        };
        let params = init_params(&config, 7).unwrap();
        Checkpoint { config, vocab, params, seed: 7, step: 123 }
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let ckpt = sample_checkpoint();
        ckpt.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(loaded.seed, 7);
        assert_eq!(loaded.step, 123);
        assert!(!loaded.has_head());
    }

    #[test]
    fn bad_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.ckpt");
        std::fs::write(&p, b"NOTACKPT0000").unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(Error::Format(_))));
    }

    #[test]
    fn unsupported_version_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v9.ckpt");
        let ckpt = sample_checkpoint();
        ckpt.save(&p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[8] = 9; // bump version field
        std::fs::write(&p, bytes).unwrap();
        match Checkpoint::load(&p) {
            Err(Error::Format(msg)) => assert!(msg.contains("version"), "{msg}"),
            Err(other) => panic!("expected format error, got {other:?}"),
            Ok(_) => panic!("expected format error, got a checkpoint"),
        }
    }

    #[test]
    fn truncated_file_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("short.ckpt");
        let ckpt = sample_checkpoint();
        ckpt.save(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(Error::Format(_))));
    }
}
