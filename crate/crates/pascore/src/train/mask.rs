use crate::error::{Error, Result};
use crate::rng::Rng;

/// Set of masked positions within the maskable span of a token sequence
/// (payload positions only; BOS/EOS are never maskable). Positions are
/// stored sorted and unique.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPattern {
    positions: Vec<usize>,
}

impl MaskPattern {
    pub fn new(mut positions: Vec<usize>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::invalid_input("mask pattern must select at least one position"));
        }
        positions.sort_unstable();
        positions.dedup();
        Ok(MaskPattern { positions })
    }

    pub fn single(position: usize) -> Self {
        MaskPattern { positions: vec![position] }
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn check_against(&self, maskable_len: usize) -> Result<()> {
        if let Some(&p) = self.positions.iter().find(|&&p| p >= maskable_len) {
            return Err(Error::invalid_input(format!(
                "mask position {p} out of range for length {maskable_len}"
            )));
        }
        Ok(())
    }
}

/// Draw a mask: the count k is uniform on {1..maskable_len}, then k distinct
/// positions are drawn uniformly without replacement.
pub fn sample_mask(maskable_len: usize, rng: &mut Rng) -> Result<MaskPattern> {
    if maskable_len == 0 {
        return Err(Error::invalid_input("sample_mask: nothing to mask"));
    }
    let k = rng.range_inclusive(1, maskable_len);
    let mut indices: Vec<usize> = (0..maskable_len).collect();
    rng.shuffle(&mut indices);
    indices.truncate(k);
    MaskPattern::new(indices)
}
