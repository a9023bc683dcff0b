//! Block-wise max pooling of attention rows and block-to-token expansion.

use std::collections::BTreeSet;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedRow {
    pub values: Vec<f32>,
    pub block_size: usize,
    pub original_len: usize,
}

impl CompressedRow {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub fn num_blocks(len: usize, block_size: usize) -> usize {
    len.div_ceil(block_size)
}

/// Pads `row` with zeros to a multiple of `block_size` and keeps each block's maximum.
pub fn max_pool(row: &[f32], block_size: usize) -> Result<CompressedRow> {
    if block_size == 0 {
        return Err(Error::Parameter("block size must be at least 1".into()));
    }
    if row.is_empty() {
        return Err(Error::Parameter("cannot pool an empty row".into()));
    }
    let values = row
        .chunks(block_size)
        .map(|chunk| {
            let m = chunk.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            // a short trailing chunk is padded with zeros
            if chunk.len() < block_size {
                m.max(0.0)
            } else {
                m
            }
        })
        .collect();
    Ok(CompressedRow {
        values,
        block_size,
        original_len: row.len(),
    })
}

/// Expands block indices into token indices, dropping tokens at or beyond `len`.
pub fn expand_indices(
    blocks: impl IntoIterator<Item = usize>,
    block_size: usize,
    len: usize,
) -> Result<BTreeSet<usize>> {
    if block_size == 0 {
        return Err(Error::Parameter("block size must be at least 1".into()));
    }
    let n_blocks = num_blocks(len, block_size);
    let mut out = BTreeSet::new();
    for i in blocks {
        if i >= n_blocks {
            return Err(Error::Parameter(format!(
                "block index {i} out of range for {n_blocks} blocks"
            )));
        }
        let start = i * block_size;
        out.extend(start..(start + block_size).min(len));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pools_full_blocks() {
        let c = max_pool(&[0.1, 0.3, 0.2, 0.05], 2).unwrap();
        assert_eq!(c.values, vec![0.3, 0.2]);
        assert_eq!(c.original_len, 4);
    }

    #[test]
    fn pads_partial_block() {
        let c = max_pool(&[0.5, 0.1, 0.2, 0.4], 3).unwrap();
        assert_eq!(c.values, vec![0.5, 0.4]);
    }

    #[test]
    fn unit_block_is_identity() {
        let row = [0.3, 0.0, 0.7];
        assert_eq!(max_pool(&row, 1).unwrap().values, row.to_vec());
    }

    #[test]
    fn zero_block_rejected() {
        assert!(max_pool(&[1.0], 0).is_err());
        assert!(expand_indices([0], 0, 4).is_err());
    }

    #[test]
    fn expands_blocks() {
        let s = expand_indices([2], 16, 64).unwrap();
        assert_eq!(s, (32..48).collect());
        assert_eq!(expand_indices([0], 4, 10).unwrap(), (0..4).collect());
    }

    #[test]
    fn expansion_clips_padding() {
        assert_eq!(expand_indices([2], 4, 10).unwrap(), [8, 9].into_iter().collect());
    }

    #[test]
    fn out_of_range_block_rejected() {
        assert!(expand_indices([3], 4, 10).is_err());
    }
}
