//! Reference selection methods compared against the predictor.
//!
//! Every function returns an ascending token index set of at most `B`
//! tokens, except SnapKV whose frozen set is joined by every decoded token.
//! Ties always resolve toward the lower index.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::compress::expand_indices;
use crate::error::{Error, Result};
use crate::selector::{bottomk, topk};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BaselineKind {
    StreamingLlm,
    H2oPlus,
    SnapKv,
    Quest,
    PrevToken,
    PrevLayer,
    Oracle,
    /// Bottom-`B` of the true next row; the floor of every method.
    Worst,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 8] = [
        BaselineKind::StreamingLlm,
        BaselineKind::H2oPlus,
        BaselineKind::SnapKv,
        BaselineKind::Quest,
        BaselineKind::PrevToken,
        BaselineKind::PrevLayer,
        BaselineKind::Oracle,
        BaselineKind::Worst,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::StreamingLlm => "streaming_llm",
            BaselineKind::H2oPlus => "h2o_plus",
            BaselineKind::SnapKv => "snap_kv",
            BaselineKind::Quest => "quest",
            BaselineKind::PrevToken => "prev_token",
            BaselineKind::PrevLayer => "prev_layer",
            BaselineKind::Oracle => "oracle",
            BaselineKind::Worst => "worst",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BaselineKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown baseline {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BaselineConfig {
    pub kind: BaselineKind,
    pub budget: usize,
    /// Rows accumulated by H2O+ and SnapKV.
    pub window: usize,
    /// Page size for Quest.
    pub block_size: usize,
}

impl BaselineConfig {
    pub fn new(kind: BaselineKind, budget: usize) -> Self {
        Self {
            kind,
            budget,
            window: 64,
            block_size: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 1 || self.block_size < 1 {
            return Err(Error::Config("window and block_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// First `floor(B/2)` and last `ceil(B/2)` of `t` tokens; everything when `B >= t`.
pub fn select_streaming(t: usize, budget: usize) -> BTreeSet<usize> {
    if budget >= t {
        return (0..t).collect();
    }
    let sink = budget / 2;
    let recent = budget - sink;
    (0..sink).chain(t - recent..t).collect()
}

/// Column sums of rows over `len` positions; rows shorter than `len` count as zero-padded.
fn column_sums<R: AsRef<[f32]>>(rows: &[R], len: usize) -> Vec<f64> {
    let mut sums = vec![0.0f64; len];
    for row in rows {
        for (s, &v) in sums.iter_mut().zip(row.as_ref()) {
            *s += v as f64;
        }
    }
    sums
}

/// Heavy hitters over the accumulated window plus the most recent tokens.
///
/// The `ceil(B/2)` newest of `len` positions are kept; the other `floor(B/2)`
/// go to the highest column sums among the remaining positions.
pub fn select_h2o<R: AsRef<[f32]>>(history: &[R], budget: usize, len: usize) -> Result<BTreeSet<usize>> {
    if history.is_empty() {
        return Err(Error::Parameter("h2o needs at least one history row".into()));
    }
    if budget >= len {
        return Ok((0..len).collect());
    }
    let recent = budget.div_ceil(2);
    let heavy = budget - recent;
    let pool = len - recent;
    let sums = column_sums(history, pool);
    let mut s: BTreeSet<usize> = topk(&sums, heavy.min(pool))?.into_iter().collect();
    s.extend(pool..len);
    Ok(s)
}

/// One-time prefill filter: top-`(B - ceil(B/2))` positions by window sums
/// outside the prompt's trailing `ceil(B/2)` tokens, plus those tokens.
///
/// The frozen set covers prompt positions only; callers add every decoded token.
pub fn snapkv_frozen<R: AsRef<[f32]>>(prefill_window: &[R], budget: usize, prefill_len: usize) -> Result<BTreeSet<usize>> {
    if prefill_window.is_empty() {
        return Err(Error::Parameter("snapkv needs at least one prefill row".into()));
    }
    if budget >= prefill_len {
        return Ok((0..prefill_len).collect());
    }
    let recent = budget.div_ceil(2);
    let pool = prefill_len - recent;
    let sums = column_sums(prefill_window, pool);
    let mut s: BTreeSet<usize> = topk(&sums, (budget - recent).min(pool))?.into_iter().collect();
    s.extend(pool..prefill_len);
    Ok(s)
}

/// The frozen prompt set joined with every token produced after the prompt.
pub fn select_snapkv(frozen: &BTreeSet<usize>, prefill_len: usize, t: usize) -> BTreeSet<usize> {
    let mut s = frozen.clone();
    s.extend(prefill_len..t);
    s
}

/// Quest upper bound of `q . k` for one page given its elementwise key min and max.
pub fn quest_bound(query: &[f32], key_min: &[f32], key_max: &[f32]) -> f64 {
    query
        .iter()
        .zip(key_min.iter().zip(key_max))
        .map(|(&q, (&lo, &hi))| (q as f64 * lo as f64).max(q as f64 * hi as f64))
        .sum()
}

/// Elementwise min and max of each `block_size` page of `n` keys stored row-major.
pub fn key_pages(keys: &[f32], head_dim: usize, n: usize, block_size: usize) -> Vec<(Vec<f32>, Vec<f32>)> {
    (0..n.div_ceil(block_size))
        .map(|p| {
            let mut lo = vec![f32::INFINITY; head_dim];
            let mut hi = vec![f32::NEG_INFINITY; head_dim];
            for j in p * block_size..((p + 1) * block_size).min(n) {
                for c in 0..head_dim {
                    let v = keys[j * head_dim + c];
                    lo[c] = lo[c].min(v);
                    hi[c] = hi[c].max(v);
                }
            }
            (lo, hi)
        })
        .collect()
}

/// Top-`floor(B/b)` pages by upper bound, expanded to token indices.
pub fn select_quest(
    query: &[f32],
    pages: &[(Vec<f32>, Vec<f32>)],
    budget: usize,
    block_size: usize,
    n: usize,
) -> Result<BTreeSet<usize>> {
    if block_size < 1 {
        return Err(Error::Parameter("block size must be at least 1".into()));
    }
    if pages.len() != n.div_ceil(block_size) {
        return Err(Error::Dimension(format!(
            "{} pages for {n} tokens at page size {block_size}",
            pages.len()
        )));
    }
    if budget >= n {
        return Ok((0..n).collect());
    }
    let bounds: Vec<f64> = pages.iter().map(|(lo, hi)| quest_bound(query, lo, hi)).collect();
    let k = (budget / block_size).min(pages.len());
    expand_indices(topk(&bounds, k)?, block_size, n)
}

/// Top-`B` of a reference row (previous step or previous layer), restricted to `len` positions.
///
/// Without a reference row this falls back to the streaming selection.
pub fn select_prev(reference: Option<&[f32]>, budget: usize, len: usize) -> Result<BTreeSet<usize>> {
    let Some(r) = reference else {
        return Ok(select_streaming(len, budget));
    };
    if budget >= len {
        return Ok((0..len).collect());
    }
    let mut padded = vec![0.0f32; len];
    let m = r.len().min(len);
    padded[..m].copy_from_slice(&r[..m]);
    Ok(topk(&padded, budget)?.into_iter().collect())
}

/// Top-`B` of the true row.
pub fn select_oracle(row: &[f32], budget: usize) -> BTreeSet<usize> {
    topk(row, budget.min(row.len())).expect("k clamped").into_iter().collect()
}

/// Bottom-`B` of the true row.
pub fn select_worst(row: &[f32], budget: usize) -> BTreeSet<usize> {
    bottomk(row, budget.min(row.len())).expect("k clamped").into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(v: &[usize]) -> BTreeSet<usize> {
        v.iter().copied().collect()
    }

    #[test]
    fn streaming_examples() {
        assert_eq!(select_streaming(10, 4), set(&[0, 1, 8, 9]));
        assert_eq!(select_streaming(3, 8), set(&[0, 1, 2]));
        assert!(select_streaming(10, 0).is_empty());
        assert_eq!(select_streaming(10, 3), set(&[0, 8, 9]));
    }

    #[test]
    fn h2o_examples() {
        let rows = [vec![0.7f32, 0.1, 0.1, 0.1]];
        assert_eq!(select_h2o(&rows, 2, 4).unwrap(), set(&[0, 3]));
        let uniform = [vec![0.25f32; 4], vec![0.25f32; 4]];
        assert_eq!(select_h2o(&uniform, 2, 4).unwrap(), set(&[0, 3]));
        // the newest position has no history yet
        assert_eq!(select_h2o(&rows, 4, 5).unwrap(), set(&[0, 1, 3, 4]));
        assert_eq!(select_h2o(&rows, 2, 5).unwrap(), set(&[0, 4]));
    }

    #[test]
    fn snapkv_examples() {
        let mut row = vec![0.01f32; 20];
        row[5] = 0.8;
        let frozen = snapkv_frozen(&[row.clone()], 4, 20).unwrap();
        assert!(frozen.contains(&5));
        assert_eq!(frozen.len(), 4);
        let later = select_snapkv(&frozen, 20, 120);
        assert!(frozen.is_subset(&later));
        assert_eq!(later.len(), 104);
        assert_eq!(snapkv_frozen(&[row], 30, 20).unwrap().len(), 20);
    }

    #[test]
    fn quest_single_page_selects_everything() {
        let keys = vec![1.0f32, 0.0, 0.0, 1.0, -1.0, 0.5];
        let pages = key_pages(&keys, 2, 3, 3);
        let s = select_quest(&[1.0, 1.0], &pages, 3, 3, 3).unwrap();
        assert_eq!(s, set(&[0, 1, 2]));
    }

    #[test]
    fn quest_bound_dominates_member_scores() {
        let keys = vec![0.3f32, -0.2, 0.9, 0.4, -0.5, 0.1];
        let q = [0.7f32, -1.1];
        let pages = key_pages(&keys, 2, 3, 3);
        let bound = quest_bound(&q, &pages[0].0, &pages[0].1);
        for j in 0..3 {
            let s = q[0] as f64 * keys[2 * j] as f64 + q[1] as f64 * keys[2 * j + 1] as f64;
            assert!(bound >= s);
        }
    }

    #[test]
    fn prev_falls_back_to_streaming() {
        assert_eq!(select_prev(None, 4, 10).unwrap(), select_streaming(10, 4));
        let r = [0.1f32, 0.6, 0.3];
        assert_eq!(select_prev(Some(&r), 2, 4).unwrap(), set(&[1, 2]));
    }

    #[test]
    fn oracle_and_worst() {
        let row = [0.1f32, 0.5, 0.1, 0.3];
        assert_eq!(select_oracle(&row, 2), set(&[1, 3]));
        assert_eq!(select_worst(&row, 2), set(&[0, 2]));
        assert_eq!(select_oracle(&row, 9).len(), 4);
    }

    #[test]
    fn kind_names_round_trip() {
        for k in BaselineKind::ALL {
            assert_eq!(k.name().parse::<BaselineKind>().unwrap(), k);
        }
        assert!("nope".parse::<BaselineKind>().is_err());
    }
}
