use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::AttentionHistory;
use crate::compress::{max_pool, num_blocks};
use crate::error::{Error, Result};
use crate::trace::AttentionTrace;

/// One input/target pair: `H` compressed rows ending at step `t`, and the
/// compressed step `t + 1` row restricted to its first `t` positions.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub input: AttentionHistory,
    pub target: Vec<f64>,
}

/// Candidate samples per `(layer, head)`: decode steps `t` with a successor row.
pub fn candidate_count(trace: &AttentionTrace) -> usize {
    let h = trace.header();
    h.num_heads_total() * (h.num_decode_steps as usize).saturating_sub(1)
}

/// Packages training samples from a trace and keeps a seeded uniform fraction.
///
/// Both history end and target come from decode rows; stored prefill rows only
/// fill the older history slots. History slots before the first stored row
/// are zero.
pub fn build_dataset(
    trace: &AttentionTrace,
    history: usize,
    block_size: usize,
    sample_ratio: f64,
    seed: u64,
) -> Result<Vec<TrainSample>> {
    if history < 1 {
        return Err(Error::Parameter("history length must be at least 1".into()));
    }
    if block_size < 1 {
        return Err(Error::Parameter("block size must be at least 1".into()));
    }
    if !(sample_ratio > 0.0 && sample_ratio <= 1.0) {
        return Err(Error::Parameter(format!(
            "sample ratio must lie in (0, 1], got {sample_ratio}"
        )));
    }
    let h = *trace.header();
    if h.num_decode_steps < 1 {
        return Err(Error::Parameter("trace has no decode steps".into()));
    }
    let per_head = (h.num_decode_steps as usize).saturating_sub(1);
    let total = candidate_count(trace);
    if total == 0 {
        return Ok(Vec::new());
    }
    let keep = ((sample_ratio * total as f64).round() as usize).clamp(1, total);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = index::sample(&mut rng, total, keep).into_vec();
    chosen.sort_unstable();

    let first = h.first_step_offset as i64;
    chosen
        .into_iter()
        .map(|idx| {
            let head_idx = idx / per_head;
            let layer = (head_idx / h.num_heads as usize) as u32;
            let head = (head_idx % h.num_heads as usize) as u32;
            let t = (idx % per_head) as i64 + 1;
            let len = h.row_len(t);
            let width = num_blocks(len, block_size);
            let oldest = (t - history as i64 + 1).max(first);
            let rows = (oldest..=t)
                .map(|s| max_pool(trace.row(layer, head, s), block_size).map(|c| c.values))
                .collect::<Result<Vec<_>>>()?;
            let input = AttentionHistory::from_rows(&rows, history, width)?;
            let next = trace.row(layer, head, t + 1);
            let target = max_pool(&next[..len], block_size)?
                .values
                .into_iter()
                .map(|v| v as f64)
                .collect();
            Ok(TrainSample { input, target })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::TraceHeader;

    fn uniform_trace(prefill: u32, decode: u32, first: i32) -> AttentionTrace {
        let header = TraceHeader {
            num_layers: 1,
            num_heads: 2,
            prefill_len: prefill,
            num_decode_steps: decode,
            has_qk: false,
            head_dim: 0,
            first_step_offset: first,
        };
        let mut rows = Vec::new();
        for _ in 0..2 {
            for s in header.steps() {
                let n = header.row_len(s);
                rows.push(vec![1.0 / n as f32; n]);
            }
        }
        AttentionTrace::new(header, rows, None).unwrap()
    }

    #[test]
    fn counts_candidates_needing_successor() {
        let t = uniform_trace(8, 10, 0);
        assert_eq!(candidate_count(&t), 2 * 9);
        assert_eq!(build_dataset(&t, 4, 2, 1.0, 0).unwrap().len(), 18);
    }

    #[test]
    fn shapes_and_padding() {
        let t = uniform_trace(8, 3, -2);
        let samples = build_dataset(&t, 6, 4, 1.0, 0).unwrap();
        // first sample: head 0, t = 1, history rows from steps -2..=1
        let s = &samples[0];
        assert_eq!(s.input.steps(), 6);
        assert_eq!(s.input.width(), 3); // len 9 -> 3 blocks of 4
        assert_eq!(s.input.row(0), &[0.0; 3]);
        assert_eq!(s.input.row(1), &[0.0; 3]);
        assert!(s.input.row(2)[0] > 0.0);
        assert_eq!(s.target.len(), 3);
        // step 2 row has 10 entries; only the first 9 enter the target
        let expected = (1.0f32 / 10.0) as f64;
        assert_eq!(s.target, vec![expected; 3]);
    }

    #[test]
    fn sampling_is_seeded_fraction() {
        let t = uniform_trace(4, 201, 0);
        let total = candidate_count(&t);
        let a = build_dataset(&t, 2, 2, 0.03, 7).unwrap();
        assert_eq!(a.len(), (0.03 * total as f64).round() as usize);
        assert_eq!(a, build_dataset(&t, 2, 2, 0.03, 7).unwrap());
    }

    #[test]
    fn rejects_bad_parameters() {
        let t = uniform_trace(4, 3, 0);
        assert!(build_dataset(&t, 0, 2, 1.0, 0).is_err());
        assert!(build_dataset(&t, 2, 2, 0.0, 0).is_err());
    }
}
