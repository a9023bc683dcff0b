//! Budgeted critical-token selection driven by the predictor.
//!
//! Each `(layer, head)` owns a [`SelectorState`]. Per decode step the state
//! compresses the attention row it observed, appends it to its history,
//! predicts the next row and keeps sink tokens, local tokens and the
//! highest-scoring middle blocks within the token budget.

use std::cmp::Ordering;
use std::collections::{BTreeSet, VecDeque};

use crate::compress::{expand_indices, max_pool, num_blocks};
use crate::error::{Error, Result};
use crate::predictor::{forward, AttentionHistory, PredictorWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelectorConfig {
    /// Token budget `B`.
    pub budget: usize,
    pub block_size: usize,
    /// History length `H` in steps.
    pub history: usize,
    /// A dense row replaces the sparse observation every `M` steps.
    pub calibration_period: usize,
    pub sink_tokens: usize,
    pub local_tokens: usize,
    /// Middle blocks are re-predicted every this many steps.
    pub update_interval: usize,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self {
            budget: 1024,
            block_size: 16,
            history: 64,
            calibration_period: 5,
            sink_tokens: 64,
            local_tokens: 64,
            update_interval: 1,
        }
    }
}

impl SelectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_size < 1 || self.history < 1 || self.calibration_period < 1 || self.update_interval < 1 {
            return Err(Error::Config(
                "block_size, history, calibration_period and update_interval must be at least 1".into(),
            ));
        }
        self.check_budget(self.budget)
    }

    fn check_budget(&self, budget: usize) -> Result<()> {
        if budget < self.sink_tokens + self.local_tokens {
            return Err(Error::Config(format!(
                "budget {budget} is smaller than sink_tokens + local_tokens = {}",
                self.sink_tokens + self.local_tokens
            )));
        }
        Ok(())
    }

    /// Number of middle blocks the budget pays for.
    pub fn middle_blocks(&self) -> usize {
        (self.budget - self.sink_tokens - self.local_tokens) / self.block_size
    }
}

fn desc_then_index<T: PartialOrd>(values: &[T], a: usize, b: usize) -> Ordering {
    // NaN sorts below every number
    match values[b].partial_cmp(&values[a]) {
        Some(Ordering::Equal) => a.cmp(&b),
        Some(o) => o,
        None => match (values[a].partial_cmp(&values[a]), values[b].partial_cmp(&values[b])) {
            (None, Some(_)) => Ordering::Greater,
            (Some(_), None) => Ordering::Less,
            _ => a.cmp(&b),
        },
    }
}

/// Indices of the `k` largest values, ascending. Ties go to the lower index.
pub fn topk<T: PartialOrd>(values: &[T], k: usize) -> Result<Vec<usize>> {
    if k > values.len() {
        return Err(Error::Parameter(format!(
            "cannot take top {k} of {} values",
            values.len()
        )));
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    if k < idx.len() && k > 0 {
        idx.select_nth_unstable_by(k - 1, |&a, &b| desc_then_index(values, a, b));
    }
    idx.truncate(k);
    idx.sort_unstable();
    Ok(idx)
}

/// Indices of the `k` smallest values, ascending. Ties go to the lower index.
pub fn bottomk<T: PartialOrd>(values: &[T], k: usize) -> Result<Vec<usize>> {
    if k > values.len() {
        return Err(Error::Parameter(format!(
            "cannot take bottom {k} of {} values",
            values.len()
        )));
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| match values[a].partial_cmp(&values[b]) {
        Some(Ordering::Equal) | None => a.cmp(&b),
        Some(o) => o,
    });
    idx.truncate(k);
    idx.sort_unstable();
    Ok(idx)
}

/// The attention row a model computes when only `selection` is resident:
/// unselected scores are zero and the rest are renormalized to sum to 1.
pub fn sparse_row(row: &[f32], selection: &BTreeSet<usize>) -> Vec<f32> {
    let kept: f64 = selection
        .iter()
        .filter(|&&j| j < row.len())
        .map(|&j| row[j] as f64)
        .sum();
    let mut out = vec![0.0f32; row.len()];
    if kept > 0.0 {
        for &j in selection.range(..row.len()) {
            out[j] = (row[j] as f64 / kept) as f32;
        }
    }
    out
}

/// Sink and local token ranges for a row of `next_len` tokens.
pub fn fixed_tokens(sink: usize, local: usize, next_len: usize) -> BTreeSet<usize> {
    let mut s: BTreeSet<usize> = (0..sink.min(next_len)).collect();
    s.extend(next_len.saturating_sub(local)..next_len);
    s
}

/// Picks the middle blocks from a score vector over the first `scored_len`
/// tokens of a `next_len`-token row.
///
/// Blocks lying entirely inside the sink or local range are excluded, so the
/// middle budget is never spent on tokens that are kept anyway.
pub fn middle_selection(
    scores: &[f64],
    config: &SelectorConfig,
    scored_len: usize,
    next_len: usize,
) -> Result<BTreeSet<usize>> {
    let b = config.block_size;
    if scores.len() != num_blocks(scored_len, b) {
        return Err(Error::Dimension(format!(
            "{} block scores for a row of {scored_len} tokens at block size {b}",
            scores.len()
        )));
    }
    let local_start = next_len.saturating_sub(config.local_tokens);
    let candidates: Vec<usize> = (0..scores.len())
        .filter(|&j| {
            let start = j * b;
            let end = ((j + 1) * b).min(scored_len);
            let in_sink = end <= config.sink_tokens;
            let in_local = start >= local_start;
            !(in_sink || in_local)
        })
        .collect();
    let k = config.middle_blocks().min(candidates.len());
    let values: Vec<f64> = candidates.iter().map(|&j| scores[j]).collect();
    let chosen = topk(&values, k)?.into_iter().map(|i| candidates[i]);
    expand_indices(chosen, b, scored_len)
}

#[derive(Debug, Clone)]
pub struct SelectorState {
    config: SelectorConfig,
    history: VecDeque<Vec<f32>>,
    step_counter: usize,
    selection: BTreeSet<usize>,
    middle: BTreeSet<usize>,
}

impl SelectorState {
    pub fn new(config: SelectorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            history: VecDeque::with_capacity(config.history),
            step_counter: 0,
            selection: BTreeSet::new(),
            middle: BTreeSet::new(),
        })
    }

    pub fn config(&self) -> &SelectorConfig {
        &self.config
    }

    pub fn step_counter(&self) -> usize {
        self.step_counter
    }

    /// Selection for the step after the last observed one.
    pub fn selection(&self) -> &BTreeSet<usize> {
        &self.selection
    }

    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    /// Changes the token budget, e.g. when it is a fraction of a growing context.
    pub fn set_budget(&mut self, budget: usize) -> Result<()> {
        self.config.check_budget(budget)?;
        self.config.budget = budget;
        Ok(())
    }

    fn push(&mut self, row: &[f32]) -> Result<()> {
        let compressed = max_pool(row, self.config.block_size)?;
        if self.history.len() == self.config.history {
            self.history.pop_front();
        }
        self.history.push_back(compressed.values);
        Ok(())
    }

    /// Adds a dense row (such as a prefill row) to the history without
    /// selecting anything or advancing the step counter.
    pub fn prime(&mut self, row: &[f32]) -> Result<()> {
        self.push(row)
    }

    /// Consumes the row observed at step `t` and returns the selection for `t + 1`.
    ///
    /// `observed_row` is the row computed under the previous selection. On
    /// calibration steps a supplied `dense_row` is stored instead.
    pub fn step(
        &mut self,
        weights: &PredictorWeights,
        observed_row: &[f32],
        dense_row: Option<&[f32]>,
    ) -> Result<&BTreeSet<usize>> {
        let t_len = observed_row.len();
        if let Some(d) = dense_row {
            if d.len() != t_len {
                return Err(Error::Dimension(format!(
                    "dense row has {} tokens, observed row has {t_len}",
                    d.len()
                )));
            }
        }
        let stored = match dense_row {
            Some(d) if self.step_counter % self.config.calibration_period == 0 => d,
            _ => observed_row,
        };
        self.push(stored)?;

        let next_len = t_len + 1;
        let cfg = self.config;
        if cfg.budget >= next_len {
            self.selection = (0..next_len).collect();
            self.middle.clear();
        } else {
            if self.step_counter % cfg.update_interval == 0 {
                self.middle = if cfg.middle_blocks() == 0 {
                    BTreeSet::new()
                } else {
                    let width = num_blocks(t_len, cfg.block_size);
                    if let Some(r) = self.history.iter().find(|r| r.len() > width) {
                        return Err(Error::State(format!(
                            "history row of {} blocks is wider than the current {width}",
                            r.len()
                        )));
                    }
                    let rows: Vec<&[f32]> = self.history.iter().map(|r| r.as_slice()).collect();
                    let grid = AttentionHistory::from_rows(&rows, cfg.history, width)?;
                    let scores = forward(weights, &grid)?;
                    middle_selection(&scores, &cfg, t_len, next_len)?
                };
            }
            let mut s = fixed_tokens(cfg.sink_tokens, cfg.local_tokens, next_len);
            s.extend(self.middle.iter().copied());
            self.selection = s;
        }
        self.step_counter += 1;
        Ok(&self.selection)
    }
}
