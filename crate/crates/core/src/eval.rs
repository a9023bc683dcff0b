//! Recovery rate, prediction accuracy and the comparison harness.
//!
//! Prediction accuracy is the recovery of a method's selection divided by
//! the recovery of the best possible selection of the same size on the true
//! next row, times 100. Ratios are averaged over decode steps, then heads,
//! then layers.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::baselines::{
    key_pages, select_h2o, select_oracle, select_prev, select_quest, select_snapkv,
    select_streaming, select_worst, snapkv_frozen, BaselineKind,
};
use crate::error::{Error, Result};
use crate::predictor::PredictorWeights;
use crate::selector::{sparse_row, SelectorConfig, SelectorState};
use crate::trace::AttentionTrace;

/// Share of the row's mass captured by `selection`.
pub fn recovery_rate(row: &[f32], selection: &BTreeSet<usize>) -> Result<f64> {
    if let Some(&j) = selection.iter().next_back() {
        if j >= row.len() {
            return Err(Error::Parameter(format!(
                "index {j} outside a row of {} tokens",
                row.len()
            )));
        }
    }
    let total: f64 = row.iter().map(|&v| (v as f64).abs()).sum();
    if !(total > 0.0) {
        return Err(Error::Metric("attention row has zero mass".into()));
    }
    Ok(selection.iter().map(|&j| row[j] as f64).sum::<f64>() / total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    AttnPredictor,
    Baseline(BaselineKind),
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::AttnPredictor => "attnpredictor",
            Method::Baseline(k) => k.name(),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "attnpredictor" {
            Ok(Method::AttnPredictor)
        } else {
            s.parse().map(Method::Baseline)
        }
    }
}

/// Token budget, either fixed or a fraction of the current context length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Budget {
    Tokens(usize),
    Ratio(f64),
}

impl Budget {
    pub fn tokens(&self, len: usize) -> usize {
        match *self {
            Budget::Tokens(n) => n,
            Budget::Ratio(r) => ((r * len as f64).ceil() as usize).max(1),
        }
    }

    fn sort_key(&self) -> (u8, f64) {
        match *self {
            Budget::Tokens(n) => (0, n as f64),
            Budget::Ratio(r) => (1, r),
        }
    }
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Budget::Tokens(n) => write!(f, "{n}"),
            Budget::Ratio(r) => write!(f, "{}%", r * 100.0),
        }
    }
}

impl FromStr for Budget {
    type Err = Error;

    /// `"256"` is a token count, `"10%"` a share of the context.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Parameter(format!("bad budget {s:?}"));
        if let Some(p) = s.strip_suffix('%') {
            let pct: f64 = p.trim().parse().map_err(|_| bad())?;
            if !(pct > 0.0 && pct <= 100.0) {
                return Err(bad());
            }
            Ok(Budget::Ratio(pct / 100.0))
        } else {
            let n: usize = s.parse().map_err(|_| bad())?;
            if n == 0 {
                return Err(bad());
            }
            Ok(Budget::Tokens(n))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Block size, history, calibration period, sink/local split and update
    /// interval for the predictor. Its `budget` field is replaced per step.
    pub selector: SelectorConfig,
    pub budget: Budget,
    /// Accumulation window of H2O+ and SnapKV.
    pub window: usize,
    /// Layers excluded from the average, counted from layer 0.
    pub skip_layers: u32,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            selector: SelectorConfig::default(),
            budget: Budget::Tokens(1024),
            window: 64,
            skip_layers: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadAccuracy {
    pub layer: u32,
    pub head: u32,
    /// Per decode step ratio of method recovery to the best recovery, in `[0, 1]`.
    pub per_step: Vec<f64>,
}

impl HeadAccuracy {
    pub fn mean(&self) -> f64 {
        self.per_step.iter().sum::<f64>() / self.per_step.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub trace_id: String,
    pub method: Method,
    pub config: EvalConfig,
    pub accuracy_pct: f64,
    pub heads: Vec<HeadAccuracy>,
}

/// Steps, then heads, then layers.
fn aggregate(heads: &[HeadAccuracy]) -> f64 {
    let mut by_layer: Vec<(u32, Vec<f64>)> = Vec::new();
    for h in heads {
        match by_layer.last_mut() {
            Some((l, v)) if *l == h.layer => v.push(h.mean()),
            _ => by_layer.push((h.layer, vec![h.mean()])),
        }
    }
    let layer_means: Vec<f64> = by_layer
        .iter()
        .map(|(_, v)| v.iter().sum::<f64>() / v.len() as f64)
        .collect();
    100.0 * layer_means.iter().sum::<f64>() / layer_means.len() as f64
}

fn ratio(row: &[f32], selection: &BTreeSet<usize>, budget: usize) -> Result<f64> {
    // a method that grows past the budget is compared with the best set of its own size
    let oracle = select_oracle(row, budget.max(selection.len()));
    let best = recovery_rate(row, &oracle)?;
    let got = recovery_rate(row, selection)?;
    Ok(got / best)
}

fn eval_head(
    trace: &AttentionTrace,
    layer: u32,
    head: u32,
    method: Method,
    config: &EvalConfig,
    weights: Option<&PredictorWeights>,
) -> Result<HeadAccuracy> {
    let h = *trace.header();
    let first = h.first_step_offset as i64;
    let decode = h.num_decode_steps as i64;
    let prefill = h.prefill_len as usize;
    let mut per_step = Vec::with_capacity(decode as usize);

    let mut selector = match method {
        Method::AttnPredictor => {
            if weights.is_none() {
                return Err(Error::Parameter("attnpredictor needs predictor weights".into()));
            }
            let mut st = SelectorState::new(config.selector)?;
            for s in first..0 {
                st.prime(trace.row(layer, head, s))?;
            }
            Some(st)
        }
        _ => None,
    };
    let frozen = match method {
        Method::Baseline(BaselineKind::SnapKv) => {
            let from = (1 - config.window as i64).max(first);
            let window: Vec<&[f32]> = (from..=0).map(|s| trace.row(layer, head, s)).collect();
            Some(snapkv_frozen(&window, config.budget.tokens(prefill), prefill)?)
        }
        _ => None,
    };
    if method == Method::Baseline(BaselineKind::Quest) && !trace.has_qk() {
        return Err(Error::Unsupported("quest needs query/key tensors".into()));
    }
    let mut previous: BTreeSet<usize> = BTreeSet::new();

    for s in 1..=decode {
        let row = trace.row(layer, head, s);
        let n = row.len();
        let budget = config.budget.tokens(n);
        let selection = match method {
            Method::AttnPredictor => {
                let st = selector.as_mut().expect("selector state");
                let w = weights.expect("checked above");
                st.set_budget(budget)?;
                let dense = trace.row(layer, head, s - 1);
                let observed = if s == 1 {
                    dense.to_vec()
                } else {
                    sparse_row(dense, &previous)
                };
                let sel = st.step(w, &observed, Some(dense))?.clone();
                previous = sel.clone();
                sel
            }
            Method::Baseline(kind) => match kind {
                BaselineKind::Oracle => select_oracle(row, budget),
                BaselineKind::Worst => select_worst(row, budget),
                BaselineKind::StreamingLlm => select_streaming(n, budget),
                BaselineKind::H2oPlus => {
                    let from = (s - config.window as i64).max(first);
                    let rows: Vec<&[f32]> = (from..s).map(|k| trace.row(layer, head, k)).collect();
                    select_h2o(&rows, budget, n)?
                }
                BaselineKind::SnapKv => select_snapkv(frozen.as_ref().expect("frozen set"), prefill, n),
                BaselineKind::Quest => {
                    let d = h.head_dim as usize;
                    let keys = trace.head_keys(layer, head).expect("has q/k");
                    let q = trace.query(layer, head, n - 1).expect("has q/k");
                    let b = config.selector.block_size;
                    let pages = key_pages(&keys[..n * d], d, n, b);
                    select_quest(q, &pages, budget, b, n)?
                }
                BaselineKind::PrevToken => select_prev(Some(trace.row(layer, head, s - 1)), budget, n)?,
                BaselineKind::PrevLayer => {
                    let reference = (layer > 0).then(|| trace.row(layer - 1, head, s));
                    select_prev(reference, budget, n)?
                }
            },
        };
        per_step.push(ratio(row, &selection, budget)?);
    }
    Ok(HeadAccuracy {
        layer,
        head,
        per_step,
    })
}

/// Runs one method over every evaluated head of a trace.
pub fn evaluate(
    trace: &AttentionTrace,
    trace_id: &str,
    method: Method,
    config: &EvalConfig,
    weights: Option<&PredictorWeights>,
) -> Result<EvalReport> {
    let h = *trace.header();
    if h.num_decode_steps == 0 {
        return Err(Error::Parameter("trace has no decode steps".into()));
    }
    if config.skip_layers >= h.num_layers {
        return Err(Error::Parameter("every layer is skipped".into()));
    }
    if config.window < 1 {
        return Err(Error::Config("window must be at least 1".into()));
    }
    let mut heads = Vec::new();
    for layer in config.skip_layers..h.num_layers {
        for head in 0..h.num_heads {
            heads.push(eval_head(trace, layer, head, method, config, weights)?);
        }
    }
    Ok(EvalReport {
        trace_id: trace_id.to_string(),
        method,
        config: config.clone(),
        accuracy_pct: aggregate(&heads),
        heads,
    })
}

/// Mean of `recovery(method) / recovery(best)` times 100.
pub fn prediction_accuracy(
    trace: &AttentionTrace,
    method: Method,
    config: &EvalConfig,
    weights: Option<&PredictorWeights>,
) -> Result<f64> {
    Ok(evaluate(trace, "", method, config, weights)?.accuracy_pct)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub history: Vec<usize>,
    pub calibration_period: Vec<usize>,
    pub block_size: Vec<usize>,
    pub budget: Vec<Budget>,
}

impl SweepGrid {
    pub fn is_empty(&self) -> bool {
        self.history.is_empty()
            || self.calibration_period.is_empty()
            || self.block_size.is_empty()
            || self.budget.is_empty()
    }

    pub fn len(&self) -> usize {
        self.history.len() * self.calibration_period.len() * self.block_size.len() * self.budget.len()
    }
}

/// One result line; failed cells carry `NaN` and the error text.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub trace: String,
    pub method: Method,
    pub history: usize,
    pub calibration_period: usize,
    pub block_size: usize,
    pub budget: Budget,
    pub accuracy_pct: f64,
    pub error: Option<String>,
}

/// Predictor weights for a sweep: one set for every block size, or one per block size.
#[derive(Debug, Clone, Copy)]
pub enum SweepWeights<'a> {
    None,
    Shared(&'a PredictorWeights),
    PerBlock(&'a [(usize, PredictorWeights)]),
}

impl<'a> SweepWeights<'a> {
    fn for_block(&self, b: usize) -> Option<&'a PredictorWeights> {
        match *self {
            SweepWeights::None => None,
            SweepWeights::Shared(w) => Some(w),
            SweepWeights::PerBlock(v) => v.iter().find(|(k, _)| *k == b).map(|(_, w)| w),
        }
    }
}

/// Evaluates every method at every grid point on every trace.
///
/// Cell failures are recorded in the row and do not stop the sweep. Methods
/// that ignore a grid axis are computed once per distinct relevant setting.
pub fn sweep(
    traces: &[(String, AttentionTrace)],
    grid: &SweepGrid,
    methods: &[Method],
    base: &EvalConfig,
    weights: SweepWeights<'_>,
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() || methods.is_empty() || traces.is_empty() {
        return Err(Error::Parameter("sweep grid, methods and traces must be non-empty".into()));
    }
    let mut cache: HashMap<(usize, Method, usize, usize, usize, String), std::result::Result<f64, String>> =
        HashMap::new();
    let mut rows = Vec::new();
    for (ti, (name, trace)) in traces.iter().enumerate() {
        for &method in methods {
            for &hist in &grid.history {
                for &m in &grid.calibration_period {
                    for &b in &grid.block_size {
                        for budget in &grid.budget {
                            let (kh, km, kb) = match method {
                                Method::AttnPredictor => (hist, m, b),
                                Method::Baseline(BaselineKind::Quest) => (0, 0, b),
                                Method::Baseline(_) => (0, 0, 0),
                            };
                            let key = (ti, method, kh, km, kb, budget.to_string());
                            let result = cache
                                .entry(key)
                                .or_insert_with(|| {
                                    let config = EvalConfig {
                                        selector: SelectorConfig {
                                            history: hist,
                                            calibration_period: m,
                                            block_size: b,
                                            ..base.selector
                                        },
                                        budget: *budget,
                                        ..base.clone()
                                    };
                                    prediction_accuracy(trace, method, &config, weights.for_block(b))
                                        .map_err(|e| e.to_string())
                                })
                                .clone();
                            let (accuracy_pct, error) = match result {
                                Ok(a) => (a, None),
                                Err(e) => (f64::NAN, Some(e)),
                            };
                            rows.push(SweepRow {
                                trace: name.clone(),
                                method,
                                history: hist,
                                calibration_period: m,
                                block_size: b,
                                budget: *budget,
                                accuracy_pct,
                                error,
                            });
                        }
                    }
                }
            }
        }
    }
    sort_rows(&mut rows);
    Ok(rows)
}

pub fn sort_rows(rows: &mut [SweepRow]) {
    rows.sort_by(|a, b| {
        (a.trace.as_str(), a.method.name(), a.history, a.calibration_period, a.block_size)
            .cmp(&(b.trace.as_str(), b.method.name(), b.history, b.calibration_period, b.block_size))
            .then(a.budget.sort_key().partial_cmp(&b.budget.sort_key()).expect("finite budgets"))
    });
}

/// CSV with header `trace,method,H,M,b,B,accuracy_pct`, rows in the given order.
pub fn write_rows_csv<W: Write>(rows: &[SweepRow], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["trace", "method", "H", "M", "b", "B", "accuracy_pct"])?;
    for r in rows {
        let acc = if r.accuracy_pct.is_nan() {
            "NaN".to_string()
        } else {
            format!("{:.4}", r.accuracy_pct)
        };
        w.write_record([
            r.trace.clone(),
            r.method.to_string(),
            r.history.to_string(),
            r.calibration_period.to_string(),
            r.block_size.to_string(),
            r.budget.to_string(),
            acc,
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(v: &[usize]) -> BTreeSet<usize> {
        v.iter().copied().collect()
    }

    #[test]
    fn recovery_examples() {
        assert_eq!(recovery_rate(&[0.5, 0.3, 0.2], &set(&[0, 1, 2])).unwrap(), 1.0);
        let r = recovery_rate(&[0.5, 0.3, 0.2], &set(&[0])).unwrap();
        assert!((r - 0.5).abs() < 1e-7);
        let r = recovery_rate(&[0.2, 0.2, 0.6], &set(&[0, 2])).unwrap();
        assert!((r - 0.8).abs() < 1e-7);
    }

    #[test]
    fn recovery_errors() {
        assert!(matches!(recovery_rate(&[0.0, 0.0], &set(&[0])), Err(Error::Metric(_))));
        assert!(matches!(recovery_rate(&[1.0], &set(&[1])), Err(Error::Parameter(_))));
    }

    #[test]
    fn budget_parsing() {
        assert_eq!("256".parse::<Budget>().unwrap(), Budget::Tokens(256));
        assert_eq!("10%".parse::<Budget>().unwrap(), Budget::Ratio(0.1));
        assert_eq!(Budget::Ratio(0.1).to_string(), "10%");
        assert_eq!(Budget::Ratio(0.1).tokens(95), 10);
        assert!("0".parse::<Budget>().is_err());
        assert!("150%".parse::<Budget>().is_err());
        assert!("x".parse::<Budget>().is_err());
    }

    #[test]
    fn method_names() {
        assert_eq!("attnpredictor".parse::<Method>().unwrap(), Method::AttnPredictor);
        assert_eq!(
            "h2o_plus".parse::<Method>().unwrap(),
            Method::Baseline(BaselineKind::H2oPlus)
        );
    }

    #[test]
    fn aggregate_weights_layers_equally() {
        let heads = vec![
            HeadAccuracy { layer: 0, head: 0, per_step: vec![1.0, 1.0] },
            HeadAccuracy { layer: 0, head: 1, per_step: vec![0.5, 0.5] },
            HeadAccuracy { layer: 1, head: 0, per_step: vec![0.25, 0.75] },
        ];
        // layer 0 mean 0.75, layer 1 mean 0.5
        assert!((aggregate(&heads) - 62.5).abs() < 1e-12);
    }
}
