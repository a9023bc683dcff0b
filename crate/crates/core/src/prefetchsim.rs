//! Deterministic latency model of KV-cache prefetching schedules.
//!
//! Three schedules are compared per context length `n`:
//!
//! * `cross_token`: each layer predicts and fetches the sparse cache for the
//!   next token while the whole model computes the current one. Layers run
//!   their prefetches in parallel, so a token costs `max(C, p + x)`.
//! * `cross_layer`: the prefetch for a layer only overlaps the previous
//!   layer's compute, so a token costs `L * max(C / L, p + x)`.
//! * `full_offload`: every layer loads its entire cache, overlapped one
//!   layer ahead: `L * max(C / L, f + n * bytes / bandwidth)`.
//!
//! `C` is whole-model compute per token, `p` and `x` the per-layer predict
//! and sparse-transfer latencies. All are functions of `n`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One measured column of a per-layer latency breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BreakdownRow {
    pub context_len: usize,
    pub predict_ms: f64,
    pub transfer_ms: f64,
    /// Observed per-token total, if known.
    pub total_ms: Option<f64>,
}

/// Published per-layer breakdown of the prefetching system (4K to 32K tokens).
pub const REFERENCE_BREAKDOWN: [BreakdownRow; 4] = [
    BreakdownRow { context_len: 4_000, predict_ms: 0.7, transfer_ms: 2.3, total_ms: Some(47.3) },
    BreakdownRow { context_len: 8_000, predict_ms: 1.2, transfer_ms: 3.9, total_ms: Some(48.6) },
    BreakdownRow { context_len: 16_000, predict_ms: 2.3, transfer_ms: 7.6, total_ms: Some(49.6) },
    BreakdownRow { context_len: 32_000, predict_ms: 4.5, transfer_ms: 13.2, total_ms: Some(50.0) },
];

/// Whole-model compute per token at the longest reference context.
pub const REFERENCE_COMPUTE_MS: f64 = 50.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub num_layers: usize,
    /// Whole-model compute per token at `compute_ref_len`.
    pub compute_ms: f64,
    pub compute_ref_len: usize,
    /// Compute growth per doubling of the context.
    pub compute_log_slope_ms: f64,
    pub predict_intercept_ms: f64,
    pub predict_per_token_ms: f64,
    pub transfer_intercept_ms: f64,
    pub transfer_per_token_ms: f64,
    pub bytes_per_token_per_layer: f64,
    /// Host-to-device bandwidth in bytes per millisecond.
    pub pcie_bandwidth: f64,
    /// Fixed cost of one layer's full-cache transfer.
    pub transfer_fixed_overhead_ms: f64,
    /// Tokens kept resident per layer by the sparse schedules.
    pub budget: usize,
    pub context_lengths: Vec<usize>,
}

impl Default for SimConfig {
    fn default() -> Self {
        fit_parameters(&REFERENCE_BREAKDOWN, REFERENCE_COMPUTE_MS)
            .expect("reference table fits")
            .config
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("compute_ms", self.compute_ms),
            ("bytes_per_token_per_layer", self.bytes_per_token_per_layer),
            ("pcie_bandwidth", self.pcie_bandwidth),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("compute_log_slope_ms", self.compute_log_slope_ms),
            ("predict_intercept_ms", self.predict_intercept_ms),
            ("predict_per_token_ms", self.predict_per_token_ms),
            ("transfer_intercept_ms", self.transfer_intercept_ms),
            ("transfer_per_token_ms", self.transfer_per_token_ms),
            ("transfer_fixed_overhead_ms", self.transfer_fixed_overhead_ms),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.num_layers == 0 || self.compute_ref_len == 0 {
            return Err(Error::Config("num_layers and compute_ref_len must be positive".into()));
        }
        if self.context_lengths.is_empty() || self.context_lengths.contains(&0) {
            return Err(Error::Config("context_lengths must be non-empty and positive".into()));
        }
        for &n in &self.context_lengths {
            if self.compute(n) <= 0.0 {
                return Err(Error::Config(format!("compute time is not positive at {n} tokens")));
            }
        }
        Ok(())
    }

    pub fn compute(&self, n: usize) -> f64 {
        self.compute_ms + self.compute_log_slope_ms * (n as f64 / self.compute_ref_len as f64).log2()
    }

    pub fn predict(&self, n: usize) -> f64 {
        self.predict_intercept_ms + self.predict_per_token_ms * n as f64
    }

    pub fn sparse_transfer(&self, n: usize) -> f64 {
        self.transfer_intercept_ms + self.transfer_per_token_ms * n as f64
    }

    pub fn full_transfer(&self, n: usize) -> f64 {
        self.transfer_fixed_overhead_ms + n as f64 * self.bytes_per_token_per_layer / self.pcie_bandwidth
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimRow {
    pub context_len: usize,
    pub compute_ms: f64,
    pub predict_ms: f64,
    pub transfer_ms: f64,
    pub wait_ms: f64,
    pub cross_token_ms: f64,
    pub cross_layer_ms: f64,
    pub full_offload_ms: f64,
    /// `full_offload_ms / cross_token_ms`.
    pub speedup: f64,
    pub resident_kv_bytes_sparse: f64,
    pub resident_kv_bytes_full: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimReport {
    pub rows: Vec<SimRow>,
}

/// Per-token latency of `predict + transfer` overlapped with compute `compute` under cross-token prefetching.
pub fn cross_token_latency(compute: f64, predict: f64, transfer: f64) -> (f64, f64) {
    let prefetch = predict + transfer;
    (compute.max(prefetch), (compute - prefetch).max(0.0))
}

pub fn cross_layer_latency(num_layers: usize, compute: f64, predict: f64, transfer: f64) -> f64 {
    let per_layer = compute / num_layers as f64;
    num_layers as f64 * per_layer.max(predict + transfer)
}

pub fn full_offload_latency(num_layers: usize, compute: f64, full_transfer: f64) -> f64 {
    let per_layer = compute / num_layers as f64;
    num_layers as f64 * per_layer.max(full_transfer)
}

pub fn simulate(config: &SimConfig) -> Result<SimReport> {
    config.validate()?;
    let l = config.num_layers;
    let rows = config
        .context_lengths
        .iter()
        .map(|&n| {
            let compute = config.compute(n);
            let p = config.predict(n);
            let x = config.sparse_transfer(n);
            let (cross_token, wait) = cross_token_latency(compute, p, x);
            let full = full_offload_latency(l, compute, config.full_transfer(n));
            let kv = config.bytes_per_token_per_layer * l as f64;
            SimRow {
                context_len: n,
                compute_ms: compute,
                predict_ms: p,
                transfer_ms: x,
                wait_ms: wait,
                cross_token_ms: cross_token,
                cross_layer_ms: cross_layer_latency(l, compute, p, x),
                full_offload_ms: full,
                speedup: full / cross_token,
                resident_kv_bytes_sparse: kv * config.budget.min(n) as f64,
                resident_kv_bytes_full: kv * n as f64,
            }
        })
        .collect();
    Ok(SimReport { rows })
}

/// Least-squares line `y = intercept + slope * x`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineFit {
    pub intercept: f64,
    pub slope: f64,
    /// `observed - fitted` per input point.
    pub residuals: Vec<f64>,
}

impl AffineFit {
    pub fn max_abs_residual(&self) -> f64 {
        self.residuals.iter().fold(0.0, |m, r| m.max(r.abs()))
    }
}

pub fn affine_fit(xs: &[f64], ys: &[f64]) -> Result<AffineFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Parameter("affine fit needs at least two points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(Error::Parameter("affine fit needs two distinct context lengths".into()));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residuals = xs.iter().zip(ys).map(|(x, y)| y - (intercept + slope * x)).collect();
    Ok(AffineFit {
        intercept,
        slope,
        residuals,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub config: SimConfig,
    pub predict: AffineFit,
    pub transfer: AffineFit,
    /// `observed total - simulated cross_token total` for rows with a total.
    pub total_residuals: Vec<(usize, f64)>,
}

/// Fits predict and sparse-transfer lines to measured rows and the compute
/// growth to measured totals.
///
/// Compute is pinned to `compute_ms` at the longest row; the per-doubling
/// slope is the least-squares value through that anchor. Without totals the
/// slope is zero.
pub fn fit_parameters(rows: &[BreakdownRow], compute_ms: f64) -> Result<FitReport> {
    let xs: Vec<f64> = rows.iter().map(|r| r.context_len as f64).collect();
    let predict = affine_fit(&xs, &rows.iter().map(|r| r.predict_ms).collect::<Vec<_>>())?;
    let transfer = affine_fit(&xs, &rows.iter().map(|r| r.transfer_ms).collect::<Vec<_>>())?;
    let ref_len = rows.iter().map(|r| r.context_len).max().expect("at least two rows");

    let (mut num, mut den) = (0.0, 0.0);
    for r in rows {
        if let Some(total) = r.total_ms {
            let u = (r.context_len as f64 / ref_len as f64).log2();
            num += u * (total - compute_ms);
            den += u * u;
        }
    }
    let log_slope = if den > 0.0 { num / den } else { 0.0 };

    let config = SimConfig {
        num_layers: 32,
        compute_ms,
        compute_ref_len: ref_len,
        compute_log_slope_ms: log_slope.max(0.0),
        predict_intercept_ms: predict.intercept.max(0.0),
        predict_per_token_ms: predict.slope.max(0.0),
        transfer_intercept_ms: transfer.intercept.max(0.0),
        transfer_per_token_ms: transfer.slope.max(0.0),
        bytes_per_token_per_layer: 4096.0,
        pcie_bandwidth: 16.0e6,
        transfer_fixed_overhead_ms: transfer.intercept.max(0.0),
        budget: 1024,
        context_lengths: rows.iter().map(|r| r.context_len).collect(),
    };
    let report = simulate(&config)?;
    let total_residuals = rows
        .iter()
        .zip(&report.rows)
        .filter_map(|(r, s)| r.total_ms.map(|t| (r.context_len, t - s.cross_token_ms)))
        .collect();
    Ok(FitReport {
        config,
        predict,
        transfer,
        total_residuals,
    })
}

/// Full report as CSV, one row per context length.
pub fn write_report_csv<W: Write>(report: &SimReport, sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    for row in &report.rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Plot data: context length against the per-token latency of each schedule.
pub fn write_plot_csv<W: Write>(report: &SimReport, sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["context_len", "cross_token", "cross_layer", "full_offload"])?;
    for r in &report.rows {
        w.write_record([
            r.context_len.to_string(),
            format!("{:.4}", r.cross_token_ms),
            format!("{:.4}", r.cross_layer_ms),
            format!("{:.4}", r.full_offload_ms),
        ])?;
    }
    w.flush()?;
    Ok(())
}
