//! Synthetic attention traces built from drifting queries, slowly varying keys and RoPE.
//!
//! Queries follow a normalized random walk on the unit sphere; keys do the
//! same along the position axis. Raw scores are rotary inner products, scaled
//! by `logit_scale`, plus optional logit boosts for re-accessed positions and
//! for positions that recur with a fixed period along the decode axis.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{AttentionTrace, TraceHeader};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_layers: u32,
    pub num_heads: u32,
    pub head_dim: usize,
    pub prefill_len: usize,
    pub decode_steps: usize,
    /// Prefill rows kept in the trace, counting the final one.
    pub history_rows: usize,
    pub query_drift: f64,
    pub key_drift: f64,
    pub rope_base: f64,
    pub logit_scale: f64,
    /// 0 disables the periodic boost.
    pub seasonal_period: usize,
    pub seasonal_positions: BTreeSet<usize>,
    pub seasonal_boost: f64,
    pub reaccess_positions: BTreeSet<usize>,
    pub reaccess_boost: f64,
    pub rng_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            num_heads: 4,
            head_dim: 32,
            prefill_len: 256,
            decode_steps: 128,
            history_rows: 64,
            query_drift: 0.1,
            key_drift: 0.3,
            rope_base: 10_000.0,
            logit_scale: 8.0,
            seasonal_period: 0,
            seasonal_positions: BTreeSet::new(),
            seasonal_boost: 3.0,
            reaccess_positions: BTreeSet::new(),
            reaccess_boost: 3.0,
            rng_seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.head_dim == 0 || self.head_dim % 2 != 0 {
            return bad(format!("head_dim must be positive and even, got {}", self.head_dim));
        }
        if self.num_layers == 0 || self.num_heads == 0 {
            return bad("num_layers and num_heads must be positive".into());
        }
        if self.prefill_len == 0 || self.decode_steps == 0 {
            return bad("prefill_len and decode_steps must be positive".into());
        }
        if self.history_rows == 0 {
            return bad("history_rows must be positive".into());
        }
        for (name, v) in [("query_drift", self.query_drift), ("key_drift", self.key_drift)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if !(self.rope_base > 0.0) || !self.rope_base.is_finite() {
            return bad(format!("rope_base must be positive, got {}", self.rope_base));
        }
        if !self.logit_scale.is_finite() || !self.reaccess_boost.is_finite() || !self.seasonal_boost.is_finite() {
            return bad("logit_scale and boosts must be finite".into());
        }
        if self.seasonal_period == 1 {
            return bad("seasonal_period must be 0 or at least 2".into());
        }
        Ok(())
    }

    pub fn num_positions(&self) -> usize {
        self.prefill_len + self.decode_steps
    }
}

/// Rotary frequencies `base^(-2m/d)` for `m = 0..d/2`.
pub fn rope_thetas(head_dim: usize, base: f64) -> Vec<f64> {
    (0..head_dim / 2)
        .map(|m| base.powf(-2.0 * m as f64 / head_dim as f64))
        .collect()
}

/// Rotary attention logit between a query at position `i` and a key at position `j`.
///
/// Evaluates `sum_m <q_m, R((j - i) theta_m) k_m>` over 2-D groups, which equals
/// `sum_m |q_m| |k_m| cos(phi_m + (j - i) theta_m)`.
pub fn rope_score(q: &[f64], k: &[f64], i: i64, j: i64, rope_base: f64) -> Result<f64> {
    if q.len() != k.len() || q.len() % 2 != 0 {
        return Err(Error::Dimension(format!(
            "rope needs equal even dimensions, got {} and {}",
            q.len(),
            k.len()
        )));
    }
    let thetas = rope_thetas(q.len(), rope_base);
    rope_score_with_thetas(q, k, j - i, &thetas)
}

/// [`rope_score`] with explicit per-group frequencies.
pub fn rope_score_with_thetas(q: &[f64], k: &[f64], offset: i64, thetas: &[f64]) -> Result<f64> {
    if q.len() != k.len() || q.len() != 2 * thetas.len() {
        return Err(Error::Dimension(format!(
            "rope needs {} dims for {} frequencies, got {} and {}",
            2 * thetas.len(),
            thetas.len(),
            q.len(),
            k.len()
        )));
    }
    let mut acc = 0.0;
    for (m, theta) in thetas.iter().enumerate() {
        let (s, c) = (offset as f64 * theta).sin_cos();
        acc += rotated_dot(q[2 * m], q[2 * m + 1], k[2 * m], k[2 * m + 1], c, s);
    }
    Ok(acc)
}

#[inline]
fn rotated_dot(q0: f64, q1: f64, k0: f64, k1: f64, c: f64, s: f64) -> f64 {
    q0 * (k0 * c - k1 * s) + q1 * (k0 * s + k1 * c)
}

fn random_unit(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Normalized random walk `x_{t+1} = normalize(x_t + drift * g_t)`.
fn drift_walk(rng: &mut impl Rng, len: usize, d: usize, drift: f64) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(len);
    let mut cur = random_unit(rng, d);
    for _ in 0..len {
        out.push(cur.clone());
        let g = random_unit(rng, d);
        let next: Vec<f64> = cur.iter().zip(&g).map(|(a, b)| a + drift * b).collect();
        let n = norm(&next);
        // drift = 1 with g = -cur cancels exactly; keep the old direction
        if n > 1e-12 {
            cur = next.into_iter().map(|x| x / n).collect();
        }
    }
    out
}

/// Query sequence for every token position, seeded by `config.rng_seed`.
pub fn gen_query_sequence(config: &SynthConfig) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    drift_walk(&mut rng, config.num_positions(), config.head_dim, config.query_drift)
}

/// Mean cosine similarity between vectors `lag` apart.
pub fn cosine_autocorrelation(seq: &[Vec<f64>], lag: usize) -> f64 {
    if seq.len() <= lag {
        return f64::NAN;
    }
    let n = seq.len() - lag;
    let total: f64 = (0..n)
        .map(|t| {
            let (a, b) = (&seq[t], &seq[t + lag]);
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            dot / (norm(a) * norm(b))
        })
        .sum();
    total / n as f64
}

/// Finds the query drift whose lag-1 autocorrelation is `target`.
///
/// Bisection over `[0, 1]` with common random numbers; stops after 20 halvings
/// or once within 0.005 of the target.
pub fn calibrate_query_drift(target: f64, steps: usize, head_dim: usize, seed: u64) -> f64 {
    let rho = |drift: f64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        cosine_autocorrelation(&drift_walk(&mut rng, steps, head_dim, drift), 1)
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut mid = 0.5;
    for _ in 0..20 {
        mid = 0.5 * (lo + hi);
        let r = rho(mid);
        if (r - target).abs() < 0.005 {
            break;
        }
        // autocorrelation falls as drift grows
        if r > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    mid
}

fn head_seed(seed: u64, layer: u32, head: u32) -> u64 {
    // splitmix64 over the combined index
    let mut z = seed ^ ((layer as u64) << 32 | head as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn rotate_in_place(v: &mut [f64], position: usize, thetas: &[f64]) {
    for (m, theta) in thetas.iter().enumerate() {
        let (s, c) = (position as f64 * theta).sin_cos();
        let (x, y) = (v[2 * m], v[2 * m + 1]);
        v[2 * m] = x * c - y * s;
        v[2 * m + 1] = x * s + y * c;
    }
}

struct HeadData {
    rows: Vec<Vec<f32>>,
    queries: Vec<f32>,
    keys: Vec<f32>,
}

fn gen_head(config: &SynthConfig, layer: u32, head: u32, first_step: i64) -> HeadData {
    let d = config.head_dim;
    let n = config.num_positions();
    let mut rng = ChaCha8Rng::seed_from_u64(head_seed(config.rng_seed, layer, head));
    let queries = drift_walk(&mut rng, n, d, config.query_drift);
    let keys = drift_walk(&mut rng, n, d, config.key_drift);
    let thetas = rope_thetas(d, config.rope_base);

    // cos/sin by backward distance i - j, shared across all rows
    let table: Vec<(f64, f64)> = (0..n)
        .flat_map(|dist| {
            thetas
                .iter()
                .map(move |th| (-(dist as f64) * th).sin_cos())
                .map(|(s, c)| (c, s))
        })
        .collect();
    let half = thetas.len();

    let mut rows = Vec::new();
    let mut logits = Vec::with_capacity(n);
    for step in first_step..=config.decode_steps as i64 {
        let len = (config.prefill_len as i64 + step) as usize;
        let pos = len - 1;
        let q = &queries[pos];
        logits.clear();
        for (j, k) in keys[..len].iter().enumerate() {
            let rot = &table[(pos - j) * half..(pos - j + 1) * half];
            let raw: f64 = rot
                .iter()
                .enumerate()
                .map(|(m, &(c, s))| rotated_dot(q[2 * m], q[2 * m + 1], k[2 * m], k[2 * m + 1], c, s))
                .sum();
            let mut logit = config.logit_scale * raw;
            if config.reaccess_positions.contains(&j) {
                logit += config.reaccess_boost;
            }
            if config.seasonal_period >= 2
                && pos % config.seasonal_period == 0
                && config.seasonal_positions.contains(&j)
            {
                logit += config.seasonal_boost;
            }
            logits.push(logit);
        }
        rows.push(softmax_f32(&logits));
    }

    // post-rotation tensors: stored q . stored k reproduces the rotary logit
    let mut q_out = Vec::with_capacity(n * d);
    let mut k_out = Vec::with_capacity(n * d);
    for (pos, (q, k)) in queries.iter().zip(&keys).enumerate() {
        let mut q = q.iter().map(|x| x * config.logit_scale).collect::<Vec<_>>();
        let mut k = k.clone();
        rotate_in_place(&mut q, pos, &thetas);
        rotate_in_place(&mut k, pos, &thetas);
        q_out.extend(q.iter().map(|&x| x as f32));
        k_out.extend(k.iter().map(|&x| x as f32));
    }
    HeadData {
        rows,
        queries: q_out,
        keys: k_out,
    }
}

pub(crate) fn softmax_f32(logits: &[f64]) -> Vec<f32> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| (e / sum) as f32).collect()
}

/// Generates a full trace with query/key tensors. Deterministic in `rng_seed`.
pub fn gen_trace(config: &SynthConfig) -> Result<AttentionTrace> {
    config.validate()?;
    let kept = config.history_rows.min(config.prefill_len);
    let first_step = -(kept as i64 - 1);
    let header = TraceHeader {
        num_layers: config.num_layers,
        num_heads: config.num_heads,
        prefill_len: config.prefill_len as u32,
        num_decode_steps: config.decode_steps as u32,
        has_qk: true,
        head_dim: config.head_dim as u32,
        first_step_offset: first_step as i32,
    };
    let mut rows = Vec::new();
    let mut queries = Vec::new();
    let mut keys = Vec::new();
    for layer in 0..config.num_layers {
        for head in 0..config.num_heads {
            let h = gen_head(config, layer, head, first_step);
            rows.extend(h.rows);
            queries.extend(h.queries);
            keys.extend(h.keys);
        }
    }
    AttentionTrace::new(header, rows, Some((queries, keys)))
}

/// Placement of boosted spans across a seeded family of traces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatternMix {
    /// Contiguous tokens per boosted span.
    pub span_len: usize,
    pub reaccess_spans: usize,
    /// Spans boosted every `seasonal_period` steps; requires a nonzero period.
    pub seasonal_spans: usize,
    /// Also re-access token 0, the usual attention sink.
    pub boost_first_token: bool,
}

impl Default for PatternMix {
    fn default() -> Self {
        Self {
            span_len: 8,
            reaccess_spans: 2,
            seasonal_spans: 1,
            boost_first_token: true,
        }
    }
}

/// `count` configs derived from `base` that each carry re-access and seasonal
/// spans at random prompt positions, on top of the positional structure
/// RoPE already produces. Deterministic in `seed`.
pub fn mixed_configs(base: &SynthConfig, mix: &PatternMix, count: usize, seed: u64) -> Result<Vec<SynthConfig>> {
    base.validate()?;
    if mix.span_len == 0 || mix.span_len > base.prefill_len {
        return Err(Error::Config(format!(
            "span_len must lie in [1, {}], got {}",
            base.prefill_len, mix.span_len
        )));
    }
    if mix.seasonal_spans > 0 && base.seasonal_period == 0 {
        return Err(Error::Config("seasonal spans need a nonzero seasonal_period".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spans = |rng: &mut ChaCha8Rng, n: usize| -> BTreeSet<usize> {
        (0..n)
            .flat_map(|_| {
                let start = rng.random_range(0..=base.prefill_len - mix.span_len);
                start..start + mix.span_len
            })
            .collect()
    };
    Ok((0..count)
        .map(|_| {
            let mut c = base.clone();
            c.rng_seed = rng.random();
            c.reaccess_positions = spans(&mut rng, mix.reaccess_spans);
            if mix.boost_first_token {
                c.reaccess_positions.insert(0);
            }
            c.seasonal_positions = spans(&mut rng, mix.seasonal_spans);
            c
        })
        .collect())
}

/// Largest observed `|dA| / (|dq| * sigma_max(K))` over consecutive rows.
///
/// `dA = dq K^T` is the change of the raw logits over the keys both steps
/// share; Cauchy-Schwarz bounds the ratio by 1. A violation beyond `1e-6`
/// absolute slack is reported as a numeric error.
pub fn drift_bound_check(trace: &AttentionTrace) -> Result<f64> {
    if !trace.has_qk() {
        return Err(Error::Unsupported(
            "drift bound needs query/key tensors".into(),
        ));
    }
    let h = *trace.header();
    let d = h.head_dim as usize;
    let mut worst = 0.0f64;
    for layer in 0..h.num_layers {
        for head in 0..h.num_heads {
            let keys = trace.head_keys(layer, head).expect("has q/k");
            let queries = trace.head_queries(layer, head).expect("has q/k");
            let key = |j: usize| keys[j * d..(j + 1) * d].iter().map(|&x| x as f64);
            let mut gram = nalgebra::DMatrix::<f64>::zeros(d, d);
            let mut gram_len = 0usize;
            let steps: Vec<i64> = h.steps().collect();
            for pair in steps.windows(2) {
                let shared = h.row_len(pair[0]);
                let pos = shared - 1;
                while gram_len < shared {
                    let k = nalgebra::DVector::from_iterator(d, key(gram_len));
                    gram += &k * k.transpose();
                    gram_len += 1;
                }
                let dq: Vec<f64> = (0..d)
                    .map(|c| queries[(pos + 1) * d + c] as f64 - queries[pos * d + c] as f64)
                    .collect();
                let dq_norm = norm(&dq);
                let sigma_max = gram
                    .clone()
                    .symmetric_eigenvalues()
                    .iter()
                    .copied()
                    .fold(0.0f64, f64::max)
                    .sqrt();
                let da_norm = (0..shared)
                    .map(|j| {
                        let v: f64 = key(j).zip(&dq).map(|(k, q)| k * q).sum();
                        v * v
                    })
                    .sum::<f64>()
                    .sqrt();
                let bound = dq_norm * sigma_max;
                if da_norm > bound + 1e-6 {
                    return Err(Error::Numeric(format!(
                        "drift bound violated at layer {layer}, head {head}, step {}: {da_norm} > {bound}",
                        pair[1]
                    )));
                }
                if bound > 0.0 {
                    worst = worst.max(da_norm / bound);
                }
            }
        }
    }
    Ok(worst)
}
