//! One function per subcommand. Each resolves its settings, checks inputs
//! before doing any work, writes its outputs and then the run manifest.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use attnpred::eval::{evaluate, sweep, write_rows_csv, Budget, EvalConfig, Method, SweepGrid, SweepRow, SweepWeights};
use attnpred::predictor::{build_dataset, train, write_metrics_csv, PredictorWeights, TrainConfig};
use attnpred::prefetchsim::{simulate, write_plot_csv, write_report_csv, SimConfig};
use attnpred::selector::SelectorConfig;
use attnpred::synth::{gen_trace, SynthConfig};
use attnpred::trace::{read_trace_file, write_trace_file, AttentionTrace};
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::manifest::{output_path, RunManifest};
use crate::settings::{resolve, Overrides};

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Flat `key = value` settings file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn overrides(&self) -> CliResult<Overrides> {
        Overrides::from_pairs(&self.set)
    }
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(attnpred::Error::from)?))
}

fn load_traces(paths: &[PathBuf]) -> CliResult<Vec<(String, AttentionTrace)>> {
    if paths.is_empty() {
        return Err(CliError::Usage("no trace files given".into()));
    }
    // fail on a missing file before reading any of the others
    if let Some(p) = paths.iter().find(|p| !p.is_file()) {
        let missing = std::io::Error::new(std::io::ErrorKind::NotFound, "no such file");
        return Err(CliError::context(p.display())(missing.into()));
    }
    paths
        .iter()
        .map(|p| {
            let trace = read_trace_file(p).map_err(CliError::context(p.display()))?;
            let id = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
            Ok((id, trace))
        })
        .collect()
}

fn load_weights(path: &Path) -> CliResult<PredictorWeights> {
    PredictorWeights::load(path).map_err(CliError::context(path.display()))
}

fn parse_methods(names: &[String]) -> CliResult<Vec<Method>> {
    if names.is_empty() {
        return Err(CliError::Usage("no methods given".into()));
    }
    names
        .iter()
        .map(|n| n.parse().map_err(|_| CliError::Usage(format!("unknown method {n:?}"))))
        .collect()
}

fn parse_budget(s: &str) -> CliResult<Budget> {
    s.parse().map_err(|_| CliError::Usage(format!("bad budget {s:?}: expected a token count or a percentage")))
}

fn split_list(raw: &Option<String>) -> Option<Vec<String>> {
    raw.as_ref().map(|s| s.split(',').map(|x| x.trim().to_string()).filter(|x| !x.is_empty()).collect())
}

fn split_ints(key: &str, raw: &Option<String>) -> CliResult<Option<Vec<i64>>> {
    split_list(raw)
        .map(|items| {
            items
                .iter()
                .map(|x| x.parse().map_err(|_| CliError::Usage(format!("{key}: {x:?} is not an integer"))))
                .collect()
        })
        .transpose()
}

// ---- synth ----

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "trace.att1")]
    out: PathBuf,
}

pub fn synth(args: &SynthArgs) -> CliResult<()> {
    let mut o = args.config.overrides()?;
    o.put_int("rng_seed", args.seed)?;
    let cfg: SynthConfig = resolve(args.config.config.as_deref(), o)?;
    let trace = gen_trace(&cfg)?;
    let out = output_path(&args.out)?;
    let bytes = write_trace_file(&trace, &out)?;
    let mut m = RunManifest::new("synth", args.config.config.as_deref(), &cfg)?;
    m.rng_seed = Some(cfg.rng_seed);
    m.outputs.push(out.clone());
    m.write()?;
    println!("wrote {} ({bytes} bytes)", out.display());
    Ok(())
}

// ---- train ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub traces: Vec<PathBuf>,
    pub history: usize,
    pub block_size: usize,
    pub sample_ratio: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            traces: Vec::new(),
            history: 64,
            block_size: 16,
            sample_ratio: 0.03,
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            holdout_fraction: t.holdout_fraction,
            seed: 0,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Trace files; replaces `traces` from the config.
    traces: Vec<PathBuf>,
    #[arg(long)]
    history: Option<usize>,
    #[arg(long)]
    block_size: Option<usize>,
    #[arg(long)]
    sample_ratio: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint path; metrics go to `<stem>.metrics.csv` beside it.
    #[arg(long, default_value = "predictor.apw")]
    out: PathBuf,
}

pub fn train_cmd(args: &TrainArgs) -> CliResult<()> {
    let mut o = args.config.overrides()?;
    o.put_paths("traces", &args.traces);
    o.put_int("history", args.history)?;
    o.put_int("block_size", args.block_size)?;
    o.put_opt("sample_ratio", args.sample_ratio);
    o.put_int("epochs", args.epochs)?;
    o.put_int("seed", args.seed)?;
    let s: TrainSettings = resolve(args.config.config.as_deref(), o)?;
    let traces = load_traces(&s.traces)?;

    let mut samples = Vec::new();
    for (i, (_, trace)) in traces.iter().enumerate() {
        samples.extend(build_dataset(trace, s.history, s.block_size, s.sample_ratio, s.seed.wrapping_add(i as u64))?);
    }
    let cfg = TrainConfig {
        epochs: s.epochs,
        learning_rate: s.learning_rate,
        batch_size: s.batch_size,
        holdout_fraction: s.holdout_fraction,
        seed: s.seed,
        ..TrainConfig::default()
    };
    let outcome = train(&samples, &cfg)?;

    let out = output_path(&args.out)?;
    outcome.weights.save(&out)?;
    let metrics = out.with_extension("metrics.csv");
    write_metrics_csv(&outcome.metrics, create(&metrics)?)?;
    let mut m = RunManifest::new("train", args.config.config.as_deref(), &s)?;
    m.rng_seed = Some(s.seed);
    m.inputs = s.traces.clone();
    m.outputs = vec![out.clone(), metrics];
    m.write()?;
    let best = &outcome.metrics[outcome.best_epoch - 1];
    println!(
        "{} samples from {} traces; kept epoch {} (holdout accuracy {:.2}); wrote {}",
        samples.len(),
        traces.len(),
        outcome.best_epoch,
        best.holdout_accuracy,
        out.display()
    );
    Ok(())
}

// ---- eval and sweep ----

/// Accepts `key = 16` as well as `key = [8, 16]`.
fn one_or_many<'de, D, T>(d: D) -> Result<Vec<T>, D::Error>
where
    D: serde::Deserializer<'de>,
    T: Deserialize<'de>,
{
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany<T> {
        One(T),
        Many(Vec<T>),
    }
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(v) => vec![v],
        OneOrMany::Many(v) => v,
    })
}

/// Selector and baseline settings shared by `eval` and `sweep`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub traces: Vec<PathBuf>,
    pub weights: Option<PathBuf>,
    pub methods: Vec<String>,
    #[serde(deserialize_with = "one_or_many")]
    pub budget: Vec<String>,
    #[serde(deserialize_with = "one_or_many")]
    pub history: Vec<usize>,
    #[serde(deserialize_with = "one_or_many")]
    pub calibration_period: Vec<usize>,
    #[serde(deserialize_with = "one_or_many")]
    pub block_size: Vec<usize>,
    pub sink_tokens: usize,
    pub local_tokens: usize,
    pub update_interval: usize,
    pub window: usize,
    pub skip_layers: u32,
}

impl Default for EvalSettings {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self {
            traces: Vec::new(),
            weights: None,
            methods: ["attnpredictor", "prev_token", "h2o_plus", "snap_kv", "quest", "streaming_llm", "oracle"]
                .map(String::from)
                .to_vec(),
            budget: vec!["10%".into()],
            history: vec![e.selector.history],
            calibration_period: vec![e.selector.calibration_period],
            block_size: vec![e.selector.block_size],
            sink_tokens: e.selector.sink_tokens,
            local_tokens: e.selector.local_tokens,
            update_interval: e.selector.update_interval,
            window: e.window,
            skip_layers: e.skip_layers,
        }
    }
}

impl EvalSettings {
    fn base_config(&self) -> EvalConfig {
        let d = EvalConfig::default();
        EvalConfig {
            selector: SelectorConfig {
                sink_tokens: self.sink_tokens,
                local_tokens: self.local_tokens,
                update_interval: self.update_interval,
                ..d.selector
            },
            window: self.window,
            skip_layers: self.skip_layers,
            ..d
        }
    }

    fn grid(&self) -> CliResult<SweepGrid> {
        Ok(SweepGrid {
            history: self.history.clone(),
            calibration_period: self.calibration_period.clone(),
            block_size: self.block_size.clone(),
            budget: self.budget.iter().map(|b| parse_budget(b)).collect::<CliResult<_>>()?,
        })
    }

    /// Methods and weights, checked before any trace is read.
    fn methods_and_weights(&self) -> CliResult<(Vec<Method>, Option<PredictorWeights>)> {
        let methods = parse_methods(&self.methods)?;
        let needs_weights = methods.contains(&Method::AttnPredictor);
        let weights = match (&self.weights, needs_weights) {
            (None, true) => {
                return Err(CliError::Usage("method attnpredictor needs --weights".into()));
            }
            (Some(p), true) => Some(load_weights(p)?),
            (_, false) => None,
        };
        Ok((methods, weights))
    }
}

#[derive(Debug, Args)]
pub struct EvalFlags {
    #[command(flatten)]
    config: ConfigArgs,
    /// Trace files; replaces `traces` from the config.
    traces: Vec<PathBuf>,
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Comma-separated method names.
    #[arg(long)]
    methods: Option<String>,
}

impl EvalFlags {
    fn overrides(&self) -> CliResult<Overrides> {
        let mut o = self.config.overrides()?;
        o.put_paths("traces", &self.traces);
        o.put_opt("weights", self.weights.as_ref().map(|p| p.display().to_string()));
        o.put_opt("methods", split_list(&self.methods));
        Ok(o)
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    flags: EvalFlags,
    /// Token count such as `256` or share of the context such as `10%`.
    #[arg(long)]
    budget: Option<String>,
    #[arg(long)]
    history: Option<usize>,
    #[arg(long)]
    calibration_period: Option<usize>,
    #[arg(long)]
    block_size: Option<usize>,
    #[arg(long, default_value = "eval.csv")]
    out: PathBuf,
}

pub fn eval(args: &EvalArgs) -> CliResult<()> {
    let mut o = args.flags.overrides()?;
    o.put_opt("budget", args.budget.clone().map(|b| vec![b]));
    for (key, v) in [
        ("history", args.history),
        ("calibration_period", args.calibration_period),
        ("block_size", args.block_size),
    ] {
        o.put_opt(key, v.map(|v| vec![v as i64]));
    }
    let s: EvalSettings = resolve(args.flags.config.config.as_deref(), o)?;
    let grid = s.grid()?;
    if grid.len() != 1 {
        return Err(CliError::Usage("eval takes one value per setting; use sweep for grids".into()));
    }
    let (methods, weights) = s.methods_and_weights()?;
    let traces = load_traces(&s.traces)?;

    let config = EvalConfig {
        selector: SelectorConfig {
            history: grid.history[0],
            calibration_period: grid.calibration_period[0],
            block_size: grid.block_size[0],
            ..s.base_config().selector
        },
        budget: grid.budget[0],
        ..s.base_config()
    };
    let mut rows = Vec::new();
    for (id, trace) in &traces {
        for &method in &methods {
            let report = evaluate(trace, id, method, &config, weights.as_ref())
                .map_err(CliError::context(format!("{id} / {method}")))?;
            println!("{id:<24} {:<14} {:>7.2}", method.name(), report.accuracy_pct);
            rows.push(SweepRow {
                trace: id.clone(),
                method,
                history: config.selector.history,
                calibration_period: config.selector.calibration_period,
                block_size: config.selector.block_size,
                budget: config.budget,
                accuracy_pct: report.accuracy_pct,
                error: None,
            });
        }
    }
    let out = output_path(&args.out)?;
    write_rows_csv(&rows, create(&out)?)?;
    let mut m = RunManifest::new("eval", args.flags.config.config.as_deref(), &s)?;
    m.inputs = s.traces.iter().chain(&s.weights).cloned().collect();
    m.outputs.push(out);
    m.write()?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    flags: EvalFlags,
    /// Comma-separated budgets, e.g. `5%,10%,256`.
    #[arg(long)]
    budget: Option<String>,
    /// Comma-separated history lengths.
    #[arg(long)]
    history: Option<String>,
    #[arg(long)]
    calibration_period: Option<String>,
    #[arg(long)]
    block_size: Option<String>,
    #[arg(long, default_value = "sweep.csv")]
    out: PathBuf,
}

pub fn sweep_cmd(args: &SweepArgs) -> CliResult<()> {
    let mut o = args.flags.overrides()?;
    o.put_opt("budget", split_list(&args.budget));
    for (key, v) in [
        ("history", &args.history),
        ("calibration_period", &args.calibration_period),
        ("block_size", &args.block_size),
    ] {
        o.put_opt(key, split_ints(key, v)?);
    }
    let s: EvalSettings = resolve(args.flags.config.config.as_deref(), o)?;
    let grid = s.grid()?;
    if grid.is_empty() {
        return Err(CliError::Usage("sweep grid is empty".into()));
    }
    let (methods, weights) = s.methods_and_weights()?;
    let traces = load_traces(&s.traces)?;
    let shared = match &weights {
        Some(w) => SweepWeights::Shared(w),
        None => SweepWeights::None,
    };
    let rows = sweep(&traces, &grid, &methods, &s.base_config(), shared)?;

    let out = output_path(&args.out)?;
    write_rows_csv(&rows, create(&out)?)?;
    let mut m = RunManifest::new("sweep", args.flags.config.config.as_deref(), &s)?;
    m.inputs = s.traces.iter().chain(&s.weights).cloned().collect();
    m.outputs.push(out.clone());
    m.write()?;
    let failed: Vec<&SweepRow> = rows.iter().filter(|r| r.error.is_some()).collect();
    for r in &failed {
        eprintln!(
            "failed cell {} / {} H={} M={} b={} B={}: {}",
            r.trace,
            r.method,
            r.history,
            r.calibration_period,
            r.block_size,
            r.budget,
            r.error.as_deref().unwrap_or_default()
        );
    }
    println!("{} cells written to {}", rows.len(), out.display());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Partial {
            failed: failed.len(),
            total: rows.len(),
            what: "sweep cells",
        })
    }
}

// ---- sim ----

#[derive(Debug, Args)]
pub struct SimArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Tokens kept resident per layer.
    #[arg(long)]
    budget: Option<usize>,
    /// Comma-separated context lengths.
    #[arg(long)]
    context_lengths: Option<String>,
    /// Report path; the plot data goes to `<stem>.plot.csv` beside it.
    #[arg(long, default_value = "sim.csv")]
    out: PathBuf,
}

pub fn sim(args: &SimArgs) -> CliResult<()> {
    let mut o = args.config.overrides()?;
    o.put_int("budget", args.budget)?;
    o.put_opt("context_lengths", split_ints("context_lengths", &args.context_lengths)?);
    let cfg: SimConfig = resolve(args.config.config.as_deref(), o)?;
    let report = simulate(&cfg)?;

    let out = output_path(&args.out)?;
    write_report_csv(&report, create(&out)?)?;
    let plot = out.with_extension("plot.csv");
    write_plot_csv(&report, create(&plot)?)?;
    let mut m = RunManifest::new("sim", args.config.config.as_deref(), &cfg)?;
    m.outputs = vec![out, plot];
    m.write()?;
    println!("{:>8} {:>9} {:>9} {:>9} {:>12} {:>8}", "context", "predict", "transfer", "wait", "cross_token", "speedup");
    for r in &report.rows {
        println!(
            "{:>8} {:>9.3} {:>9.3} {:>9.3} {:>12.3} {:>7.2}x",
            r.context_len, r.predict_ms, r.transfer_ms, r.wait_ms, r.cross_token_ms, r.speedup
        );
    }
    Ok(())
}

// ---- import ----

#[derive(Debug, Args)]
pub struct ImportArgs {
    /// `.att1` files produced elsewhere.
    #[arg(required = true)]
    traces: Vec<PathBuf>,
    /// JSON summary with one entry per file.
    #[arg(long, default_value = "import.json")]
    out: PathBuf,
}

#[derive(Debug, Serialize)]
struct ImportEntry {
    path: PathBuf,
    valid: bool,
    error: Option<String>,
    num_layers: Option<u32>,
    num_heads: Option<u32>,
    prefill_len: Option<u32>,
    num_decode_steps: Option<u32>,
    head_dim: Option<u32>,
}

fn check_import(path: &Path) -> ImportEntry {
    let mut entry = ImportEntry {
        path: path.to_path_buf(),
        valid: false,
        error: None,
        num_layers: None,
        num_heads: None,
        prefill_len: None,
        num_decode_steps: None,
        head_dim: None,
    };
    // reading checks the layout and every row's values
    match read_trace_file(path) {
        Ok(t) => {
            let h = t.header();
            entry.valid = true;
            entry.num_layers = Some(h.num_layers);
            entry.num_heads = Some(h.num_heads);
            entry.prefill_len = Some(h.prefill_len);
            entry.num_decode_steps = Some(h.num_decode_steps);
            entry.head_dim = h.has_qk.then_some(h.head_dim);
        }
        Err(e) => entry.error = Some(e.to_string()),
    }
    entry
}

pub fn import(args: &ImportArgs) -> CliResult<()> {
    let entries: Vec<ImportEntry> = args.traces.iter().map(|p| check_import(p)).collect();
    for e in &entries {
        match &e.error {
            None => println!("ok      {}", e.path.display()),
            Some(err) => println!("invalid {}: {err}", e.path.display()),
        }
    }
    let out = output_path(&args.out)?;
    let text = serde_json::to_string_pretty(&entries)?;
    std::fs::write(&out, text + "\n").map_err(attnpred::Error::from)?;
    let mut m = RunManifest::new("import", None, &serde_json::Value::Null)?;
    m.inputs = args.traces.clone();
    m.outputs.push(out);
    m.write()?;
    let failed = entries.iter().filter(|e| !e.valid).count();
    if failed == 0 {
        Ok(())
    } else {
        Err(CliError::Partial {
            failed,
            total: entries.len(),
            what: "trace files",
        })
    }
}
