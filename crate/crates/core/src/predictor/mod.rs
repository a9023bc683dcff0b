//! The spatiotemporal attention predictor.
//!
//! A small CNN maps an `H x W` history of block-compressed attention rows to
//! a length-`W` estimate of the next row:
//!
//! 1. 3x3 convolution, padding 1, 1 -> 16 channels, ReLU
//! 2. 3x3 convolution, padding 1, 16 -> 32 channels, ReLU
//! 3. mean over the history axis
//! 4. kernel-1 convolution along the width, 32 -> 1 channel
//!
//! Nothing depends on `W`, so one weight set serves every context length and
//! every `(layer, head)`.

mod cnn;
mod dataset;
mod train;

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use cnn::{backward, forward, mse_loss, Gradient};
pub use dataset::{build_dataset, candidate_count, TrainSample};
pub use train::{train, write_metrics_csv, EpochMetrics, TrainConfig, TrainOutcome};

pub const CONV_A_CHANNELS: usize = 16;
pub const CONV_B_CHANNELS: usize = 32;
pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

pub(crate) const CONV_A_W: usize = 0;
pub(crate) const CONV_A_B: usize = CONV_A_W + CONV_A_CHANNELS * TAPS;
pub(crate) const CONV_B_W: usize = CONV_A_B + CONV_A_CHANNELS;
pub(crate) const CONV_B_B: usize = CONV_B_W + CONV_B_CHANNELS * CONV_A_CHANNELS * TAPS;
pub(crate) const OUT_W: usize = CONV_B_B + CONV_B_CHANNELS;
pub(crate) const OUT_B: usize = OUT_W + CONV_B_CHANNELS;
/// 16*(9+1) + 32*(16*9+1) + (32+1)
pub const PARAM_COUNT: usize = OUT_B + 1;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"APW1";

/// CNN parameters, flat in declaration order:
/// conv_a weight `[16][1][3][3]`, conv_a bias, conv_b weight `[32][16][3][3]`,
/// conv_b bias, output weight `[1][32][1]`, output bias.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorWeights {
    params: Vec<f64>,
}

impl PredictorWeights {
    pub fn zeros() -> Self {
        Self {
            params: vec![0.0; PARAM_COUNT],
        }
    }

    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialization per layer.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; PARAM_COUNT];
        let layers = [
            (CONV_A_W..CONV_B_W, TAPS),
            (CONV_B_W..OUT_W, CONV_A_CHANNELS * TAPS),
            (OUT_W..PARAM_COUNT, CONV_B_CHANNELS),
        ];
        for (range, fan_in) in layers {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for p in &mut params[range] {
                *p = rng.random_range(-bound..bound);
            }
        }
        Self { params }
    }

    pub fn from_params(params: Vec<f64>) -> Result<Self> {
        if params.len() != PARAM_COUNT {
            return Err(Error::Dimension(format!(
                "expected {PARAM_COUNT} parameters, got {}",
                params.len()
            )));
        }
        let w = Self { params };
        w.check_finite()?;
        Ok(w)
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.params.iter().all(|p| p.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric("non-finite predictor weight".into()))
        }
    }

    pub fn conv_a_weight(&self) -> &[f64] {
        &self.params[CONV_A_W..CONV_A_B]
    }
    pub fn conv_a_bias(&self) -> &[f64] {
        &self.params[CONV_A_B..CONV_B_W]
    }
    pub fn conv_b_weight(&self) -> &[f64] {
        &self.params[CONV_B_W..CONV_B_B]
    }
    pub fn conv_b_bias(&self) -> &[f64] {
        &self.params[CONV_B_B..OUT_W]
    }
    pub fn out_weight(&self) -> &[f64] {
        &self.params[OUT_W..OUT_B]
    }
    pub fn out_bias(&self) -> f64 {
        self.params[OUT_B]
    }

    /// Writes `APW1` followed by every parameter as a little-endian f32.
    pub fn write_checkpoint<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = BufWriter::new(sink);
        w.write_all(&CHECKPOINT_MAGIC)?;
        for p in &self.params {
            w.write_all(&(*p as f32).to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(source: R) -> Result<Self> {
        let mut r = BufReader::new(source);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("checkpoint shorter than its magic".into()))?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic, expected \"APW1\"".into()));
        }
        let mut params = Vec::with_capacity(PARAM_COUNT);
        let mut buf = [0u8; 4];
        for i in 0..PARAM_COUNT {
            r.read_exact(&mut buf).map_err(|_| {
                Error::CorruptSection(format!("checkpoint truncated at parameter {i}"))
            })?;
            params.push(f32::from_le_bytes(buf) as f64);
        }
        if r.read(&mut buf)? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Self::from_params(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_checkpoint(std::fs::File::create(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_checkpoint(std::fs::File::open(path)?)
    }

    /// Rounds every parameter through f32, matching a checkpoint round trip.
    pub fn quantized(&self) -> Self {
        Self {
            params: self.params.iter().map(|&p| p as f32 as f64).collect(),
        }
    }
}

/// `H x W` grid of compressed rows, oldest first, each zero-padded to width `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHistory {
    grid: Vec<f64>,
    steps: usize,
    width: usize,
}

impl AttentionHistory {
    pub fn zeros(steps: usize, width: usize) -> Self {
        Self {
            grid: vec![0.0; steps * width],
            steps,
            width,
        }
    }

    /// Stacks the given rows under `steps - rows.len()` zero rows.
    ///
    /// Rows longer than `width` are rejected; shorter rows are zero-padded at the end.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R], steps: usize, width: usize) -> Result<Self> {
        if rows.len() > steps {
            return Err(Error::Dimension(format!(
                "{} rows do not fit a history of {steps}",
                rows.len()
            )));
        }
        let mut h = Self::zeros(steps, width);
        let skip = steps - rows.len();
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() > width {
                return Err(Error::Dimension(format!(
                    "history row of width {} exceeds grid width {width}",
                    row.len()
                )));
            }
            let dst = &mut h.grid[(skip + i) * width..(skip + i) * width + row.len()];
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = v as f64;
            }
        }
        Ok(h)
    }

    pub fn from_grid(grid: Vec<f64>, steps: usize, width: usize) -> Result<Self> {
        if grid.len() != steps * width {
            return Err(Error::Dimension(format!(
                "grid of {} values is not {steps} x {width}",
                grid.len()
            )));
        }
        Ok(Self { grid, steps, width })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn row(&self, h: usize) -> &[f64] {
        &self.grid[h * self.width..(h + 1) * self.width]
    }
}
