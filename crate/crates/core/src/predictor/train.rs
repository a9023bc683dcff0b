use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::cnn::{accumulate_gradient, forward};
use super::{PredictorWeights, TrainSample, PARAM_COUNT};
use crate::error::{Error, Result};
use crate::selector::topk;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Fraction of samples held out for checkpoint selection.
    pub holdout_fraction: f64,
    /// Share of blocks kept when scoring held-out recovery.
    pub holdout_topk_ratio: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 1e-3,
            batch_size: 32,
            holdout_fraction: 0.1,
            holdout_topk_ratio: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean per-sample loss over the epoch's minibatches.
    pub train_mse: f64,
    /// Percent of the oracle block recovery reached on the held-out split.
    pub holdout_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: PredictorWeights,
    pub metrics: Vec<EpochMetrics>,
    pub best_epoch: usize,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(lr: f64) -> Self {
        Self {
            m: vec![0.0; PARAM_COUNT],
            v: vec![0.0; PARAM_COUNT],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + Self::EPS);
        }
    }
}

/// Block-level recovery of the predicted top blocks relative to the best possible choice.
fn block_accuracy(prediction: &[f64], target: &[f64], ratio: f64) -> Option<f64> {
    let k = ((ratio * target.len() as f64).ceil() as usize).clamp(1, target.len());
    let best: f64 = topk(target, k).ok()?.iter().map(|&i| target[i]).sum();
    if best <= 0.0 {
        return None;
    }
    let got: f64 = topk(prediction, k).ok()?.iter().map(|&i| target[i]).sum();
    Some(got / best)
}

fn holdout_accuracy(weights: &PredictorWeights, samples: &[&TrainSample], ratio: f64) -> Result<f64> {
    let mut acc = 0.0;
    let mut scored = 0usize;
    for s in samples {
        let pred = forward(weights, &s.input)?;
        if let Some(a) = block_accuracy(&pred, &s.target, ratio) {
            acc += a;
            scored += 1;
        }
    }
    Ok(if scored > 0 { 100.0 * acc / scored as f64 } else { 0.0 })
}

/// Minibatch Adam on the MSE loss; returns the epoch checkpoint with the best
/// held-out accuracy (earliest on ties).
pub fn train(samples: &[TrainSample], config: &TrainConfig) -> Result<TrainOutcome> {
    if samples.is_empty() {
        return Err(Error::Parameter("no training samples".into()));
    }
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(Error::Parameter("epochs and batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let n_holdout = if samples.len() >= 2 {
        ((config.holdout_fraction * samples.len() as f64).round() as usize).min(samples.len() - 1)
    } else {
        0
    };
    let (holdout_idx, train_idx) = order.split_at(n_holdout);
    let mut train_idx = train_idx.to_vec();
    // with no held-out split, select on the training samples instead
    let selection_idx = if holdout_idx.is_empty() { &train_idx[..] } else { holdout_idx };
    let selection_set: Vec<&TrainSample> = selection_idx.iter().map(|&i| &samples[i]).collect();

    let mut weights = PredictorWeights::init(config.seed);
    let mut adam = Adam::new(config.learning_rate);
    let mut grad = vec![0.0; PARAM_COUNT];
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, PredictorWeights)> = None;

    for epoch in 1..=config.epochs {
        train_idx.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in train_idx.chunks(config.batch_size) {
            grad.fill(0.0);
            for &i in batch {
                let s = &samples[i];
                let loss = accumulate_gradient(&weights, &s.input, &s.target, &mut grad)?;
                if !loss.is_finite() {
                    return Err(Error::Training {
                        epoch,
                        reason: "non-finite loss".into(),
                    });
                }
                epoch_loss += loss;
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            adam.step(weights.params_mut(), &grad);
            if weights.check_finite().is_err() {
                return Err(Error::Training {
                    epoch,
                    reason: "non-finite weights after update".into(),
                });
            }
        }
        let train_mse = epoch_loss / train_idx.len() as f64;
        let holdout_accuracy = holdout_accuracy(&weights, &selection_set, config.holdout_topk_ratio)?;
        metrics.push(EpochMetrics {
            epoch,
            train_mse,
            holdout_accuracy,
        });
        if best.as_ref().is_none_or(|(acc, _, _)| holdout_accuracy > *acc) {
            best = Some((holdout_accuracy, epoch, weights.clone()));
        }
    }
    let (_, best_epoch, weights) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        weights,
        metrics,
        best_epoch,
    })
}

/// CSV with header `epoch,train_mse,holdout_accuracy`.
pub fn write_metrics_csv<W: Write>(metrics: &[EpochMetrics], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["epoch", "train_mse", "holdout_accuracy"])?;
    for m in metrics {
        w.write_record([
            m.epoch.to_string(),
            format!("{:.9e}", m.train_mse),
            format!("{:.4}", m.holdout_accuracy),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::AttentionHistory;

    fn constant_samples(n: usize) -> Vec<TrainSample> {
        (0..n)
            .map(|i| {
                let w = 4 + i % 5;
                let grid = (0..3 * w).map(|j| ((i * 7 + j) % 11) as f64 / 11.0).collect();
                TrainSample {
                    input: AttentionHistory::from_grid(grid, 3, w).unwrap(),
                    target: vec![0.25; w],
                }
            })
            .collect()
    }

    #[test]
    fn learns_constant_target() {
        let samples = constant_samples(1280);
        let cfg = TrainConfig {
            epochs: 30,
            ..TrainConfig::default()
        };
        let out = train(&samples, &cfg).unwrap();
        assert_eq!(out.metrics.len(), 30);
        let last = out.metrics.last().unwrap();
        assert!(last.train_mse < 1e-6, "mse {}", last.train_mse);
        assert!(last.train_mse < out.metrics[0].train_mse);
    }

    #[test]
    fn training_is_deterministic() {
        let samples = constant_samples(12);
        let cfg = TrainConfig {
            epochs: 3,
            seed: 4,
            ..TrainConfig::default()
        };
        let a = train(&samples, &cfg).unwrap();
        let b = train(&samples, &cfg).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.metrics, b.metrics);
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(train(&[], &TrainConfig::default()).is_err());
    }

    #[test]
    fn metrics_csv_has_one_row_per_epoch() {
        let metrics = vec![
            EpochMetrics { epoch: 1, train_mse: 0.5, holdout_accuracy: 80.0 },
            EpochMetrics { epoch: 2, train_mse: 0.25, holdout_accuracy: 90.0 },
        ];
        let mut buf = Vec::new();
        write_metrics_csv(&metrics, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "epoch,train_mse,holdout_accuracy");
        assert_eq!(lines.len(), 3);
    }
}
