use proptest::prelude::*;

use attnpred::compress::num_blocks;
use attnpred::predictor::{
    backward, build_dataset, candidate_count, forward, train, AttentionHistory, PredictorWeights, TrainConfig,
};
use attnpred::synth::{gen_trace, SynthConfig};

/// Direct nested-loop evaluation of the network, pooling per timestep first.
fn loop_forward(w: &PredictorWeights, x: &AttentionHistory) -> Vec<f64> {
    let (h, wd) = (x.steps(), x.width());
    let at = |plane: &[f64], r: isize, c: isize| {
        if r < 0 || c < 0 || r >= h as isize || c >= wd as isize {
            0.0
        } else {
            plane[r as usize * wd + c as usize]
        }
    };
    let a: Vec<Vec<f64>> = (0..16)
        .map(|o| {
            let k = &w.conv_a_weight()[o * 9..o * 9 + 9];
            let mut out = vec![0.0; h * wd];
            for r in 0..h {
                for c in 0..wd {
                    let mut z = w.conv_a_bias()[o];
                    for kr in 0..3 {
                        for kc in 0..3 {
                            z += k[kr * 3 + kc] * at(x.grid(), r as isize + kr as isize - 1, c as isize + kc as isize - 1);
                        }
                    }
                    out[r * wd + c] = z.max(0.0);
                }
            }
            out
        })
        .collect();
    let mut pooled = vec![vec![0.0; wd]; 32];
    for (o, p) in pooled.iter_mut().enumerate() {
        for r in 0..h {
            let mut step_map = vec![0.0; wd];
            for (c, v) in step_map.iter_mut().enumerate() {
                let mut z = w.conv_b_bias()[o];
                for (i, plane) in a.iter().enumerate() {
                    let k = &w.conv_b_weight()[(o * 16 + i) * 9..(o * 16 + i) * 9 + 9];
                    for kr in 0..3 {
                        for kc in 0..3 {
                            z += k[kr * 3 + kc] * at(plane, r as isize + kr as isize - 1, c as isize + kc as isize - 1);
                        }
                    }
                }
                *v = z.max(0.0);
            }
            for c in 0..wd {
                p[c] += step_map[c] / h as f64;
            }
        }
    }
    (0..wd)
        .map(|c| w.out_bias() + (0..32).map(|o| w.out_weight()[o] * pooled[o][c]).sum::<f64>())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn forward_matches_loop_oracle(
        h in 1usize..6,
        w in 1usize..20,
        seed in any::<u64>(),
        grid_seed in prop::collection::vec(0.0f64..1.0, 120),
    ) {
        let weights = PredictorWeights::init(seed);
        let grid: Vec<f64> = (0..h * w).map(|i| grid_seed[i % grid_seed.len()] * (1.0 + i as f64 * 0.01)).collect();
        let x = AttentionHistory::from_grid(grid, h, w).unwrap();
        let fast = forward(&weights, &x).unwrap();
        let slow = loop_forward(&weights, &x);
        prop_assert_eq!(fast.len(), w);
        for (a, b) in fast.iter().zip(&slow) {
            prop_assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()), "{} vs {}", a, b);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_f32_exact(seed in any::<u64>()) {
        let w = PredictorWeights::init(seed);
        let mut buf = Vec::new();
        w.write_checkpoint(&mut buf).unwrap();
        prop_assert_eq!(buf.len(), 4 + 4 * 4833);
        prop_assert_eq!(&buf[..4], b"APW1");
        let back = PredictorWeights::read_checkpoint(buf.as_slice()).unwrap();
        prop_assert_eq!(back, w.quantized());
    }
}

#[test]
fn same_weights_serve_any_width_and_history() {
    let w = PredictorWeights::init(3);
    for (h, wd) in [(1, 1), (4, 10), (64, 100), (8, 1000)] {
        let x = AttentionHistory::from_grid(vec![0.1; h * wd], h, wd).unwrap();
        assert_eq!(forward(&w, &x).unwrap().len(), wd);
    }
}

#[test]
fn output_gradient_is_linear_in_residual() {
    let w = PredictorWeights::init(8);
    let x = AttentionHistory::from_grid((0..24).map(|i| (i % 5) as f64 / 5.0).collect(), 3, 8).unwrap();
    let pred = forward(&w, &x).unwrap();
    let near: Vec<f64> = pred.iter().map(|p| p - 0.1).collect();
    let far: Vec<f64> = pred.iter().map(|p| p - 0.2).collect();
    let (_, g1) = backward(&w, &x, &near).unwrap();
    let (_, g2) = backward(&w, &x, &far).unwrap();
    let last = g1.len() - 1;
    assert!((g2[last] - 2.0 * g1[last]).abs() < 1e-12);
}

fn small_trace(seed: u64) -> attnpred::trace::AttentionTrace {
    gen_trace(&SynthConfig {
        num_layers: 1,
        num_heads: 2,
        prefill_len: 48,
        decode_steps: 40,
        history_rows: 8,
        logit_scale: 12.0,
        reaccess_positions: [3, 20].into(),
        rng_seed: seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

#[test]
fn dataset_targets_come_from_decode_rows_only() {
    let t = small_trace(1);
    let all = build_dataset(&t, 4, 4, 1.0, 0).unwrap();
    assert_eq!(all.len(), candidate_count(&t));
    assert_eq!(all.len(), 2 * 39);
    let prefill = t.header().prefill_len as usize;
    let mut widths: Vec<usize> = all.iter().map(|s| s.target.len()).collect();
    widths.sort_unstable();
    // the target for decode step t + 1 covers its first prefill + t positions, t >= 1
    assert_eq!(widths[0], num_blocks(prefill + 1, 4));
    assert!(all.iter().all(|s| s.input.steps() == 4 && s.input.width() == s.target.len()));
    let some = build_dataset(&t, 4, 4, 0.25, 0).unwrap();
    assert_eq!(some.len(), (0.25 * all.len() as f64).round() as usize);
}

#[test]
fn training_loss_mostly_decreases() {
    let samples: Vec<_> = (0..3)
        .flat_map(|s| build_dataset(&small_trace(s), 4, 4, 1.0, s).unwrap())
        .collect();
    let out = train(&samples, &TrainConfig::default()).unwrap();
    let m = &out.metrics;
    let down = m.windows(2).filter(|p| p[1].train_mse <= p[0].train_mse).count();
    assert!(down as f64 >= 0.9 * (m.len() - 1) as f64, "{down} of {} epochs decreased", m.len() - 1);
    assert!(m[out.best_epoch - 1].holdout_accuracy >= m.iter().map(|e| e.holdout_accuracy).fold(0.0, f64::max));
}
