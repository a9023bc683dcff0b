use super::{
    AttentionHistory, PredictorWeights, CONV_A_B, CONV_A_CHANNELS, CONV_A_W, CONV_B_B,
    CONV_B_CHANNELS, CONV_B_W, KERNEL, OUT_B, OUT_W, PARAM_COUNT, TAPS,
};
use crate::error::{Error, Result};

/// Gradient of the loss with respect to every parameter, same layout as the weights.
pub type Gradient = Vec<f64>;

/// Plane geometry. Unpadded planes are stored with the padded row stride
/// `w + 2`, so every 3x3 tap is one contiguous pass over `span` values; the
/// two extra columns per row are kept at zero or ignored.
#[derive(Clone, Copy)]
struct Geometry {
    h: usize,
    w: usize,
    /// row stride, `w + 2`
    pw: usize,
    /// `h * pw`
    span: usize,
    /// `(h + 2) * pw + 2`; padded planes have a zero border
    pplane: usize,
}

impl Geometry {
    fn new(h: usize, w: usize) -> Self {
        let pw = w + 2;
        Self {
            h,
            w,
            pw,
            span: h * pw,
            pplane: (h + 2) * pw + 2,
        }
    }

    fn tap(&self, kh: usize, kw: usize) -> usize {
        kh * self.pw + kw
    }

    /// 1.0 on real columns, 0.0 on the stride padding.
    fn mask(&self) -> Vec<f64> {
        (0..self.span)
            .map(|i| if i % self.pw < self.w { 1.0 } else { 0.0 })
            .collect()
    }
}

/// Intermediate tensors kept for the backward pass.
struct Activations {
    x_pad: Vec<f64>,
    /// conv_a pre-activations, `[16][span]`
    z1: Vec<f64>,
    /// ReLU(z1) unrolled into 3x3 patches, `[16 * 9][span]`
    cols: Vec<f64>,
    /// conv_b pre-activations, `[32][span]`
    z2: Vec<f64>,
    /// mean over H of ReLU(z2), `[32][W]`
    pooled: Vec<f64>,
    out: Vec<f64>,
}

fn check_input(weights: &PredictorWeights, history: &AttentionHistory) -> Result<()> {
    if history.steps() == 0 || history.width() == 0 {
        return Err(Error::Dimension("history must be at least 1 x 1".into()));
    }
    weights.check_finite()?;
    if history.grid().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite value in attention history".into()));
    }
    Ok(())
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    acc[0] + acc[1] + acc[2] + acc[3] + tail
}

#[inline]
fn axpy(dst: &mut [f64], k: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += k * s;
    }
}

/// Accumulates a 3x3 correlation of one padded plane into one strided plane.
#[inline]
fn correlate_add(out: &mut [f64], src_pad: &[f64], kernel: &[f64], g: Geometry) {
    for kh in 0..KERNEL {
        for kw in 0..KERNEL {
            let k = kernel[kh * KERNEL + kw];
            let off = g.tap(kh, kw);
            axpy(out, k, &src_pad[off..off + g.span]);
        }
    }
}

const IM2COL_ROWS: usize = CONV_A_CHANNELS * TAPS;

/// Row `ci * 9 + t` holds padded plane `ci` shifted by tap `t`.
fn im2col(a_pad: &[f64], g: Geometry) -> Vec<f64> {
    let mut cols = vec![0.0; IM2COL_ROWS * g.span];
    for ci in 0..CONV_A_CHANNELS {
        let src = &a_pad[ci * g.pplane..(ci + 1) * g.pplane];
        for t in 0..TAPS {
            let off = g.tap(t / KERNEL, t % KERNEL);
            let row = (ci * TAPS + t) * g.span;
            cols[row..row + g.span].copy_from_slice(&src[off..off + g.span]);
        }
    }
    cols
}

/// `c += a * b` for an `m x k` by `k x n` product. Operands are given as
/// `(slice, row_stride, col_stride)`; `c` is row-major with the given row stride.
fn gemm(
    (m, k, n): (usize, usize, usize),
    (a, rsa, csa): (&[f64], usize, usize),
    (b, rsb, csb): (&[f64], usize, usize),
    (c, rsc): (&mut [f64], usize),
) {
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() > (m - 1) * rsc + (n - 1));
    // SAFETY: the asserts above keep every strided access inside its slice,
    // and `c` is borrowed mutably so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

fn run_forward(weights: &PredictorWeights, history: &AttentionHistory) -> Activations {
    let g = Geometry::new(history.steps(), history.width());
    let (h, w, pw, span, pplane) = (g.h, g.w, g.pw, g.span, g.pplane);
    let p = weights.params();
    let mask = g.mask();

    let mut x_pad = vec![0.0; pplane];
    for r in 0..h {
        x_pad[(r + 1) * pw + 1..(r + 1) * pw + 1 + w].copy_from_slice(history.row(r));
    }

    let mut z1 = vec![0.0; CONV_A_CHANNELS * span];
    let mut a1_pad = vec![0.0; CONV_A_CHANNELS * pplane];
    for c in 0..CONV_A_CHANNELS {
        let z = &mut z1[c * span..(c + 1) * span];
        z.fill(p[CONV_A_B + c]);
        correlate_add(z, &x_pad, &p[CONV_A_W + c * TAPS..CONV_A_W + (c + 1) * TAPS], g);
        let a = &mut a1_pad[c * pplane + pw + 1..c * pplane + pw + 1 + span];
        for ((dst, &v), &m) in a.iter_mut().zip(z.iter()).zip(&mask) {
            *dst = v.max(0.0) * m;
        }
    }

    let cols = im2col(&a1_pad, g);
    let mut z2 = vec![0.0; CONV_B_CHANNELS * span];
    for co in 0..CONV_B_CHANNELS {
        z2[co * span..(co + 1) * span].fill(p[CONV_B_B + co]);
    }
    // z2 [32 x span] += W_b [32 x 144] * cols [144 x span]
    gemm(
        (CONV_B_CHANNELS, IM2COL_ROWS, span),
        (&p[CONV_B_W..CONV_B_B], IM2COL_ROWS, 1),
        (&cols, span, 1),
        (&mut z2, span),
    );
    let mut pooled = vec![0.0; CONV_B_CHANNELS * w];
    let inv_h = 1.0 / h as f64;
    for co in 0..CONV_B_CHANNELS {
        let z = &z2[co * span..(co + 1) * span];
        let pool = &mut pooled[co * w..(co + 1) * w];
        for r in 0..h {
            for (acc, &v) in pool.iter_mut().zip(&z[r * pw..r * pw + w]) {
                *acc += v.max(0.0);
            }
        }
        pool.iter_mut().for_each(|v| *v *= inv_h);
    }

    let mut out = vec![p[OUT_B]; w];
    for c in 0..CONV_B_CHANNELS {
        axpy(&mut out, p[OUT_W + c], &pooled[c * w..(c + 1) * w]);
    }

    Activations {
        x_pad,
        z1,
        cols,
        z2,
        pooled,
        out,
    }
}

/// Predicts the next compressed row; the output has the history's width.
pub fn forward(weights: &PredictorWeights, history: &AttentionHistory) -> Result<Vec<f64>> {
    check_input(weights, history)?;
    Ok(run_forward(weights, history).out)
}

pub fn mse_loss(prediction: &[f64], target: &[f64]) -> f64 {
    prediction
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / prediction.len() as f64
}

/// Gradient of `mean((forward - target)^2)`; returns `(loss, gradient)`.
pub fn backward(
    weights: &PredictorWeights,
    history: &AttentionHistory,
    target: &[f64],
) -> Result<(f64, Gradient)> {
    let mut grad = vec![0.0; PARAM_COUNT];
    let loss = accumulate_gradient(weights, history, target, &mut grad)?;
    Ok((loss, grad))
}

/// Adds this sample's gradient into `grad` and returns its loss.
pub(crate) fn accumulate_gradient(
    weights: &PredictorWeights,
    history: &AttentionHistory,
    target: &[f64],
    grad: &mut [f64],
) -> Result<f64> {
    check_input(weights, history)?;
    let g = Geometry::new(history.steps(), history.width());
    let (h, w, pw, span, pplane) = (g.h, g.w, g.pw, g.span, g.pplane);
    if target.len() != w {
        return Err(Error::Dimension(format!(
            "target length {} does not match history width {w}",
            target.len()
        )));
    }
    if target.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite target".into()));
    }
    let p = weights.params();
    let act = run_forward(weights, history);
    let loss = mse_loss(&act.out, target);

    let dy: Vec<f64> = act
        .out
        .iter()
        .zip(target)
        .map(|(o, t)| 2.0 * (o - t) / w as f64)
        .collect();
    grad[OUT_B] += dy.iter().sum::<f64>();
    for c in 0..CONV_B_CHANNELS {
        grad[OUT_W + c] += dot(&dy, &act.pooled[c * w..(c + 1) * w]);
    }

    let inv_h = 1.0 / h as f64;
    // stride padding columns stay zero
    let mut dz2 = vec![0.0; CONV_B_CHANNELS * span];
    for co in 0..CONV_B_CHANNELS {
        let scale = p[OUT_W + co] * inv_h;
        let z = &act.z2[co * span..(co + 1) * span];
        let d = &mut dz2[co * span..(co + 1) * span];
        for r in 0..h {
            let row = r * pw..r * pw + w;
            for ((dv, &zv), &gy) in d[row.clone()].iter_mut().zip(&z[row]).zip(&dy) {
                *dv = if zv > 0.0 { gy * scale } else { 0.0 };
            }
        }
        grad[CONV_B_B + co] += d.iter().sum::<f64>();
    }
    // dW_b [32 x 144] += dz2 [32 x span] * cols^T [span x 144]
    gemm(
        (CONV_B_CHANNELS, span, IM2COL_ROWS),
        (&dz2, span, 1),
        (&act.cols, 1, span),
        (&mut grad[CONV_B_W..CONV_B_B], IM2COL_ROWS),
    );
    // dcols [144 x span] = W_b^T [144 x 32] * dz2 [32 x span]
    let mut dcols = vec![0.0; IM2COL_ROWS * span];
    gemm(
        (IM2COL_ROWS, CONV_B_CHANNELS, span),
        (&p[CONV_B_W..CONV_B_B], 1, IM2COL_ROWS),
        (&dz2, span, 1),
        (&mut dcols, span),
    );
    let mut da1_pad = vec![0.0; CONV_A_CHANNELS * pplane];
    for ci in 0..CONV_A_CHANNELS {
        let dsrc = &mut da1_pad[ci * pplane..(ci + 1) * pplane];
        for t in 0..TAPS {
            let off = g.tap(t / KERNEL, t % KERNEL);
            let row = (ci * TAPS + t) * span;
            for (d, &v) in dsrc[off..off + span].iter_mut().zip(&dcols[row..row + span]) {
                *d += v;
            }
        }
    }

    let mask = g.mask();
    let mut dz1 = vec![0.0; span];
    for c in 0..CONV_A_CHANNELS {
        let z = &act.z1[c * span..(c + 1) * span];
        let da = &da1_pad[c * pplane + pw + 1..c * pplane + pw + 1 + span];
        for (((d, &zv), &gv), &m) in dz1.iter_mut().zip(z).zip(da).zip(&mask) {
            *d = if zv > 0.0 { gv * m } else { 0.0 };
        }
        grad[CONV_A_B + c] += dz1.iter().sum::<f64>();
        for kh in 0..KERNEL {
            for kw in 0..KERNEL {
                let off = g.tap(kh, kw);
                grad[CONV_A_W + c * TAPS + kh * KERNEL + kw] += dot(&dz1, &act.x_pad[off..off + span]);
            }
        }
    }
    Ok(loss)
}
