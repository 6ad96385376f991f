//! Per-channel batch normalization over a batch of `(c, h, w)` frames.
//!
//! Training mode normalizes with batch statistics (biased variance) and
//! the backward pass differentiates through them. Inference mode uses the
//! running statistics. All cross-frame reductions accumulate per-frame
//! partials in f64 and fold them in frame order, so results do not depend
//! on thread scheduling.

use ndarray::{Array1, Array3};
use rayon::prelude::*;

/// Variance floor inside the square root.
pub const EPSILON: f32 = 1e-3;
/// Running statistics decay: `running = MOMENTUM * running + (1 - MOMENTUM) * batch`.
pub const MOMENTUM: f32 = 0.99;

/// Batch statistics saved by the training forward pass for backward and
/// for the running-statistics update.
#[derive(Debug, Clone)]
pub struct TrainStats {
    pub mean: Array1<f32>,
    pub var: Array1<f32>,
    pub inv_std: Array1<f32>,
    /// Elements per channel: `batch * h * w`.
    pub count: usize,
}

/// Per-channel mean and biased variance over `batch x h x w`.
fn batch_mean_var(batch: &[Array3<f32>]) -> (Vec<f64>, Vec<f64>) {
    let channels = batch[0].dim().0;
    let partials: Vec<(Vec<f64>, Vec<f64>)> = batch
        .par_iter()
        .map(|frame| {
            let mut sums = vec![0.0f64; channels];
            let mut sq = vec![0.0f64; channels];
            let (c, h, w) = frame.dim();
            let data = frame.as_slice().expect("frame must be contiguous");
            for ch in 0..c {
                let plane = &data[ch * h * w..(ch + 1) * h * w];
                let mut s = 0.0f64;
                let mut s2 = 0.0f64;
                for &v in plane {
                    let v = v as f64;
                    s += v;
                    s2 += v * v;
                }
                sums[ch] = s;
                sq[ch] = s2;
            }
            (sums, sq)
        })
        .collect();

    let (c, h, w) = batch[0].dim();
    let count = (batch.len() * h * w) as f64;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for (sums, sq) in &partials {
        for ch in 0..c {
            mean[ch] += sums[ch];
            var[ch] += sq[ch];
        }
    }
    for ch in 0..c {
        mean[ch] /= count;
        var[ch] = (var[ch] / count - mean[ch] * mean[ch]).max(0.0);
    }
    (mean, var)
}

/// Normalizes the batch with its own statistics: `gamma * x_hat + beta`.
pub fn forward_train(
    batch: &[Array3<f32>],
    gamma: &Array1<f32>,
    beta: &Array1<f32>,
) -> (Vec<Array3<f32>>, TrainStats) {
    let (mean64, var64) = batch_mean_var(batch);
    let channels = batch[0].dim().0;
    let mean: Array1<f32> = mean64.iter().map(|&v| v as f32).collect();
    let var: Array1<f32> = var64.iter().map(|&v| v as f32).collect();
    let inv_std: Array1<f32> = var64
        .iter()
        .map(|&v| (1.0 / (v + EPSILON as f64).sqrt()) as f32)
        .collect();

    let out = batch
        .par_iter()
        .map(|frame| {
            let (c, h, w) = frame.dim();
            let mut y = Array3::<f32>::zeros((c, h, w));
            let src = frame.as_slice().unwrap();
            let dst = y.as_slice_mut().unwrap();
            for ch in 0..channels {
                let scale = gamma[ch] * inv_std[ch];
                let shift = beta[ch] - mean[ch] * scale;
                let base = ch * h * w;
                for i in 0..h * w {
                    dst[base + i] = src[base + i] * scale + shift;
                }
            }
            y
        })
        .collect();

    let (_, h, w) = batch[0].dim();
    let stats = TrainStats {
        mean,
        var,
        inv_std,
        count: batch.len() * h * w,
    };
    (out, stats)
}

/// Folds this batch's statistics into the running estimates.
pub fn update_running(
    running_mean: &mut Array1<f32>,
    running_var: &mut Array1<f32>,
    stats: &TrainStats,
) {
    for ch in 0..running_mean.len() {
        running_mean[ch] = MOMENTUM * running_mean[ch] + (1.0 - MOMENTUM) * stats.mean[ch];
        running_var[ch] = MOMENTUM * running_var[ch] + (1.0 - MOMENTUM) * stats.var[ch];
    }
}

/// Normalizes a single frame with running statistics.
pub fn forward_infer(
    x: &Array3<f32>,
    gamma: &Array1<f32>,
    beta: &Array1<f32>,
    running_mean: &Array1<f32>,
    running_var: &Array1<f32>,
) -> Array3<f32> {
    let (c, h, w) = x.dim();
    let mut y = Array3::<f32>::zeros((c, h, w));
    let src = x.as_slice().unwrap();
    let dst = y.as_slice_mut().unwrap();
    for ch in 0..c {
        let inv = 1.0 / (running_var[ch] + EPSILON).sqrt();
        let scale = gamma[ch] * inv;
        let shift = beta[ch] - running_mean[ch] * scale;
        let base = ch * h * w;
        for i in 0..h * w {
            dst[base + i] = src[base + i] * scale + shift;
        }
    }
    y
}

/// Backward through training-mode normalization, including the dependence
/// of the batch statistics on the input.
///
/// Returns `(dx, dgamma, dbeta)`.
pub fn backward(
    dout: &[Array3<f32>],
    x: &[Array3<f32>],
    stats: &TrainStats,
    gamma: &Array1<f32>,
) -> (Vec<Array3<f32>>, Array1<f32>, Array1<f32>) {
    let channels = x[0].dim().0;
    let n = stats.count as f64;

    // dbeta = sum(dout), dgamma = sum(dout * x_hat), per channel.
    let partials: Vec<(Vec<f64>, Vec<f64>)> = dout
        .par_iter()
        .zip(x.par_iter())
        .map(|(dy, xf)| {
            let (c, h, w) = xf.dim();
            let dy_s = dy.as_slice().unwrap();
            let x_s = xf.as_slice().unwrap();
            let mut dbeta = vec![0.0f64; c];
            let mut dgamma = vec![0.0f64; c];
            for ch in 0..c {
                let mu = stats.mean[ch] as f64;
                let istd = stats.inv_std[ch] as f64;
                let base = ch * h * w;
                let mut sb = 0.0f64;
                let mut sg = 0.0f64;
                for i in 0..h * w {
                    let d = dy_s[base + i] as f64;
                    let xhat = (x_s[base + i] as f64 - mu) * istd;
                    sb += d;
                    sg += d * xhat;
                }
                dbeta[ch] = sb;
                dgamma[ch] = sg;
            }
            (dbeta, dgamma)
        })
        .collect();

    let mut dbeta = vec![0.0f64; channels];
    let mut dgamma = vec![0.0f64; channels];
    for (db, dg) in &partials {
        for ch in 0..channels {
            dbeta[ch] += db[ch];
            dgamma[ch] += dg[ch];
        }
    }

    // dx = gamma * inv_std * (dout - dbeta/n - x_hat * dgamma/n)
    let dbeta_n: Vec<f32> = dbeta.iter().map(|v| (v / n) as f32).collect();
    let dgamma_n: Vec<f32> = dgamma.iter().map(|v| (v / n) as f32).collect();
    let dx = dout
        .par_iter()
        .zip(x.par_iter())
        .map(|(dy, xf)| {
            let (c, h, w) = xf.dim();
            let mut out = Array3::<f32>::zeros((c, h, w));
            let dy_s = dy.as_slice().unwrap();
            let x_s = xf.as_slice().unwrap();
            let o = out.as_slice_mut().unwrap();
            for ch in 0..c {
                let mu = stats.mean[ch];
                let istd = stats.inv_std[ch];
                let g = gamma[ch] * istd;
                let base = ch * h * w;
                for i in 0..h * w {
                    let xhat = (x_s[base + i] - mu) * istd;
                    o[base + i] = g * (dy_s[base + i] - dbeta_n[ch] - xhat * dgamma_n[ch]);
                }
            }
            out
        })
        .collect();

    (
        dx,
        dgamma.iter().map(|&v| v as f32).collect(),
        dbeta.iter().map(|&v| v as f32).collect(),
    )
}
