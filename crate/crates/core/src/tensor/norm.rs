//! Per-channel batch normalization over `B×C×H×W` buffers.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with the supplied running statistics.
    Eval,
}

/// Per-channel batch statistics produced by a train-mode pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    /// Population variance.
    pub var: Vec<f64>,
    /// Values per channel (`B·H·W`).
    pub count: usize,
}

impl BatchNormStats {
    /// Exponential moving update with the unbiased variance estimate.
    pub fn update_running(&self, running_mean: &mut [f64], running_var: &mut [f64], momentum: f64) {
        let correction = if self.count > 1 {
            self.count as f64 / (self.count - 1) as f64
        } else {
            1.0
        };
        for c in 0..self.mean.len() {
            running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * self.mean[c];
            running_var[c] =
                (1.0 - momentum) * running_var[c] + momentum * self.var[c] * correction;
        }
    }
}

pub(crate) struct NormForward {
    pub out: Vec<f64>,
    pub x_hat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub stats: Option<BatchNormStats>,
}

/// `dims = (batch, channels, spatial)`.
pub(crate) fn forward(
    x: &[f64],
    dims: (usize, usize, usize),
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
    running: Option<(&[f64], &[f64])>,
) -> NormForward {
    let (batch, channels, spatial) = dims;
    let count = batch * spatial;
    let (mean, var, stats) = match running {
        Some((rm, rv)) => (rm.to_vec(), rv.to_vec(), false),
        None => {
            let mut mean = vec![0.0; channels];
            let mut var = vec![0.0; channels];
            for c in 0..channels {
                let mut s = 0.0;
                for b in 0..batch {
                    let base = (b * channels + c) * spatial;
                    s += x[base..base + spatial].iter().sum::<f64>();
                }
                let m = s / count as f64;
                let mut v = 0.0;
                for b in 0..batch {
                    let base = (b * channels + c) * spatial;
                    v += x[base..base + spatial]
                        .iter()
                        .map(|&xv| (xv - m) * (xv - m))
                        .sum::<f64>();
                }
                mean[c] = m;
                var[c] = v / count as f64;
            }
            (mean, var, true)
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / math::sqrt(v + eps)).collect();
    let mut out = vec![0.0; x.len()];
    let mut x_hat = vec![0.0; x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let base = (b * channels + c) * spatial;
            for i in base..base + spatial {
                let h = (x[i] - mean[c]) * inv_std[c];
                x_hat[i] = h;
                out[i] = gamma[c] * h + beta[c];
            }
        }
    }
    NormForward {
        out,
        x_hat,
        inv_std,
        stats: stats.then(|| BatchNormStats { mean, var, count }),
    }
}

pub(crate) struct NormGrads {
    pub dx: Vec<f64>,
    pub dgamma: Vec<f64>,
    pub dbeta: Vec<f64>,
}

pub(crate) fn backward(
    dy: &[f64],
    x_hat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    dims: (usize, usize, usize),
    mode: NormMode,
) -> NormGrads {
    let (batch, channels, spatial) = dims;
    let n = (batch * spatial) as f64;
    let mut dx = vec![0.0; dy.len()];
    let mut dgamma = vec![0.0; channels];
    let mut dbeta = vec![0.0; channels];
    for c in 0..channels {
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for b in 0..batch {
            let base = (b * channels + c) * spatial;
            for i in base..base + spatial {
                sum_dy += dy[i];
                sum_dy_xhat += dy[i] * x_hat[i];
            }
        }
        dgamma[c] = sum_dy_xhat;
        dbeta[c] = sum_dy;
        let scale = gamma[c] * inv_std[c];
        for b in 0..batch {
            let base = (b * channels + c) * spatial;
            for i in base..base + spatial {
                dx[i] = match mode {
                    NormMode::Eval => scale * dy[i],
                    NormMode::Train => scale * (dy[i] - sum_dy / n - x_hat[i] * sum_dy_xhat / n),
                };
            }
        }
    }
    NormGrads { dx, dgamma, dbeta }
}
