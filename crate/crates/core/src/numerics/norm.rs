//! Layer normalization and masked batch normalization.

use std::sync::Mutex;

use super::tensor::Tensor;
use crate::error::{PdsError, Result};

pub const NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

/// Per-row statistics kept for the backward pass.
#[derive(Clone, Debug)]
pub struct NormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

fn check_affine(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<usize> {
    let c = x.last_dim();
    if x.rank() == 0 || c == 0 {
        return Err(PdsError::config("normalization over an empty channel axis"));
    }
    if gain.shape() != [c] || bias.shape() != [c] {
        return Err(PdsError::config(format!(
            "normalization over {c} channels got gain {:?} and bias {:?}",
            gain.shape(),
            bias.shape()
        )));
    }
    Ok(c)
}

/// Normalizes every last-axis slice to zero mean and unit variance, then applies gain and bias.
pub fn layer_norm_forward(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<(Tensor, NormCache)> {
    let c = check_affine(x, gain, bias)?;
    let rows = x.len() / c;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x.data()[r * c..(r + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let s = 1.0 / (var + eps).sqrt();
        rstd[r] = s;
        for i in 0..c {
            let h = (row[i] - mean) * s;
            xhat[r * c + i] = h;
            out[r * c + i] = h * gain.data()[i] + bias.data()[i];
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        NormCache { xhat, rstd },
    ))
}

pub fn layer_norm_backward(
    gain: &Tensor,
    cache: &NormCache,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let c = gain.len();
    let rows = cache.rstd.len();
    let mut dx = vec![0.0; rows * c];
    let mut dg = vec![0.0; c];
    let mut db = vec![0.0; c];
    let mut dxhat = vec![0.0; c];
    for r in 0..rows {
        let g = &grad_out.data()[r * c..(r + 1) * c];
        let xh = &cache.xhat[r * c..(r + 1) * c];
        let mut sum = 0.0;
        let mut dot = 0.0;
        for i in 0..c {
            dg[i] += g[i] * xh[i];
            db[i] += g[i];
            dxhat[i] = g[i] * gain.data()[i];
            sum += dxhat[i];
            dot += dxhat[i] * xh[i];
        }
        let n = c as f64;
        for i in 0..c {
            dx[r * c + i] = cache.rstd[r] * (dxhat[i] - sum / n - xh[i] * dot / n);
        }
    }
    (
        Tensor::new(grad_out.shape().to_vec(), dx).unwrap(),
        Tensor::new(vec![c], dg).unwrap(),
        Tensor::new(vec![c], db).unwrap(),
    )
}

/// Running mean and variance of a batch-norm layer.
///
/// Guarded by a mutex so an encoder can be shared across evaluation threads;
/// only training-mode forwards write to it.
#[derive(Debug)]
pub struct RunningStats {
    inner: Mutex<(Vec<f64>, Vec<f64>)>,
    pub momentum: f64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            inner: Mutex::new((vec![0.0; channels], vec![1.0; channels])),
            momentum: BATCH_NORM_MOMENTUM,
        }
    }

    pub fn snapshot(&self) -> (Vec<f64>, Vec<f64>) {
        self.inner.lock().expect("running stats poisoned").clone()
    }

    pub fn set(&self, mean: Vec<f64>, var: Vec<f64>) {
        *self.inner.lock().expect("running stats poisoned") = (mean, var);
    }

    fn update(&self, mean: &[f64], unbiased_var: &[f64]) {
        let mut guard = self.inner.lock().expect("running stats poisoned");
        let m = self.momentum;
        let (rm, rv) = &mut *guard;
        for i in 0..rm.len() {
            rm[i] = (1.0 - m) * rm[i] + m * mean[i];
            rv[i] = (1.0 - m) * rv[i] + m * unbiased_var[i];
        }
    }
}

impl Clone for RunningStats {
    fn clone(&self) -> Self {
        Self {
            inner: Mutex::new(self.snapshot()),
            momentum: self.momentum,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StatsMode {
    Train,
    Eval,
}

/// Cache for masked batch norm; `xhat` is zero at padded positions.
#[derive(Clone, Debug)]
pub struct BatchNormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
    pub lengths: Vec<usize>,
    pub count: usize,
    pub mode: StatsMode,
}

fn check_lengths(lengths: &[usize], batch: usize, t: usize) -> Result<()> {
    if lengths.len() != batch || lengths.iter().any(|&l| l > t) {
        return Err(PdsError::config(format!(
            "valid lengths {lengths:?} inconsistent with batch {batch} x time {t}"
        )));
    }
    Ok(())
}

/// Batch normalization over the valid `(batch, time)` positions of a `(batch, time, channel)` tensor.
///
/// Padded positions are excluded from the statistics and produce zeros.
/// Train mode normalizes with batch statistics and updates `running`;
/// eval mode uses `running` only.
pub fn batch_norm_forward(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    lengths: &[usize],
    mode: StatsMode,
    running: &RunningStats,
    eps: f64,
) -> Result<(Tensor, BatchNormCache)> {
    let c = check_affine(x, gain, bias)?;
    let (batch, t, _) = x.btc()?;
    check_lengths(lengths, batch, t)?;
    let count: usize = lengths.iter().sum();
    let xd = x.data();
    let valid_rows = || {
        lengths
            .iter()
            .enumerate()
            .flat_map(move |(b, &len)| (0..len).map(move |ti| b * t + ti))
    };

    let (mean, var) = match mode {
        StatsMode::Train => {
            if count < 2 {
                return Err(PdsError::DegenerateBatch { valid: count });
            }
            let mut mean = vec![0.0; c];
            for r in valid_rows() {
                for (m, v) in mean.iter_mut().zip(&xd[r * c..(r + 1) * c]) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= count as f64);
            let mut var = vec![0.0; c];
            for r in valid_rows() {
                for i in 0..c {
                    let d = xd[r * c + i] - mean[i];
                    var[i] += d * d;
                }
            }
            let unbiased: Vec<f64> = var.iter().map(|v| v / (count - 1) as f64).collect();
            var.iter_mut().for_each(|v| *v /= count as f64);
            running.update(&mean, &unbiased);
            (mean, var)
        }
        StatsMode::Eval => running.snapshot(),
    };

    let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    for r in valid_rows() {
        for i in 0..c {
            let h = (xd[r * c + i] - mean[i]) * rstd[i];
            xhat[r * c + i] = h;
            out[r * c + i] = h * gain.data()[i] + bias.data()[i];
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        BatchNormCache {
            xhat,
            rstd,
            lengths: lengths.to_vec(),
            count,
            mode,
        },
    ))
}

pub fn batch_norm_backward(
    gain: &Tensor,
    cache: &BatchNormCache,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let c = gain.len();
    let t = grad_out.dim(1);
    let gd = grad_out.data();
    let mut dg = vec![0.0; c];
    let mut db = vec![0.0; c];
    let mut sum_dxhat = vec![0.0; c];
    let mut dot_dxhat = vec![0.0; c];
    let rows: Vec<usize> = cache
        .lengths
        .iter()
        .enumerate()
        .flat_map(|(b, &len)| (0..len).map(move |ti| b * t + ti))
        .collect();
    for &r in &rows {
        for i in 0..c {
            let g = gd[r * c + i];
            let xh = cache.xhat[r * c + i];
            dg[i] += g * xh;
            db[i] += g;
            let dxh = g * gain.data()[i];
            sum_dxhat[i] += dxh;
            dot_dxhat[i] += dxh * xh;
        }
    }
    let mut dx = vec![0.0; gd.len()];
    let n = cache.count as f64;
    for &r in &rows {
        for i in 0..c {
            let dxh = gd[r * c + i] * gain.data()[i];
            dx[r * c + i] = match cache.mode {
                StatsMode::Train => {
                    cache.rstd[i]
                        * (dxh - sum_dxhat[i] / n - cache.xhat[r * c + i] * dot_dxhat[i] / n)
                }
                StatsMode::Eval => cache.rstd[i] * dxh,
            };
        }
    }
    (
        Tensor::new(grad_out.shape().to_vec(), dx).unwrap(),
        Tensor::new(vec![c], dg).unwrap(),
        Tensor::new(vec![c], db).unwrap(),
    )
}
