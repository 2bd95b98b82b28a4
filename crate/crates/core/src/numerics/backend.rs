//! The operation set every model component is written against.
//!
//! Two implementations exist: [`Eval`](super::eval::Eval) computes values only
//! and drops intermediates as soon as they go out of scope, and
//! [`Tape`](super::tape::Tape) records each operation for reverse-mode
//! differentiation. Model code is generic over [`Backend`] so the benchmark
//! path and the training path share one definition of the architecture.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::activation::Activation;
use super::attention::AttentionSpec;
use super::norm::{RunningStats, StatsMode};
use super::param::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{PdsError, Result};

pub trait Backend<'p> {
    /// Handle to a value produced by this backend.
    type V;

    fn store(&self) -> &'p ParamStore;
    fn mode(&self) -> StatsMode;
    fn dropout_rng(&mut self) -> Option<&mut ChaCha8Rng>;

    fn param(&mut self, id: ParamId) -> Self::V;
    /// A value that never receives gradients.
    fn constant(&mut self, t: Tensor) -> Self::V;
    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor;

    fn add(&mut self, a: Self::V, b: &Self::V) -> Result<Self::V>;
    fn scale(&mut self, x: Self::V, factor: f64) -> Self::V;
    /// Multiplies a tensor by a learnable scalar held in a one-element tensor.
    fn scalar_mul(&mut self, w: &Self::V, x: &Self::V) -> Result<Self::V>;
    /// Adds a constant whose shape matches the trailing axes of `x`.
    fn add_const(&mut self, x: Self::V, c: &Tensor) -> Result<Self::V>;
    /// Elementwise product with a same-shape constant.
    fn mul_const(&mut self, x: &Self::V, c: Tensor) -> Result<Self::V>;

    fn linear(&mut self, x: &Self::V, w: &Self::V, b: Option<&Self::V>) -> Result<Self::V>;
    fn conv1d(
        &mut self,
        x: &Self::V,
        w: &Self::V,
        b: &Self::V,
        stride: usize,
        pad: usize,
    ) -> Result<Self::V>;
    fn depthwise_conv1d(
        &mut self,
        x: &Self::V,
        w: &Self::V,
        b: &Self::V,
        pad: usize,
    ) -> Result<Self::V>;
    fn layer_norm(
        &mut self,
        x: &Self::V,
        gain: &Self::V,
        bias: &Self::V,
        eps: f64,
    ) -> Result<Self::V>;
    fn batch_norm(
        &mut self,
        x: &Self::V,
        gain: &Self::V,
        bias: &Self::V,
        lengths: &[usize],
        running: &RunningStats,
        eps: f64,
    ) -> Result<Self::V>;
    fn relu(&mut self, x: Self::V) -> Self::V;
    fn swish(&mut self, x: Self::V) -> Self::V;
    fn glu(&mut self, x: &Self::V) -> Result<Self::V>;

    /// Scaled dot-product attention over projected `q`, `k`, `v`.
    /// Returns the output and, when `spec.keep_weights` is set, the per-head weights.
    fn attention(
        &mut self,
        q: &Self::V,
        k: &Self::V,
        v: &Self::V,
        spec: &AttentionSpec,
    ) -> Result<(Self::V, Option<Tensor>)>;

    /// Zeroes time steps at or beyond each item's valid length.
    fn mask_time(&mut self, x: Self::V, lengths: &[usize]) -> Result<Self::V>;
    /// Right-pads the time axis with zeros up to `new_len`.
    fn pad_time(&mut self, x: &Self::V, new_len: usize) -> Result<Self::V>;
    /// Gathers rows of `table` for `ids`, producing `(batch, time, width)`.
    fn embedding(
        &mut self,
        table: &Self::V,
        ids: &[usize],
        batch: usize,
        time: usize,
    ) -> Result<Self::V>;
    /// Mean token cross-entropy of `(batch, time, vocab)` logits over valid positions.
    fn cross_entropy(
        &mut self,
        logits: &Self::V,
        targets: &[usize],
        lengths: &[usize],
    ) -> Result<Self::V>;
    /// `sum(x * c)` as a one-element tensor.
    fn dot_const(&mut self, x: &Self::V, c: &Tensor) -> Result<Self::V>;

    fn activation(&mut self, x: Self::V, act: Activation) -> Self::V {
        match act {
            Activation::Relu => self.relu(x),
            Activation::Swish => self.swish(x),
        }
    }

    /// Inverted dropout; the identity in eval mode or when no RNG is attached.
    fn dropout(&mut self, x: Self::V, rate: f64) -> Result<Self::V> {
        if rate <= 0.0 || self.mode() == StatsMode::Eval {
            return Ok(x);
        }
        if rate >= 1.0 {
            return Err(PdsError::config(format!(
                "dropout rate {rate} must be below 1"
            )));
        }
        let shape = self.value(&x).shape().to_vec();
        let Some(rng) = self.dropout_rng() else {
            return Ok(x);
        };
        let keep = 1.0 / (1.0 - rate);
        let mask = Tensor::from_fn(shape, |_| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        });
        self.mul_const(&x, mask)
    }

    /// `down(dropout(act(up(x))))`.
    fn feed_forward(
        &mut self,
        x: &Self::V,
        ffn: FeedForwardParams<'_, Self::V>,
    ) -> Result<Self::V> {
        let h = self.linear(x, ffn.up_w, Some(ffn.up_b))?;
        let h = self.activation(h, ffn.act);
        let h = self.dropout(h, ffn.dropout)?;
        self.linear(&h, ffn.down_w, Some(ffn.down_b))
    }
}

/// Borrowed weights of a two-layer position-wise network.
pub struct FeedForwardParams<'a, V> {
    pub up_w: &'a V,
    pub up_b: &'a V,
    pub down_w: &'a V,
    pub down_b: &'a V,
    pub act: Activation,
    pub dropout: f64,
}

// Shared forward helpers used by both backends.

pub(crate) fn add_tensors(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.same_shape(b, "add")?;
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
    )
}

pub(crate) fn scale_tensor(x: &Tensor, factor: f64) -> Tensor {
    Tensor::new(
        x.shape().to_vec(),
        x.data().iter().map(|v| v * factor).collect(),
    )
    .unwrap()
}

pub(crate) fn scalar_mul_tensor(w: &Tensor, x: &Tensor) -> Result<Tensor> {
    if w.len() != 1 {
        return Err(PdsError::config(format!(
            "scalar weight must hold one value, has shape {:?}",
            w.shape()
        )));
    }
    Ok(scale_tensor(x, w.item()))
}

pub(crate) fn add_const_tensor(mut x: Tensor, c: &Tensor) -> Result<Tensor> {
    let n = c.len();
    let trailing = &x.shape()[x.rank().saturating_sub(c.rank())..];
    if n == 0 || trailing != c.shape() {
        return Err(PdsError::config(format!(
            "cannot broadcast {:?} onto {:?}",
            c.shape(),
            x.shape()
        )));
    }
    for chunk in x.data_mut().chunks_exact_mut(n) {
        for (o, v) in chunk.iter_mut().zip(c.data()) {
            *o += v;
        }
    }
    Ok(x)
}

pub(crate) fn mul_const_tensor(x: &Tensor, c: &Tensor) -> Result<Tensor> {
    x.same_shape(c, "mul_const")?;
    Tensor::new(
        x.shape().to_vec(),
        x.data().iter().zip(c.data()).map(|(a, b)| a * b).collect(),
    )
}

pub(crate) fn mask_time_tensor(x: &Tensor, lengths: &[usize]) -> Result<Tensor> {
    let mut out = x.clone();
    super::mask::zero_padded_rows(&mut out, lengths)?;
    Ok(out)
}

pub(crate) fn pad_time_tensor(x: &Tensor, new_len: usize) -> Result<Tensor> {
    let (b, t, c) = x.btc()?;
    if new_len < t {
        return Err(PdsError::config(format!(
            "cannot pad time extent {t} down to {new_len}"
        )));
    }
    let mut out = vec![0.0; b * new_len * c];
    for item in 0..b {
        out[item * new_len * c..(item * new_len + t) * c]
            .copy_from_slice(&x.data()[item * t * c..(item + 1) * t * c]);
    }
    Tensor::new(vec![b, new_len, c], out)
}

/// Inverse of [`pad_time_tensor`]: keeps the first `len` steps.
pub(crate) fn truncate_time_tensor(x: &Tensor, len: usize) -> Tensor {
    let (b, t, c) = x.btc().unwrap();
    let mut out = vec![0.0; b * len * c];
    for item in 0..b {
        out[item * len * c..(item + 1) * len * c]
            .copy_from_slice(&x.data()[item * t * c..(item * t + len) * c]);
    }
    Tensor::new(vec![b, len, c], out).unwrap()
}

pub(crate) fn embedding_tensor(
    table: &Tensor,
    ids: &[usize],
    batch: usize,
    time: usize,
) -> Result<Tensor> {
    let &[vocab, width] = table.shape() else {
        return Err(PdsError::config("embedding table must be (vocab, width)"));
    };
    if ids.len() != batch * time {
        return Err(PdsError::config(format!(
            "{} ids for a {batch} x {time} batch",
            ids.len()
        )));
    }
    let mut out = Vec::with_capacity(ids.len() * width);
    for &id in ids {
        if id >= vocab {
            return Err(PdsError::config(format!(
                "token id {id} outside vocabulary of {vocab}"
            )));
        }
        out.extend_from_slice(&table.data()[id * width..(id + 1) * width]);
    }
    Tensor::new(vec![batch, time, width], out)
}

/// Returns the mean loss, the softmax probabilities and the valid-position count.
pub(crate) fn cross_entropy_tensor(
    logits: &Tensor,
    targets: &[usize],
    lengths: &[usize],
) -> Result<(f64, Vec<f64>, usize)> {
    let (b, t, v) = logits.btc()?;
    if targets.len() != b * t || lengths.len() != b || lengths.iter().any(|&l| l > t) {
        return Err(PdsError::config(
            "cross-entropy targets or lengths do not fit the logits",
        ));
    }
    let count: usize = lengths.iter().sum();
    if count == 0 {
        return Err(PdsError::config("cross-entropy over zero valid positions"));
    }
    let mut probs = vec![0.0; logits.len()];
    let mut loss = 0.0;
    for item in 0..b {
        for ti in 0..lengths[item] {
            let r = item * t + ti;
            let target = targets[r];
            if target >= v {
                return Err(PdsError::config(format!(
                    "target {target} outside vocabulary of {v}"
                )));
            }
            let row = &mut probs[r * v..(r + 1) * v];
            row.copy_from_slice(&logits.data()[r * v..(r + 1) * v]);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for p in row.iter_mut() {
                *p = (*p - max).exp();
                sum += *p;
            }
            loss -= (row[target] / sum).ln();
            row.iter_mut().for_each(|p| *p /= sum);
        }
    }
    Ok((loss / count as f64, probs, count))
}

pub(crate) fn dot_const_value(x: &Tensor, c: &Tensor) -> Result<f64> {
    x.same_shape(c, "dot_const")?;
    Ok(x.data().iter().zip(c.data()).map(|(a, b)| a * b).sum())
}
