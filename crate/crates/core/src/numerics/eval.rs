use std::borrow::Cow;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::activation::{glu_forward, Activation};
use super::attention::{attention_forward, AttentionSpec};
use super::backend::*;
use super::conv::{conv1d_forward, depthwise_conv1d_forward};
use super::linalg::{feed_forward_forward, linear_forward};
use super::mask::zero_padded_rows;
use super::norm::{batch_norm_forward, layer_norm_forward, RunningStats, StatsMode};
use super::param::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::Result;

/// Forward-only backend. Parameters are borrowed, intermediates are owned and
/// freed as soon as the caller drops them.
pub struct Eval<'p> {
    store: &'p ParamStore,
    mode: StatsMode,
    rng: Option<ChaCha8Rng>,
}

impl<'p> Eval<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            mode: StatsMode::Eval,
            rng: None,
        }
    }

    /// Training-mode forward: batch statistics, running-stat updates and dropout.
    pub fn train(store: &'p ParamStore, seed: u64) -> Self {
        Self {
            store,
            mode: StatsMode::Train,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }
}

impl<'p> Backend<'p> for Eval<'p> {
    type V = Cow<'p, Tensor>;

    fn store(&self) -> &'p ParamStore {
        self.store
    }

    fn mode(&self) -> StatsMode {
        self.mode
    }

    fn dropout_rng(&mut self) -> Option<&mut ChaCha8Rng> {
        self.rng.as_mut()
    }

    fn param(&mut self, id: ParamId) -> Self::V {
        Cow::Borrowed(self.store.get(id))
    }

    fn constant(&mut self, t: Tensor) -> Self::V {
        Cow::Owned(t)
    }

    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor {
        v.as_ref()
    }

    fn add(&mut self, a: Self::V, b: &Self::V) -> Result<Self::V> {
        a.same_shape(b, "add")?;
        let mut a = a.into_owned();
        a.data_mut()
            .iter_mut()
            .zip(b.data())
            .for_each(|(x, y)| *x += y);
        Ok(Cow::Owned(a))
    }

    fn scale(&mut self, x: Self::V, factor: f64) -> Self::V {
        let mut x = x.into_owned();
        x.data_mut().iter_mut().for_each(|v| *v *= factor);
        Cow::Owned(x)
    }

    fn scalar_mul(&mut self, w: &Self::V, x: &Self::V) -> Result<Self::V> {
        scalar_mul_tensor(w, x).map(Cow::Owned)
    }

    fn add_const(&mut self, x: Self::V, c: &Tensor) -> Result<Self::V> {
        add_const_tensor(x.into_owned(), c).map(Cow::Owned)
    }

    fn mul_const(&mut self, x: &Self::V, c: Tensor) -> Result<Self::V> {
        mul_const_tensor(x, &c).map(Cow::Owned)
    }

    fn linear(&mut self, x: &Self::V, w: &Self::V, b: Option<&Self::V>) -> Result<Self::V> {
        linear_forward(x, w, b.map(|b| b.as_ref())).map(Cow::Owned)
    }

    fn conv1d(
        &mut self,
        x: &Self::V,
        w: &Self::V,
        b: &Self::V,
        stride: usize,
        pad: usize,
    ) -> Result<Self::V> {
        conv1d_forward(x, w, b, stride, pad).map(Cow::Owned)
    }

    fn depthwise_conv1d(
        &mut self,
        x: &Self::V,
        w: &Self::V,
        b: &Self::V,
        pad: usize,
    ) -> Result<Self::V> {
        depthwise_conv1d_forward(x, w, b, pad).map(Cow::Owned)
    }

    fn layer_norm(
        &mut self,
        x: &Self::V,
        gain: &Self::V,
        bias: &Self::V,
        eps: f64,
    ) -> Result<Self::V> {
        Ok(Cow::Owned(layer_norm_forward(x, gain, bias, eps)?.0))
    }

    fn batch_norm(
        &mut self,
        x: &Self::V,
        gain: &Self::V,
        bias: &Self::V,
        lengths: &[usize],
        running: &RunningStats,
        eps: f64,
    ) -> Result<Self::V> {
        Ok(Cow::Owned(
            batch_norm_forward(x, gain, bias, lengths, self.mode, running, eps)?.0,
        ))
    }

    fn relu(&mut self, x: Self::V) -> Self::V {
        let mut x = x.into_owned();
        Activation::Relu.apply_in_place(x.data_mut());
        Cow::Owned(x)
    }

    fn swish(&mut self, x: Self::V) -> Self::V {
        let mut x = x.into_owned();
        Activation::Swish.apply_in_place(x.data_mut());
        Cow::Owned(x)
    }

    fn glu(&mut self, x: &Self::V) -> Result<Self::V> {
        glu_forward(x).map(Cow::Owned)
    }

    fn attention(
        &mut self,
        q: &Self::V,
        k: &Self::V,
        v: &Self::V,
        spec: &AttentionSpec,
    ) -> Result<(Self::V, Option<Tensor>)> {
        let out = attention_forward(q, k, v, spec, false)?;
        Ok((Cow::Owned(out.out), out.probs))
    }

    fn mask_time(&mut self, x: Self::V, lengths: &[usize]) -> Result<Self::V> {
        let mut x = x.into_owned();
        zero_padded_rows(&mut x, lengths)?;
        Ok(Cow::Owned(x))
    }

    fn pad_time(&mut self, x: &Self::V, new_len: usize) -> Result<Self::V> {
        pad_time_tensor(x, new_len).map(Cow::Owned)
    }

    fn embedding(
        &mut self,
        table: &Self::V,
        ids: &[usize],
        batch: usize,
        time: usize,
    ) -> Result<Self::V> {
        embedding_tensor(table, ids, batch, time).map(Cow::Owned)
    }

    fn cross_entropy(
        &mut self,
        logits: &Self::V,
        targets: &[usize],
        lengths: &[usize],
    ) -> Result<Self::V> {
        let (loss, _, _) = cross_entropy_tensor(logits, targets, lengths)?;
        Ok(Cow::Owned(Tensor::scalar(loss)))
    }

    fn feed_forward(
        &mut self,
        x: &Self::V,
        ffn: FeedForwardParams<'_, Self::V>,
    ) -> Result<Self::V> {
        if ffn.dropout > 0.0 && self.mode == StatsMode::Train {
            let h = self.linear(x, ffn.up_w, Some(ffn.up_b))?;
            let h = self.activation(h, ffn.act);
            let h = self.dropout(h, ffn.dropout)?;
            return self.linear(&h, ffn.down_w, Some(ffn.down_b));
        }
        feed_forward_forward(x, ffn.up_w, ffn.up_b, ffn.act, ffn.down_w, ffn.down_b).map(Cow::Owned)
    }

    fn dot_const(&mut self, x: &Self::V, c: &Tensor) -> Result<Self::V> {
        Ok(Cow::Owned(Tensor::scalar(dot_const_value(x, c)?)))
    }
}
