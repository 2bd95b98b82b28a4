//! Parameterized building blocks shared by the encoder, fusion and decoder.

use rand::Rng;

use crate::error::Result;
use crate::numerics::attention::AttentionSpec;
use crate::numerics::param::xavier_uniform;
pub use crate::numerics::Activation;
use crate::numerics::{
    Backend, FeedForwardParams, ParamId, ParamStore, RunningStats, Tensor, NORM_EPS,
};

/// Affine map over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.register(
            format!("{name}.weight"),
            xavier_uniform(&[d_in, d_out], d_in, d_out, rng),
        )?;
        let bias = if bias {
            Some(store.register(format!("{name}.bias"), Tensor::zeros(vec![d_out]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward<'p, B: Backend<'p>>(&self, b: &mut B, x: &B::V) -> Result<B::V> {
        let w = b.param(self.weight);
        let bias = self.bias.map(|id| b.param(id));
        b.linear(x, &w, bias.as_ref())
    }

    /// Sets weight and bias to zero.
    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).data_mut().fill(0.0);
        if let Some(bias) = self.bias {
            store.get_mut(bias).data_mut().fill(0.0);
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.register(format!("{name}.gain"), Tensor::full(vec![dim], 1.0))?,
            bias: store.register(format!("{name}.bias"), Tensor::zeros(vec![dim]))?,
        })
    }

    pub fn forward<'p, B: Backend<'p>>(&self, b: &mut B, x: &B::V) -> Result<B::V> {
        let g = b.param(self.gain);
        let bias = b.param(self.bias);
        b.layer_norm(x, &g, &bias, NORM_EPS)
    }
}

/// Batch norm over valid `(batch, time)` positions with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub running: RunningStats,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.register(format!("{name}.gain"), Tensor::full(vec![dim], 1.0))?,
            bias: store.register(format!("{name}.bias"), Tensor::zeros(vec![dim]))?,
            running: RunningStats::new(dim),
        })
    }

    pub fn forward<'p, B: Backend<'p>>(
        &self,
        b: &mut B,
        x: &B::V,
        lengths: &[usize],
    ) -> Result<B::V> {
        let g = b.param(self.gain);
        let bias = b.param(self.bias);
        b.batch_norm(x, &g, &bias, lengths, &self.running, NORM_EPS)
    }
}

/// Position-wise feed-forward network `W2 act(W1 x)`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
    pub activation: Activation,
    pub dropout: f64,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        activation: Activation,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, true, rng)?,
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, true, rng)?,
            activation,
            dropout,
        })
    }

    pub fn forward<'p, B: Backend<'p>>(&self, b: &mut B, x: &B::V) -> Result<B::V> {
        let (up_w, down_w) = (b.param(self.up.weight), b.param(self.down.weight));
        let up_b = b.param(self.up.bias.expect("feed-forward layers carry biases"));
        let down_b = b.param(self.down.bias.expect("feed-forward layers carry biases"));
        b.feed_forward(
            x,
            FeedForwardParams {
                up_w: &up_w,
                up_b: &up_b,
                down_w: &down_w,
                down_b: &down_b,
                act: self.activation,
                dropout: self.dropout,
            },
        )
    }
}

/// Multi-head attention with query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        kv_dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(crate::PdsError::Config(format!(
                "{name}: width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, true, rng)?,
            key: Linear::new(store, &format!("{name}.key"), kv_dim, dim, true, rng)?,
            value: Linear::new(store, &format!("{name}.value"), kv_dim, dim, true, rng)?,
            output: Linear::new(store, &format!("{name}.output"), dim, dim, true, rng)?,
            heads,
        })
    }

    /// Attends from `query` to `memory`; returns the output and, if requested,
    /// the per-head weights `(batch, heads, q, k)`.
    pub fn forward<'p, B: Backend<'p>>(
        &self,
        b: &mut B,
        query: &B::V,
        memory: &B::V,
        key_lengths: &[usize],
        causal: bool,
        keep_weights: bool,
    ) -> Result<(B::V, Option<Tensor>)> {
        let q = self.query.forward(b, query)?;
        let k = self.key.forward(b, memory)?;
        let v = self.value.forward(b, memory)?;
        let spec = AttentionSpec {
            heads: self.heads,
            key_lengths: key_lengths.to_vec(),
            causal,
            keep_weights,
        };
        let (ctx, weights) = b.attention(&q, &k, &v, &spec)?;
        Ok((self.output.forward(b, &ctx)?, weights))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Eval;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_keys_give_uniform_attention_and_value_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "mha", 4, 4, 2, &mut rng).unwrap();
        let query = Tensor::from_fn(vec![1, 3, 4], |i| (i as f64 * 0.37).sin());
        let memory = Tensor::from_fn(vec![1, 5, 4], |i| ((i % 4) as f64 * 0.5).cos());
        let mut b = Eval::new(&store);
        let (q, m) = (b.constant(query), b.constant(memory.clone()));
        let (out, w) = mha.forward(&mut b, &q, &m, &[5], false, true).unwrap();
        let w = w.unwrap();
        assert!(w.data().iter().all(|&p| (p - 0.2).abs() < 1e-12));
        // every key row is the same, so every output row is that row projected
        let v = mha.value.forward(&mut b, &m).unwrap();
        let v_row = Tensor::new(vec![1, 1, 4], v.data()[..4].to_vec()).unwrap();
        let v_row = b.constant(v_row);
        let expected = mha.output.forward(&mut b, &v_row).unwrap();
        for row in out.data().chunks(4) {
            for (a, e) in row.iter().zip(expected.data()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_key_weight_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "mha", 4, 4, 4, &mut rng).unwrap();
        let mut b = Eval::new(&store);
        let q = b.constant(Tensor::from_fn(vec![2, 3, 4], |i| i as f64 * 0.1));
        let m = b.constant(Tensor::from_fn(vec![2, 1, 4], |i| i as f64 * -0.2));
        let (_, w) = mha.forward(&mut b, &q, &m, &[1, 1], false, true).unwrap();
        assert!(w.unwrap().data().iter().all(|&p| p == 1.0));
    }
}
