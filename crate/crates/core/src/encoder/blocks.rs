//! Context-interaction layers.

use rand::Rng;

use super::config::CONFORMER_CONV_KERNEL;
use crate::error::Result;
use crate::layers::{Activation, BatchNorm, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::numerics::param::xavier_uniform;
use crate::numerics::{Backend, ParamId, ParamStore, Tensor};

/// Pre-norm transformer layer: `x + MHA(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub attn_norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
    pub dropout: f64,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), dim)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, dim, heads, rng)?,
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), dim)?,
            ffn: FeedForward::new(
                store,
                &format!("{name}.ffn"),
                dim,
                ffn_dim,
                Activation::Relu,
                dropout,
                rng,
            )?,
            dropout,
        })
    }

    pub fn forward<'p, B: Backend<'p>>(
        &self,
        b: &mut B,
        x: &B::V,
        lengths: &[usize],
    ) -> Result<B::V> {
        let h = self.attn_norm.forward(b, x)?;
        let (h, _) = self.attn.forward(b, &h, &h, lengths, false, false)?;
        let h = b.dropout(h, self.dropout)?;
        let x = b.add(h, x)?;
        let h = self.ffn_norm.forward(b, &x)?;
        let h = self.ffn.forward(b, &h)?;
        let h = b.dropout(h, self.dropout)?;
        let x = b.add(x, &h)?;
        b.mask_time(x, lengths)
    }

    pub fn zero_output_projections(&self, store: &mut ParamStore) {
        self.attn.output.zero(store);
        self.ffn.down.zero(store);
    }
}

/// Pointwise conv, GLU, depthwise conv, batch norm, swish, pointwise conv.
#[derive(Clone, Debug)]
pub struct ConvModule {
    pub norm: LayerNorm,
    pub pointwise_in: Linear,
    pub depthwise: ParamId,
    pub depthwise_bias: ParamId,
    pub batch_norm: BatchNorm,
    pub pointwise_out: Linear,
    pub kernel: usize,
    pub dropout: f64,
}

impl ConvModule {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let kernel = CONFORMER_CONV_KERNEL;
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim)?,
            pointwise_in: Linear::new(
                store,
                &format!("{name}.pointwise_in"),
                dim,
                2 * dim,
                true,
                rng,
            )?,
            depthwise: store.register(
                format!("{name}.depthwise.weight"),
                xavier_uniform(&[kernel, dim], kernel, kernel, rng),
            )?,
            depthwise_bias: store
                .register(format!("{name}.depthwise.bias"), Tensor::zeros(vec![dim]))?,
            batch_norm: BatchNorm::new(store, &format!("{name}.batch_norm"), dim)?,
            pointwise_out: Linear::new(
                store,
                &format!("{name}.pointwise_out"),
                dim,
                dim,
                true,
                rng,
            )?,
            kernel,
            dropout,
        })
    }

    pub fn forward<'p, B: Backend<'p>>(
        &self,
        b: &mut B,
        x: &B::V,
        lengths: &[usize],
    ) -> Result<B::V> {
        let h = self.norm.forward(b, x)?;
        let h = self.pointwise_in.forward(b, &h)?;
        let h = b.glu(&h)?;
        let h = b.mask_time(h, lengths)?;
        let w = b.param(self.depthwise);
        let bias = b.param(self.depthwise_bias);
        let h = b.depthwise_conv1d(&h, &w, &bias, (self.kernel - 1) / 2)?;
        let h = self.batch_norm.forward(b, &h, lengths)?;
        let h = b.swish(h);
        let h = self.pointwise_out.forward(b, &h)?;
        let h = b.dropout(h, self.dropout)?;
        b.mask_time(h, lengths)
    }
}

/// Macaron conformer layer with half-step feed-forward modules and a final layer norm.
#[derive(Clone, Debug)]
pub struct ConformerBlock {
    pub ffn1_norm: LayerNorm,
    pub ffn1: FeedForward,
    pub attn_norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub conv: ConvModule,
    pub ffn2_norm: LayerNorm,
    pub ffn2: FeedForward,
    pub final_norm: LayerNorm,
    pub dropout: f64,
}

impl ConformerBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            ffn1_norm: LayerNorm::new(store, &format!("{name}.ffn1_norm"), dim)?,
            ffn1: FeedForward::new(
                store,
                &format!("{name}.ffn1"),
                dim,
                ffn_dim,
                Activation::Swish,
                dropout,
                rng,
            )?,
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), dim)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, dim, heads, rng)?,
            conv: ConvModule::new(store, &format!("{name}.conv"), dim, dropout, rng)?,
            ffn2_norm: LayerNorm::new(store, &format!("{name}.ffn2_norm"), dim)?,
            ffn2: FeedForward::new(
                store,
                &format!("{name}.ffn2"),
                dim,
                ffn_dim,
                Activation::Swish,
                dropout,
                rng,
            )?,
            final_norm: LayerNorm::new(store, &format!("{name}.final_norm"), dim)?,
            dropout,
        })
    }

    pub fn forward<'p, B: Backend<'p>>(
        &self,
        b: &mut B,
        x: &B::V,
        lengths: &[usize],
    ) -> Result<B::V> {
        let h = self.ffn1_norm.forward(b, x)?;
        let h = self.ffn1.forward(b, &h)?;
        let h = b.dropout(h, self.dropout)?;
        let h = b.scale(h, 0.5);
        let x = b.add(h, x)?;

        let h = self.attn_norm.forward(b, &x)?;
        let (h, _) = self.attn.forward(b, &h, &h, lengths, false, false)?;
        let h = b.dropout(h, self.dropout)?;
        let x = b.add(x, &h)?;
        let x = b.mask_time(x, lengths)?;

        let h = self.conv.forward(b, &x, lengths)?;
        let x = b.add(x, &h)?;

        let h = self.ffn2_norm.forward(b, &x)?;
        let h = self.ffn2.forward(b, &h)?;
        let h = b.dropout(h, self.dropout)?;
        let h = b.scale(h, 0.5);
        let x = b.add(x, &h)?;

        let x = self.final_norm.forward(b, &x)?;
        b.mask_time(x, lengths)
    }

    pub fn zero_output_projections(&self, store: &mut ParamStore) {
        self.ffn1.down.zero(store);
        self.attn.output.zero(store);
        self.conv.pointwise_out.zero(store);
        self.ffn2.down.zero(store);
    }
}

#[derive(Clone, Debug)]
pub enum Block {
    Transformer(TransformerBlock),
    Conformer(ConformerBlock),
}

impl Block {
    pub fn forward<'p, B: Backend<'p>>(
        &self,
        b: &mut B,
        x: &B::V,
        lengths: &[usize],
    ) -> Result<B::V> {
        match self {
            Block::Transformer(t) => t.forward(b, x, lengths),
            Block::Conformer(c) => c.forward(b, x, lengths),
        }
    }

    pub fn zero_output_projections(&self, store: &mut ParamStore) {
        match self {
            Block::Transformer(t) => t.zero_output_projections(store),
            Block::Conformer(c) => c.zero_output_projections(store),
        }
    }
}
