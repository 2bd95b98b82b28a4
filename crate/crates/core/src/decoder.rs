//! Transformer decoder with cross-attention over the encoder output.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::position::sinusoidal_pe;
use crate::error::{PdsError, Result};
use crate::layers::{Activation, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::numerics::param::uniform;
use crate::numerics::{Backend, Eval, ParamId, ParamStore, Tensor};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// First id available to real tokens.
pub const FIRST_TOKEN: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    #[serde(default)]
    pub dropout: f64,
}

impl DecoderConfig {
    pub fn new(hidden_dim: usize, heads: usize, ffn_dim: usize, vocab_size: usize) -> Self {
        Self {
            num_layers: 6,
            hidden_dim,
            heads,
            ffn_dim,
            vocab_size,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= FIRST_TOKEN {
            return Err(PdsError::config(format!(
                "vocab_size {} leaves no room for tokens beyond PAD/BOS/EOS",
                self.vocab_size
            )));
        }
        if self.hidden_dim == 0 || !self.hidden_dim.is_multiple_of(2) {
            return Err(PdsError::config(format!(
                "decoder width {} must be positive and even",
                self.hidden_dim
            )));
        }
        if self.heads == 0 || !self.hidden_dim.is_multiple_of(self.heads) {
            return Err(PdsError::config(format!(
                "decoder width {} not divisible by {} heads",
                self.hidden_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Padded token ids `(batch, time)` with per-item lengths.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub time: usize,
    pub lengths: Vec<usize>,
}

impl TokenBatch {
    pub fn from_sequences(seqs: &[Vec<usize>]) -> Result<Self> {
        if seqs.is_empty() || seqs.iter().any(|s| s.is_empty()) {
            return Err(PdsError::config("empty target sequence"));
        }
        let time = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = vec![PAD; seqs.len() * time];
        for (b, s) in seqs.iter().enumerate() {
            ids[b * time..b * time + s.len()].copy_from_slice(s);
        }
        Ok(Self {
            ids,
            batch: seqs.len(),
            time,
            lengths: seqs.iter().map(Vec::len).collect(),
        })
    }

    /// Decoder inputs `BOS y` and targets `y EOS` for teacher forcing.
    pub fn teacher_forcing(seqs: &[Vec<usize>]) -> Result<(TokenBatch, TokenBatch)> {
        let inputs: Vec<Vec<usize>> = seqs
            .iter()
            .map(|s| std::iter::once(BOS).chain(s.iter().copied()).collect())
            .collect();
        let targets: Vec<Vec<usize>> = seqs
            .iter()
            .map(|s| s.iter().copied().chain(std::iter::once(EOS)).collect())
            .collect();
        Ok((
            Self::from_sequences(&inputs)?,
            Self::from_sequences(&targets)?,
        ))
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_norm: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub cross_norm: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub embedding: ParamId,
    pub input_proj: Option<Linear>,
    pub layers: Vec<DecoderLayer>,
    pub final_norm: LayerNorm,
    pub output: Linear,
}

/// Logits `(batch, time, vocab)` and, if requested, cross-attention
/// weights `(layers, batch, heads, time, memory_time)`.
pub struct DecoderOutput<V> {
    pub logits: V,
    pub cross_attention: Option<Tensor>,
}

fn stack(parts: Vec<Tensor>) -> Result<Tensor> {
    let inner = parts[0].shape().to_vec();
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(&inner);
    let data = parts.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::new(shape, data)
}

impl Decoder {
    /// `memory_dim` is the encoder output width; a projection is added when it differs.
    pub fn new(
        config: DecoderConfig,
        memory_dim: usize,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let embedding = store.register(
            "decoder.embedding",
            uniform(&[config.vocab_size, d], 1.0 / (d as f64).sqrt(), rng),
        )?;
        let input_proj = if memory_dim != d {
            Some(Linear::new(
                store,
                "decoder.input_proj",
                memory_dim,
                d,
                true,
                rng,
            )?)
        } else {
            None
        };
        let layers = (0..config.num_layers)
            .map(|l| {
                let name = format!("decoder.layer{l}");
                Ok(DecoderLayer {
                    self_norm: LayerNorm::new(store, &format!("{name}.self_norm"), d)?,
                    self_attn: MultiHeadAttention::new(
                        store,
                        &format!("{name}.self_attn"),
                        d,
                        d,
                        config.heads,
                        rng,
                    )?,
                    cross_norm: LayerNorm::new(store, &format!("{name}.cross_norm"), d)?,
                    cross_attn: MultiHeadAttention::new(
                        store,
                        &format!("{name}.cross_attn"),
                        d,
                        d,
                        config.heads,
                        rng,
                    )?,
                    ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), d)?,
                    ffn: FeedForward::new(
                        store,
                        &format!("{name}.ffn"),
                        d,
                        config.ffn_dim,
                        Activation::Relu,
                        config.dropout,
                        rng,
                    )?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            final_norm: LayerNorm::new(store, "decoder.final_norm", d)?,
            output: Linear::new(store, "decoder.output", d, config.vocab_size, true, rng)?,
            config,
            embedding,
            input_proj,
            layers,
        })
    }

    pub fn forward<'p, B: Backend<'p>>(
        &self,
        b: &mut B,
        memory: &B::V,
        memory_lengths: &[usize],
        inputs: &TokenBatch,
        keep_cross_attention: bool,
    ) -> Result<DecoderOutput<B::V>>
    where
        B::V: Clone,
    {
        if inputs.time == 0 {
            return Err(PdsError::config("empty target sequence"));
        }
        let (mb, _, _) = b.value(memory).btc()?;
        if mb != inputs.batch || memory_lengths.len() != mb {
            return Err(PdsError::config(
                "decoder memory and targets disagree on batch size",
            ));
        }
        let d = self.config.hidden_dim;
        let memory = match &self.input_proj {
            Some(p) => p.forward(b, memory)?,
            None => memory.clone(),
        };
        let table = b.param(self.embedding);
        let x = b.embedding(&table, &inputs.ids, inputs.batch, inputs.time)?;
        let x = b.scale(x, (d as f64).sqrt());
        let x = b.add_const(x, &sinusoidal_pe(inputs.time, d)?)?;
        let mut x = b.dropout(x, self.config.dropout)?;
        let mut weights = Vec::new();
        for layer in &self.layers {
            let h = layer.self_norm.forward(b, &x)?;
            let (h, _) = layer
                .self_attn
                .forward(b, &h, &h, &inputs.lengths, true, false)?;
            let h = b.dropout(h, self.config.dropout)?;
            x = b.add(x, &h)?;
            let h = layer.cross_norm.forward(b, &x)?;
            let (h, w) = layer.cross_attn.forward(
                b,
                &h,
                &memory,
                memory_lengths,
                false,
                keep_cross_attention,
            )?;
            if let Some(w) = w {
                weights.push(w);
            }
            let h = b.dropout(h, self.config.dropout)?;
            x = b.add(x, &h)?;
            let h = layer.ffn_norm.forward(b, &x)?;
            let h = layer.ffn.forward(b, &h)?;
            let h = b.dropout(h, self.config.dropout)?;
            x = b.add(x, &h)?;
        }
        let x = self.final_norm.forward(b, &x)?;
        let logits = self.output.forward(b, &x)?;
        let cross_attention = if keep_cross_attention && !weights.is_empty() {
            Some(stack(weights)?)
        } else {
            None
        };
        Ok(DecoderOutput {
            logits,
            cross_attention,
        })
    }

    /// Argmax decoding until every item has produced EOS or `max_len` tokens.
    /// The returned sequences exclude BOS and EOS.
    pub fn greedy_decode(
        &self,
        store: &ParamStore,
        memory: &Tensor,
        memory_lengths: &[usize],
        max_len: usize,
    ) -> Result<Vec<Vec<usize>>> {
        let batch = memory.dim(0);
        let mut seqs: Vec<Vec<usize>> = vec![vec![BOS]; batch];
        let mut done = vec![false; batch];
        let v = self.config.vocab_size;
        for _ in 0..max_len {
            if done.iter().all(|&d| d) {
                break;
            }
            let inputs = TokenBatch::from_sequences(&seqs)?;
            let mut b = Eval::new(store);
            let mem = b.constant(memory.clone());
            let out = self.forward(&mut b, &mem, memory_lengths, &inputs, false)?;
            let logits = out.logits.as_ref();
            for (i, seq) in seqs.iter_mut().enumerate() {
                if done[i] {
                    continue;
                }
                let r = i * inputs.time + seq.len() - 1;
                let row = &logits.data()[r * v..(r + 1) * v];
                let next = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(k, _)| k)
                    .unwrap_or(EOS);
                if next == EOS {
                    done[i] = true;
                } else {
                    seq.push(next);
                }
            }
        }
        Ok(seqs.into_iter().map(|s| s[1..].to_vec()).collect())
    }
}
