//! Encoder, optional fusion and optional decoder sharing one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{Decoder, DecoderConfig};
use crate::encoder::{Capture, Encoder, EncoderConfig, FeatureBatch, LevelOutput, Preset};
use crate::error::Result;
use crate::fusion::Fusion;
use crate::numerics::{Backend, Eval, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub fusion: bool,
    pub decoder: Option<DecoderConfig>,
}

impl ModelConfig {
    /// Encoder only, fusion as the preset prescribes.
    pub fn encoder_only(preset: Preset, encoder: EncoderConfig) -> Self {
        Self {
            encoder,
            fusion: preset.default_fusion(),
            decoder: None,
        }
    }
}

/// Encoder output: every stage plus the representation handed downstream.
#[derive(Clone, Debug)]
pub struct Encoded<V = Tensor> {
    pub levels: Vec<LevelOutput<V>>,
    /// The fused representation, or the top stage when fusion is off.
    pub output: V,
    pub lengths: Vec<usize>,
}

#[derive(Debug)]
pub struct PdsModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub fusion: Option<Fusion>,
    pub decoder: Option<Decoder>,
}

impl PdsModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(config.encoder.clone(), &mut store, &mut rng)?;
        let fusion = if config.fusion {
            Some(Fusion::new(&config.encoder, &mut store, &mut rng)?)
        } else {
            None
        };
        let decoder = match &config.decoder {
            Some(dc) => Some(Decoder::new(
                dc.clone(),
                config.encoder.output_dim(),
                &mut store,
                &mut rng,
            )?),
            None => None,
        };
        Ok(Self {
            config,
            store,
            encoder,
            fusion,
            decoder,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn forward_encoder<'p, B: Backend<'p>>(
        encoder: &Encoder,
        fusion: Option<&Fusion>,
        b: &mut B,
        x: &B::V,
        lengths: &[usize],
        trace: Option<&mut Vec<Capture>>,
    ) -> Result<Encoded<B::V>>
    where
        B::V: Clone,
    {
        let levels = encoder.forward(b, x, lengths, trace)?;
        let top = levels.last().expect("encoder has at least one stage");
        let out_lengths = top.lengths.clone();
        let output = match fusion {
            Some(f) => f.fuse(b, &levels)?,
            None => top.rep.clone(),
        };
        Ok(Encoded {
            levels,
            output,
            lengths: out_lengths,
        })
    }

    pub fn encode_with<'p, B: Backend<'p>>(
        &self,
        b: &mut B,
        x: &B::V,
        lengths: &[usize],
        trace: Option<&mut Vec<Capture>>,
    ) -> Result<Encoded<B::V>>
    where
        B::V: Clone,
    {
        Self::forward_encoder(&self.encoder, self.fusion.as_ref(), b, x, lengths, trace)
    }

    /// Eval-mode encoding with owned outputs.
    pub fn encode(&self, batch: &FeatureBatch) -> Result<Encoded> {
        self.encode_traced(batch, None)
    }

    pub fn encode_traced(
        &self,
        batch: &FeatureBatch,
        trace: Option<&mut Vec<Capture>>,
    ) -> Result<Encoded> {
        let mut b = Eval::new(&self.store);
        let x = b.constant(batch.features.clone());
        let enc = self.encode_with(&mut b, &x, &batch.lengths, trace)?;
        Ok(Encoded {
            levels: enc
                .levels
                .into_iter()
                .map(|l| LevelOutput {
                    rep: l.rep.into_owned(),
                    lengths: l.lengths,
                    nominal_ratio: l.nominal_ratio,
                })
                .collect(),
            output: enc.output.into_owned(),
            lengths: enc.lengths,
        })
    }

    /// Eval-mode encoding that keeps only the final output; intermediate
    /// stage tensors are released as soon as they are consumed.
    pub fn encode_output(&self, batch: &FeatureBatch) -> Result<(Tensor, Vec<usize>)> {
        let mut b = Eval::new(&self.store);
        let x = b.constant(batch.features.clone());
        let enc = self.encode_with(&mut b, &x, &batch.lengths, None)?;
        drop(enc.levels);
        Ok((enc.output.into_owned(), enc.lengths))
    }
}
