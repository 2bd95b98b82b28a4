//! Progressive down-sampling encoder.
//!
//! The encoder runs a sequence of stages. Each stage compresses the sequence
//! with a strided convolution and then refines it with context layers. The
//! stacked baseline is the special case where every stage but the last has no
//! context layers.

pub mod blocks;
pub mod config;
pub mod downsample;
pub mod lengths;
pub mod position;

use rand::Rng;

pub use self::blocks::{Block, ConformerBlock, ConvModule, TransformerBlock};
pub use self::config::{growth_layout, BlockType, DimsMode, EncoderConfig, Preset, StageSpec};
pub use self::downsample::DownSample;
pub use self::lengths::{downsampled_lengths, FeatureBatch};
pub use crate::numerics::ValidMask;

use crate::error::{PdsError, Result};
use crate::numerics::{Backend, Eval, ParamStore, Tensor};

/// Output of one stage with its valid lengths.
#[derive(Clone, Debug)]
pub struct LevelOutput<T = Tensor> {
    pub rep: T,
    pub lengths: Vec<usize>,
    /// Product of the strides up to and including this stage.
    pub nominal_ratio: usize,
}

impl<T> LevelOutput<T> {
    pub fn mask(&self, max_len: usize) -> Result<ValidMask> {
        ValidMask::new(self.lengths.clone(), max_len)
    }
}

/// Where an intermediate representation was captured.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TracePoint {
    Input,
    AfterDownSample {
        stage: usize,
    },
    AfterLayer {
        stage: usize,
        layer: usize,
        index: usize,
    },
}

impl TracePoint {
    pub fn label(&self) -> String {
        match self {
            TracePoint::Input => "input".into(),
            TracePoint::AfterDownSample { stage } => format!("ds{}", stage + 1),
            TracePoint::AfterLayer { index, .. } => format!("layer{}", index + 1),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Capture {
    pub point: TracePoint,
    pub rep: Tensor,
    pub lengths: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub downsample: DownSample,
    pub layers: Vec<Block>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub stages: Vec<Stage>,
}

/// Fails with the first item whose length is zero after down-sampling.
pub fn check_lengths(lengths: &[usize], strides: &[usize]) -> Result<()> {
    for (index, (&length, fin)) in lengths
        .iter()
        .zip(downsampled_lengths(lengths, strides))
        .enumerate()
    {
        if fin == 0 {
            return Err(PdsError::ItemTooShort { index, length });
        }
    }
    Ok(())
}

impl Encoder {
    pub fn new(config: EncoderConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut d_in = config.input_dim;
        let mut stages = Vec::with_capacity(config.stages.len());
        for (m, spec) in config.stages.iter().enumerate() {
            let name = format!("encoder.stage{m}");
            let downsample = DownSample::new(store, &format!("{name}.ds"), d_in, spec, rng)?;
            let ffn_dim = config.stage_ffn_dim(m);
            let layers = (0..spec.num_layers)
                .map(|l| {
                    let lname = format!("{name}.layer{l}");
                    Ok(match config.block_type {
                        BlockType::Transformer => Block::Transformer(TransformerBlock::new(
                            store,
                            &lname,
                            spec.hidden_dim,
                            config.heads,
                            ffn_dim,
                            config.dropout,
                            rng,
                        )?),
                        BlockType::Conformer => Block::Conformer(ConformerBlock::new(
                            store,
                            &lname,
                            spec.hidden_dim,
                            config.heads,
                            ffn_dim,
                            config.dropout,
                            rng,
                        )?),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage { downsample, layers });
            d_in = spec.hidden_dim;
        }
        Ok(Self { config, stages })
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Valid lengths after each stage.
    pub fn stage_lengths(&self, lengths: &[usize]) -> Vec<Vec<usize>> {
        let mut cur = lengths.to_vec();
        self.config
            .stages
            .iter()
            .map(|s| {
                cur = downsampled_lengths(&cur, &[s.stride]);
                cur.clone()
            })
            .collect()
    }

    /// Zeroes the residual-branch output projections of every context layer.
    pub fn zero_output_projections(&self, store: &mut ParamStore) {
        for block in self.stages.iter().flat_map(|s| &s.layers) {
            block.zero_output_projections(store);
        }
    }

    /// Runs every stage on `x` of shape `(batch, time, input_dim)` and returns
    /// all per-stage outputs, bottom to top. When `trace` is given, the input,
    /// each down-sampled sequence and each layer output are captured.
    pub fn forward<'p, B: Backend<'p>>(
        &self,
        b: &mut B,
        x: &B::V,
        lengths: &[usize],
        mut trace: Option<&mut Vec<Capture>>,
    ) -> Result<Vec<LevelOutput<B::V>>>
    where
        B::V: Clone,
    {
        let (batch, t, d) = b.value(x).btc()?;
        if d != self.config.input_dim {
            return Err(PdsError::config(format!(
                "input has {d} channels, encoder expects {}",
                self.config.input_dim
            )));
        }
        ValidMask::new(lengths.to_vec(), t)?;
        if lengths.len() != batch {
            return Err(PdsError::config(format!(
                "{} lengths for batch of {batch}",
                lengths.len()
            )));
        }
        check_lengths(lengths, &self.config.strides())?;

        if let Some(tr) = trace.as_deref_mut() {
            tr.push(Capture {
                point: TracePoint::Input,
                rep: b.value(x).clone(),
                lengths: lengths.to_vec(),
            });
        }

        let mut levels = Vec::with_capacity(self.stages.len());
        let mut h = x.clone();
        let mut cur = lengths.to_vec();
        let mut ratio = 1;
        let mut index = 0;
        for (m, stage) in self.stages.iter().enumerate() {
            let stride = stage.downsample.stride;
            cur = downsampled_lengths(&cur, &[stride]);
            ratio *= stride;
            h = stage.downsample.forward(b, &h, &cur)?;
            if let Some(tr) = trace.as_deref_mut() {
                tr.push(Capture {
                    point: TracePoint::AfterDownSample { stage: m },
                    rep: b.value(&h).clone(),
                    lengths: cur.clone(),
                });
            }
            for (l, block) in stage.layers.iter().enumerate() {
                h = block.forward(b, &h, &cur)?;
                if let Some(tr) = trace.as_deref_mut() {
                    tr.push(Capture {
                        point: TracePoint::AfterLayer {
                            stage: m,
                            layer: l,
                            index,
                        },
                        rep: b.value(&h).clone(),
                        lengths: cur.clone(),
                    });
                }
                index += 1;
            }
            levels.push(LevelOutput {
                rep: h.clone(),
                lengths: cur.clone(),
                nominal_ratio: ratio,
            });
        }
        Ok(levels)
    }

    /// Eval-mode forward returning owned tensors.
    pub fn encode(&self, store: &ParamStore, batch: &FeatureBatch) -> Result<Vec<LevelOutput>> {
        let mut b = Eval::new(store);
        let x = b.constant(batch.features.clone());
        let levels = self.forward(&mut b, &x, &batch.lengths, None)?;
        Ok(levels
            .into_iter()
            .map(|l| LevelOutput {
                rep: l.rep.into_owned(),
                lengths: l.lengths,
                nominal_ratio: l.nominal_ratio,
            })
            .collect())
    }
}
