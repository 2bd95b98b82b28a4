//! Finite-difference check of a whole micro model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::config::FEATURE_DIM;
use crate::encoder::{BlockType, EncoderConfig, Preset};
use crate::error::Result;
use crate::model::{ModelConfig, PdsModel};
use crate::numerics::{grad_check, Backend, GradCheckConfig, GradCheckReport, Tensor};

pub const MICRO_DIM: usize = 8;
/// Frames in the longer of the two items; the shorter one ends mid-block.
pub const MICRO_FRAMES: usize = 64;
/// Central-difference step for whole-model checks. Exactly-zero gradients
/// (key biases, biases ahead of a normalization) show roundoff of about
/// `eps * |loss| / step`, so the step is kept large; extrapolation removes
/// the truncation error that would otherwise come with it.
pub const MODEL_CHECK_STEP: f64 = 1e-3;

/// Default settings for [`model_grad_check`].
pub fn model_check_config(seed: u64) -> GradCheckConfig {
    GradCheckConfig {
        step: MODEL_CHECK_STEP,
        seed,
        ..Default::default()
    }
}

/// Encoder plus fusion at width 8 with one layer per stage.
pub fn micro_model_config(preset: Preset, block: BlockType) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig::micro(preset, MICRO_DIM, Some(1)).with_block(block),
        fusion: true,
        decoder: None,
    }
}

/// Checks gradients of a random projection of the fused output with
/// respect to every parameter and the input features.
pub fn model_grad_check(
    preset: Preset,
    block: BlockType,
    seed: u64,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut model = PdsModel::new(micro_model_config(preset, block), seed)?;
    let ratio = model.config.encoder.ratio();
    let lengths = vec![MICRO_FRAMES, MICRO_FRAMES - ratio / 2 - 1];
    let t = MICRO_FRAMES;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(17));
    let x = Tensor::from_fn(vec![2, t, FEATURE_DIM], |_| rng.random_range(-1.0..1.0));
    let t_out = t.div_ceil(ratio);
    let proj = Tensor::from_fn(vec![2, t_out, MICRO_DIM], |_| rng.random_range(-1.0..1.0));
    let mut inputs = vec![x];
    let (encoder, fusion) = (&model.encoder, model.fusion.as_ref());
    grad_check(&mut model.store, &mut inputs, cfg, |tape, xs| {
        let enc = PdsModel::forward_encoder(encoder, fusion, tape, &xs[0], &lengths, None)?;
        tape.dot_const(&enc.output, &proj)
    })
}
