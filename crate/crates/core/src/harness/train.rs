//! Adam and two toy tasks that exercise the full encoder, fusion and decoder.
//!
//! * `copy`: each token of a random sequence is rendered as a run of noisy
//!   frames carrying that token's feature pattern; the decoder must emit the
//!   sequence back through cross-attention.
//! * `classify`: the same inputs, but a linear head on the fused encoder
//!   output labels every output unit with the token it covers.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use super::report::LossRecord;
use crate::decoder::{Decoder, DecoderConfig, TokenBatch, FIRST_TOKEN};
use crate::encoder::config::FEATURE_DIM;
use crate::encoder::{BlockType, EncoderConfig, FeatureBatch, Preset};
use crate::error::{PdsError, Result};
use crate::fusion::StageWeight;
use crate::layers::Linear;
use crate::model::{ModelConfig, PdsModel};
use crate::numerics::{Backend, Gradients, ParamStore, Tape, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-8;
/// Widest model the toy trainer accepts.
pub const MAX_TOY_DIM: usize = 64;
/// Steps averaged at each end of the loss curve.
pub const LOSS_WINDOW: usize = 10;

/// Adam with a constant learning rate.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (id, g) in grads.params() {
            let (m, v) = self.moments[id.index()]
                .get_or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let p = store.get_mut(id).data_mut();
            for i in 0..g.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToyTask {
    Copy,
    PerUnitClassification,
}

impl FromStr for ToyTask {
    type Err = PdsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Self::Copy),
            "classify" | "per-unit-classification" => Ok(Self::PerUnitClassification),
            other => Err(PdsError::config(format!(
                "unknown toy task {other:?} (expected copy or per-unit-classification)"
            ))),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ToyConfig {
    pub task: ToyTask,
    pub preset: Preset,
    pub block_type: BlockType,
    pub dim: usize,
    pub layers_per_stage: usize,
    pub decoder_layers: usize,
    /// Distinct real tokens.
    pub symbols: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub batch_size: usize,
    /// Fixed training batches, cycled in order.
    pub num_batches: usize,
    /// Unseen batches scored by greedy decoding after training (copy task only).
    pub held_out_batches: usize,
    pub noise: f64,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl ToyConfig {
    pub fn new(task: ToyTask) -> Self {
        Self {
            task,
            preset: Preset::PdsBase8,
            block_type: BlockType::Transformer,
            dim: 32,
            layers_per_stage: 1,
            decoder_layers: 1,
            symbols: 8,
            min_tokens: 3,
            max_tokens: 8,
            batch_size: 8,
            num_batches: 64,
            held_out_batches: 4,
            noise: 0.1,
            steps: 2000,
            lr: 2e-3,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim > MAX_TOY_DIM {
            return Err(PdsError::config(format!(
                "toy models are limited to width {MAX_TOY_DIM}"
            )));
        }
        if self.symbols == 0 || self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return Err(PdsError::config(
                "toy task needs symbols and 1 <= min_tokens <= max_tokens",
            ));
        }
        if self.batch_size == 0 || self.num_batches == 0 || self.steps == 0 {
            return Err(PdsError::config(
                "batch_size, num_batches and steps must be positive",
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(PdsError::config(format!(
                "learning rate {} must be finite and non-negative",
                self.lr
            )));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let encoder = EncoderConfig::micro(self.preset, self.dim, Some(self.layers_per_stage))
            .with_block(self.block_type);
        let decoder = (self.task == ToyTask::Copy).then(|| {
            let mut d = DecoderConfig::new(self.dim, 2, 2 * self.dim, FIRST_TOKEN + self.symbols);
            d.num_layers = self.decoder_layers;
            d
        });
        ModelConfig {
            encoder,
            fusion: true,
            decoder,
        }
    }
}

/// One training batch: token sequences and their rendered features.
#[derive(Clone, Debug)]
pub struct ToyBatch {
    /// Symbol indices in `0..symbols`.
    pub sequences: Vec<Vec<usize>>,
    pub features: FeatureBatch,
}

fn render_batches(
    cfg: &ToyConfig,
    patterns: &[Vec<f64>],
    frames_per_token: usize,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ToyBatch>> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..count)
        .map(|_| {
            let sequences: Vec<Vec<usize>> = (0..cfg.batch_size)
                .map(|_| {
                    let n = rng.random_range(cfg.min_tokens..=cfg.max_tokens);
                    (0..n).map(|_| rng.random_range(0..cfg.symbols)).collect()
                })
                .collect();
            let items = sequences
                .iter()
                .map(|seq| {
                    let mut data = Vec::with_capacity(seq.len() * frames_per_token * FEATURE_DIM);
                    for &s in seq {
                        for _ in 0..frames_per_token {
                            data.extend(
                                patterns[s]
                                    .iter()
                                    .map(|&p| p + cfg.noise * normal.sample(rng)),
                            );
                        }
                    }
                    Tensor::new(vec![seq.len() * frames_per_token, FEATURE_DIM], data)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ToyBatch {
                sequences,
                features: FeatureBatch::from_items(&items)?,
            })
        })
        .collect()
}

/// Training and held-out batches. Each symbol is rendered as
/// `frames_per_token` noisy copies of a fixed random pattern; both sets share
/// the patterns but draw their sequences and noise independently.
pub fn make_toy_batches(
    cfg: &ToyConfig,
    frames_per_token: usize,
) -> Result<(Vec<ToyBatch>, Vec<ToyBatch>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0074_6f79);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let patterns: Vec<Vec<f64>> = (0..cfg.symbols)
        .map(|_| (0..FEATURE_DIM).map(|_| normal.sample(&mut rng)).collect())
        .collect();
    let train = render_batches(cfg, &patterns, frames_per_token, cfg.num_batches, &mut rng)?;
    let mut held_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6865_6c64);
    let held_out = render_batches(
        cfg,
        &patterns,
        frames_per_token,
        cfg.held_out_batches,
        &mut held_rng,
    )?;
    Ok((train, held_out))
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainReport {
    pub config: ToyConfig,
    pub losses: Vec<LossRecord>,
    /// Mean loss over the first and last steps.
    pub initial_loss: f64,
    pub final_loss: f64,
    /// `1 - final_loss / initial_loss`.
    pub reduction: f64,
    /// Token accuracy of the last step (teacher forced for the copy task).
    pub accuracy: f64,
    /// Fraction of held-out copy sequences reproduced exactly by greedy decoding.
    pub exact_match: Option<f64>,
    pub initial_fusion_weight: f64,
    pub fusion_weights: Vec<StageWeight>,
}

impl TrainReport {
    /// Largest distance of a fusion weight from its initial value.
    pub fn fusion_weight_shift(&self) -> f64 {
        self.fusion_weights
            .iter()
            .map(|w| (w.weight - self.initial_fusion_weight).abs())
            .fold(0.0, f64::max)
    }
}

fn accuracy(logits: &Tensor, targets: &[usize], lengths: &[usize]) -> f64 {
    let (_, t, v) = logits.btc().expect("logits are (batch, time, vocab)");
    let mut hit = 0;
    let mut total = 0;
    for (b, &len) in lengths.iter().enumerate() {
        for ti in 0..len {
            let r = b * t + ti;
            let row = &logits.data()[r * v..(r + 1) * v];
            let arg = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(k, _)| k)
                .unwrap_or(0);
            hit += usize::from(arg == targets[r]);
            total += 1;
        }
    }
    hit as f64 / total.max(1) as f64
}

fn greedy_exact_match(
    model: &PdsModel,
    dec: &Decoder,
    batches: &[ToyBatch],
    max_len: usize,
) -> Result<f64> {
    let mut hit = 0;
    let mut total = 0;
    for batch in batches {
        let enc = model.encode(&batch.features)?;
        let decoded = dec.greedy_decode(&model.store, &enc.output, &enc.lengths, max_len)?;
        for (out, seq) in decoded.iter().zip(&batch.sequences) {
            hit += usize::from(
                out.len() == seq.len() && out.iter().zip(seq).all(|(&o, &s)| o == s + FIRST_TOKEN),
            );
            total += 1;
        }
    }
    Ok(hit as f64 / total.max(1) as f64)
}

fn mean(v: &[LossRecord]) -> f64 {
    v.iter().map(|r| r.loss).sum::<f64>() / v.len().max(1) as f64
}

/// Trains a fresh micro model on the toy task and returns its loss curve.
///
/// Fails with [`PdsError::Diverged`] on the first non-finite loss.
pub fn train_toy(cfg: &ToyConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let mut model = PdsModel::new(cfg.model_config(), cfg.seed)?;
    let ratio = model.config.encoder.ratio();
    let (batches, held_out) = make_toy_batches(cfg, ratio)?;
    let head = match cfg.task {
        ToyTask::PerUnitClassification => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
            Some(Linear::new(
                &mut model.store,
                "toy.head",
                model.config.encoder.output_dim(),
                cfg.symbols,
                true,
                &mut rng,
            )?)
        }
        ToyTask::Copy => None,
    };
    let fusion = model.fusion.as_ref().expect("toy models use fusion");
    let initial_fusion_weight = 1.0 / fusion.num_levels() as f64;

    let mut adam = Adam::new(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut last_accuracy = 0.0;
    for step in 1..=cfg.steps {
        let batch = &batches[(step - 1) % batches.len()];
        let (loss, grads, acc) = {
            let mut tape = Tape::new(&model.store);
            let x = tape.constant(batch.features.features.clone());
            let enc = PdsModel::forward_encoder(
                &model.encoder,
                model.fusion.as_ref(),
                &mut tape,
                &x,
                &batch.features.lengths,
                None,
            )?;
            let (logits, targets, lengths) = match (&model.decoder, &head) {
                (Some(dec), _) => {
                    let shifted: Vec<Vec<usize>> = batch
                        .sequences
                        .iter()
                        .map(|s| s.iter().map(|&k| k + FIRST_TOKEN).collect())
                        .collect();
                    let (inputs, targets) = TokenBatch::teacher_forcing(&shifted)?;
                    let out = dec.forward(&mut tape, &enc.output, &enc.lengths, &inputs, false)?;
                    (out.logits, targets.ids, targets.lengths)
                }
                (None, Some(head)) => {
                    let t = tape.value(&enc.output).dim(1);
                    let mut ids = vec![0; batch.sequences.len() * t];
                    for (b, s) in batch.sequences.iter().enumerate() {
                        let n = enc.lengths[b].min(s.len());
                        ids[b * t..b * t + n].copy_from_slice(&s[..n]);
                    }
                    (
                        head.forward(&mut tape, &enc.output)?,
                        ids,
                        enc.lengths.clone(),
                    )
                }
                (None, None) => unreachable!("classification always has a head"),
            };
            let loss = tape.cross_entropy(&logits, &targets, &lengths)?;
            let value = tape.value(&loss).item();
            if !value.is_finite() {
                return Err(PdsError::Diverged { step, loss: value });
            }
            let acc = accuracy(tape.value(&logits), &targets, &lengths);
            (value, tape.backward(loss)?, acc)
        };
        adam.step(&mut model.store, &grads);
        losses.push(LossRecord { step, loss });
        last_accuracy = acc;
    }

    let exact_match = match &model.decoder {
        Some(dec) if !held_out.is_empty() => Some(greedy_exact_match(
            &model,
            dec,
            &held_out,
            cfg.max_tokens + 1,
        )?),
        _ => None,
    };
    let w = LOSS_WINDOW.min(losses.len());
    let initial_loss = mean(&losses[..w]);
    let final_loss = mean(&losses[losses.len() - w..]);
    let fusion_weights = model
        .fusion
        .as_ref()
        .expect("toy models use fusion")
        .weights_report(&model.store);
    Ok(TrainReport {
        config: cfg.clone(),
        losses,
        initial_loss,
        final_loss,
        reduction: 1.0 - final_loss / initial_loss,
        accuracy: last_accuracy,
        exact_match,
        initial_fusion_weight,
        fusion_weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store
            .register("w", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap())
            .unwrap();
        let grads = {
            let mut tape = Tape::new(&store);
            let w = tape.param(id);
            let loss = tape
                .dot_const(&w, &Tensor::new(vec![2], vec![3.0, -0.5]).unwrap())
                .unwrap();
            tape.backward(loss).unwrap()
        };
        let mut adam = Adam::new(0.1);
        adam.step(&mut store, &grads);
        // bias-corrected first step is lr * g / (|g| + eps)
        let p = store.get(id).data();
        assert!(
            (p[0] - 0.9).abs() < 1e-7 && (p[1] + 0.9).abs() < 1e-7,
            "{p:?}"
        );
    }

    #[test]
    fn zero_learning_rate_is_flat() {
        let mut cfg = ToyConfig::new(ToyTask::Copy);
        cfg.lr = 0.0;
        cfg.steps = 5;
        cfg.num_batches = 1;
        cfg.dim = 16;
        let report = train_toy(&cfg).unwrap();
        let first = report.losses[0].loss;
        assert!(report.losses.iter().all(|r| r.loss == first));
        assert!(report.fusion_weight_shift() == 0.0);
    }

    #[test]
    fn rendered_lengths_follow_tokens() {
        let cfg = ToyConfig::new(ToyTask::Copy);
        let (batches, held_out) = make_toy_batches(&cfg, 8).unwrap();
        assert_eq!(held_out.len(), cfg.held_out_batches);
        assert_ne!(held_out[0].sequences, batches[0].sequences);
        for b in &batches {
            for (s, &len) in b.sequences.iter().zip(&b.features.lengths) {
                assert_eq!(len, 8 * s.len());
            }
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_step() {
        let mut cfg = ToyConfig::new(ToyTask::PerUnitClassification);
        cfg.noise = f64::NAN;
        cfg.steps = 3;
        cfg.dim = 16;
        let err = train_toy(&cfg).unwrap_err();
        assert!(matches!(err, PdsError::Diverged { step: 1, .. }), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn oversized_model_rejected() {
        let mut cfg = ToyConfig::new(ToyTask::Copy);
        cfg.dim = 128;
        assert!(train_toy(&cfg).is_err());
    }
}
