//! Summed cross-attention per encoder position for a randomly initialised decoder.
//!
//! `cargo run --release --example attention`

use pds::analysis::{attention_weight_distribution, ATTENTION_BIN_WIDTH};
use pds::decoder::{DecoderConfig, TokenBatch, FIRST_TOKEN};
use pds::encoder::{EncoderConfig, Preset};
use pds::harness::{generate_synthetic_features, LengthDist};
use pds::model::{ModelConfig, PdsModel};
use pds::numerics::{Backend, Eval};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> pds::Result<()> {
    let file = generate_synthetic_features(
        4,
        LengthDist::Uniform {
            min: 400,
            max: 1200,
        },
        4,
    )?;
    let batch = file.batch(&[0, 1, 2, 3])?;
    let vocab = 100;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let seqs: Vec<Vec<usize>> = file
        .transcript_lengths
        .as_ref()
        .expect("synthetic files carry transcript lengths")
        .iter()
        .map(|&n| {
            (0..n)
                .map(|_| rng.random_range(FIRST_TOKEN..vocab))
                .collect()
        })
        .collect();
    let (inputs, _) = TokenBatch::teacher_forcing(&seqs)?;

    for preset in [
        Preset::Stack4,
        Preset::PdsBase8,
        Preset::PdsBase16,
        Preset::PdsBase32,
    ] {
        let config = ModelConfig {
            encoder: EncoderConfig::micro(preset, 32, None),
            fusion: preset.default_fusion(),
            decoder: Some(DecoderConfig::new(32, 4, 64, vocab)),
        };
        let model = PdsModel::new(config, 4)?;
        let enc = model.encode(&batch)?;
        let mut b = Eval::new(&model.store);
        let memory = b.constant(enc.output.clone());
        let decoder = model.decoder.as_ref().expect("decoder configured");
        let out = decoder.forward(&mut b, &memory, &enc.lengths, &inputs, true)?;
        let weights = out.cross_attention.expect("weights kept");
        let stats = attention_weight_distribution(
            &weights,
            &enc.lengths,
            &inputs.lengths,
            None,
            ATTENTION_BIN_WIDTH,
        )?;
        let below = stats.position_sums.iter().filter(|&&s| s < 0.1).count() as f64
            / stats.position_sums.len() as f64;
        println!(
            "{:<12} positions {:>5}  mass {:.1} = {} targets  mean {:.3}  below 0.1: {:.0}%",
            preset.name(),
            stats.position_sums.len(),
            stats.total_mass,
            stats.target_positions,
            stats.mean_position_sum(),
            100.0 * below
        );
    }
    Ok(())
}
