//! Neighbour similarity of intermediate representations.
//!
//! `cargo run --release --example similarity`

use pds::analysis::{
    representation_similarity, similarity_profile, ProfilePoints, DEFAULT_WINDOWS,
};
use pds::encoder::{EncoderConfig, Preset};
use pds::harness::{generate_synthetic_features, LengthDist};
use pds::model::{ModelConfig, PdsModel};
use pds::numerics::Tensor;

fn main() -> pds::Result<()> {
    // a slowly varying sequence is far more self-similar than noise
    let smooth = Tensor::from_fn(vec![50, 4], |i| {
        ((i / 4) as f64 * 0.1 + (i % 4) as f64).sin()
    });
    let noisy = Tensor::from_fn(vec![50, 4], |i| ((i * 7919) % 13) as f64 - 6.0);
    for w in DEFAULT_WINDOWS {
        println!(
            "window {w}: smooth {:.3}, noisy {:.3}",
            representation_similarity(&smooth, w)?,
            representation_similarity(&noisy, w)?
        );
    }

    let file = generate_synthetic_features(4, LengthDist::Uniform { min: 300, max: 800 }, 2)?;
    let batch = file.batch(&[0, 1, 2, 3])?;
    for preset in [Preset::Stack4, Preset::PdsBase16] {
        let model = PdsModel::new(
            ModelConfig::encoder_only(preset, EncoderConfig::micro(preset, 32, None)),
            2,
        )?;
        let profile = similarity_profile(&model, &batch, ProfilePoints::AfterEachDownSample, &[1])?;
        println!("\n{preset}, window 1, after each down-sampling:");
        for row in &profile.rows {
            println!("  {:<10} {:.3}", row.point, row.similarity);
        }
    }
    Ok(())
}
