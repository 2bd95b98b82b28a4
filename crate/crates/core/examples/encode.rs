//! Encode a padded batch and inspect every stage.
//!
//! `cargo run --release --example encode`

use pds::encoder::{BlockType, EncoderConfig, Preset};
use pds::harness::{generate_synthetic_features, LengthDist};
use pds::model::{ModelConfig, PdsModel};

fn main() -> pds::Result<()> {
    let file = generate_synthetic_features(3, LengthDist::Uniform { min: 200, max: 900 }, 1)?;
    let batch = file.batch(&[0, 1, 2])?;
    println!(
        "input {:?}, lengths {:?}",
        batch.features.shape(),
        batch.lengths
    );

    for block in [BlockType::Transformer, BlockType::Conformer] {
        let config = ModelConfig {
            encoder: EncoderConfig::micro(Preset::PdsBase16, 64, None).with_block(block),
            fusion: true,
            decoder: None,
        };
        let model = PdsModel::new(config, 7)?;
        let enc = model.encode(&batch)?;
        println!(
            "\n{} blocks, {} parameters",
            block.name(),
            model.num_parameters()
        );
        for (i, level) in enc.levels.iter().enumerate() {
            println!(
                "  stage {i}: {:?} valid {:?}",
                level.rep.shape(),
                level.lengths
            );
        }
        println!("  fused output {:?}", enc.output.shape());
    }
    Ok(())
}
