//! Multi-level fusion: alignment ratios, aligned shapes and stage weights.
//!
//! `cargo run --release --example fusion`

use pds::encoder::{EncoderConfig, Preset};
use pds::fusion::alignment_ratios;
use pds::harness::{generate_synthetic_features, LengthDist};
use pds::model::{ModelConfig, PdsModel};
use pds::numerics::{Backend, Eval};

fn main() -> pds::Result<()> {
    let preset = Preset::PdsBase32;
    println!(
        "{preset} strides {:?}, alignment ratios {:?}",
        preset.strides(),
        alignment_ratios(preset.strides())
    );

    let model = PdsModel::new(
        ModelConfig::encoder_only(preset, EncoderConfig::micro(preset, 32, Some(1))),
        3,
    )?;
    let fusion = model.fusion.as_ref().expect("pds presets fuse by default");
    let file = generate_synthetic_features(
        2,
        LengthDist::Uniform {
            min: 300,
            max: 1500,
        },
        3,
    )?;
    let batch = file.batch(&[0, 1])?;

    let mut b = Eval::new(&model.store);
    let x = b.constant(batch.features.clone());
    let enc = model.encode_with(&mut b, &x, &batch.lengths, None)?;
    let top = enc.levels.last().expect("at least one stage");
    for m in 0..fusion.num_levels() {
        let aligned = fusion.align_level(&mut b, m, &enc.levels[m], top)?;
        println!(
            "stage {m}: {:?} -> aligned {:?}",
            b.value(&enc.levels[m].rep).shape(),
            b.value(&aligned).shape()
        );
    }
    println!("fused {:?}", b.value(&enc.output).shape());
    for w in fusion.weights_report(&model.store) {
        println!("weight of stage {}: {:.4}", w.stage, w.weight);
    }
    Ok(())
}
