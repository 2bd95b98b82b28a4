//! Stage layouts of every preset and the lengths they produce.
//!
//! `cargo run --release --example presets`

use pds::encoder::{downsampled_lengths, EncoderConfig, Preset};
use pds::harness::RunConfig;
use pds::model::PdsModel;

fn main() -> pds::Result<()> {
    let frames = [3000, 1234, 97];
    println!(
        "{:<12} {:<16} {:<16} {:>6} {:>10}  final lengths of {frames:?}",
        "preset", "strides", "layers", "ratio", "params"
    );
    for p in Preset::ALL {
        let params = PdsModel::new(RunConfig::for_preset(p).model_config()?, 0)?.num_parameters();
        let finals = downsampled_lengths(&frames, p.strides());
        println!(
            "{:<12} {:<16} {:<16} {:>6} {:>9.1}M  {finals:?}",
            p.name(),
            format!("{:?}", p.strides()),
            format!("{:?}", p.layers()),
            p.ratio(),
            params as f64 / 1e6
        );
    }

    // per-stage hidden widths under the growth layouts
    let c = EncoderConfig::preset(Preset::PdsBase16, 256).with_stage_dims(&[120, 168, 240, 360])?;
    let widths: Vec<usize> = c.stages.iter().map(|s| s.hidden_dim).collect();
    println!(
        "\npds-base-16 with custom stage widths {widths:?}, output width {}",
        c.output_dim()
    );
    Ok(())
}
