//! Length statistics and the CTC length precondition.
//!
//! `cargo run --release --example ctc_lengths`

use pds::analysis::{
    ctc_validity_check, invalid_fraction, length_ratio_stats, LENGTH_RATIO_BIN_WIDTH,
};
use pds::encoder::Preset;
use pds::harness::{generate_synthetic_features, LengthDist};

fn main() -> pds::Result<()> {
    for (frames, labels) in [(3000, 100), (3000, 90), (600, 20)] {
        let v = ctc_validity_check(frames, Preset::PdsBase32.strides(), labels);
        println!("{frames} frames, {labels} labels at ratio 32: {v:?}");
    }

    let file = generate_synthetic_features(2000, LengthDist::Uniform { min: 5, max: 3000 }, 6)?;
    let frames = file.frame_counts();
    let labels: Vec<usize> = file
        .transcript_lengths
        .as_ref()
        .expect("synthetic files carry transcript lengths")
        .iter()
        .map(|&l| l as usize)
        .collect();
    let stats = length_ratio_stats(&frames, &labels, LENGTH_RATIO_BIN_WIDTH)?;
    if let Some(mode) = stats.mode_bin() {
        println!(
            "\nframes per token peaks in [{}, {}) with {:.1}% of pairs",
            mode.low, mode.high, mode.pct
        );
    }

    let pairs: Vec<(usize, usize)> = frames.into_iter().zip(labels).collect();
    for p in [
        Preset::Stack4,
        Preset::PdsBase8,
        Preset::PdsBase16,
        Preset::PdsBase32,
    ] {
        println!(
            "{:<12} invalid for {:.2}% of pairs",
            p.name(),
            100.0 * invalid_fraction(&pairs, p.strides())
        );
    }
    Ok(())
}
