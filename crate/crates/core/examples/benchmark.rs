//! Forward-pass timing of several configurations on one batch.
//!
//! `cargo run --release --example benchmark`

use pds::encoder::{EncoderConfig, Preset};
use pds::harness::{generate_synthetic_features, run_benchmark, BenchOptions, LengthDist};
use pds::model::ModelConfig;

fn main() -> pds::Result<()> {
    let file = generate_synthetic_features(4, LengthDist::Fixed { frames: 1000 }, 0)?;
    let batch = file.batch(&[0, 1, 2, 3])?;
    let configs: Vec<(String, ModelConfig)> = [
        Preset::Stack4,
        Preset::PdsBase8,
        Preset::PdsBase16,
        Preset::PdsBase32,
    ]
    .iter()
    .map(|&p| {
        (
            p.name().to_string(),
            ModelConfig::encoder_only(p, EncoderConfig::preset(p, 128)),
        )
    })
    .collect();
    let report = run_benchmark(&configs, &batch, &BenchOptions::default())?;
    println!("input sha256 {}", report.input_sha256);
    for e in &report.entries {
        println!(
            "{:<12} {:>8.1} ms  speedup {:.2}  final length {}",
            e.config,
            e.median_ms.unwrap_or(f64::NAN),
            e.speedup.unwrap_or(f64::NAN),
            e.final_len.unwrap_or(0)
        );
    }
    Ok(())
}
