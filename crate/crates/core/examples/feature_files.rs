//! Write, read and batch a feature file.
//!
//! `cargo run --release --example feature_files`

use pds::harness::{generate_synthetic_features, FeatureFile, LengthDist};

fn main() -> pds::Result<()> {
    let file = generate_synthetic_features(6, LengthDist::Uniform { min: 50, max: 400 }, 9)?;
    let path = std::env::temp_dir().join("pds-example.pdsf");
    file.save(&path)?;
    let loaded = FeatureFile::load(&path)?;
    println!("{} items, frames {:?}", loaded.len(), loaded.frame_counts());
    println!("transcript lengths {:?}", loaded.transcript_lengths);
    println!(
        "rewrite is byte-identical: {}",
        loaded.to_bytes()? == std::fs::read(&path)?
    );
    for batch in loaded.batches(4)? {
        println!(
            "batch {:?} lengths {:?}",
            batch.features.shape(),
            batch.lengths
        );
    }
    std::fs::remove_file(&path)?;
    Ok(())
}
