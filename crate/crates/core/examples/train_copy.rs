//! Train a micro encoder-decoder on the toy copy task.
//!
//! `cargo run --release --example train_copy`

use pds::harness::{train_toy, ToyConfig, ToyTask};

fn main() -> pds::Result<()> {
    let report = train_toy(&ToyConfig::new(ToyTask::Copy))?;
    for r in report.losses.iter().step_by(200) {
        println!("step {:>4}  loss {:.4}", r.step, r.loss);
    }
    println!(
        "loss {:.3} -> {:.3} ({:.0}% lower), held-out exact match {:.3}",
        report.initial_loss,
        report.final_loss,
        100.0 * report.reduction,
        report.exact_match.unwrap_or(0.0)
    );
    for w in &report.fusion_weights {
        println!(
            "fusion weight of stage {}: {:.3} (started at {:.3})",
            w.stage, w.weight, report.initial_fusion_weight
        );
    }
    Ok(())
}
