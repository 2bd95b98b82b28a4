//! Finite-difference verification of the primitives and of a whole micro model.
//!
//! `cargo run --release --example gradient_check`

use pds::encoder::{BlockType, Preset};
use pds::harness::gradcheck::model_check_config;
use pds::harness::model_grad_check;
use pds::numerics::opcheck::run_op_checks;

fn main() -> pds::Result<()> {
    for (name, r) in run_op_checks(0)? {
        println!(
            "{name:<22} {}  max rel error {:.2e}",
            if r.passed { "ok  " } else { "FAIL" },
            r.max_rel_error
        );
    }
    for block in [BlockType::Transformer, BlockType::Conformer] {
        let r = model_grad_check(Preset::PdsBase16, block, 0, &model_check_config(0))?;
        println!(
            "pds-base-16/{:<11} {}  max rel error {:.2e} over {} entries",
            block.name(),
            if r.passed { "ok  " } else { "FAIL" },
            r.max_rel_error,
            r.checked
        );
    }
    Ok(())
}
