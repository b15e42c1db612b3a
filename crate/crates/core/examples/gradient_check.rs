//! Finite-difference check of the training gradient (custom conv op, loss,
//! validity mask) on a small stand-in network.
//!
//! cargo run --release --example gradient_check

use clickseg::model::stand_in_gradient_check;

fn main() -> anyhow::Result<()> {
    let report = stand_in_gradient_check(11, 1e-5)?;
    println!("{} parameters checked on an 8x8 input", report.parameters);
    println!("max relative error {:.2e} (worst: {})", report.max_rel_error, report.worst_parameter);
    println!("{}", if report.passes(1e-3) { "ok" } else { "FAILED" });
    Ok(())
}
