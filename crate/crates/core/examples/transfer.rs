//! Pretrains a backbone, then compares a linear probe with the dual adapter.
//!
//! `cargo run --release --example transfer -- [seed]`

use utuning::experiment::{run_transfer, TransferSettings};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = std::env::args()
        .nth(1)
        .map(|s| s.parse())
        .transpose()?
        .unwrap_or(0);
    let r = run_transfer(seed, &TransferSettings::default())?;
    println!("pretrain test acc {:.3}", r.pretrain_test_acc);
    println!("linear probe      {:.3}", r.probe_acc);
    println!("dual adapter      {:.3}", r.dual_acc);
    println!("gap {:+.1} points in {:.0}s", r.gap_points(), r.seconds);
    Ok(())
}
