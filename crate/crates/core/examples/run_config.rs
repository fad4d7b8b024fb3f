//! Loads a trial configuration and runs the same pipeline as
//! `callslot simulate`, writing logs and reports under the system temp dir.
//!
//!     cargo run --release --example run_config -- crates/core/examples/trial.toml

use std::path::PathBuf;

use callslot::cli::{cmd_simulate, TrialConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("examples/trial.toml"));
    let config = TrialConfig::load(&path)?;
    let out = std::env::temp_dir().join("callslot-example");
    let report = cmd_simulate(&config, &out)?;
    print!("{}", report.summary_table());
    println!("\nartifacts in {}", out.display());
    Ok(())
}
