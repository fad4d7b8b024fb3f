//! Runs a small two-arm trial on a synthetic population and prints the
//! analysis report.
//!
//!     cargo run --release --example simulate_trial -- 3000 7

use callslot::analysis::{analyze, AnalysisOptions};
use callslot::simworld::{generate_world, run_trial, TrialDesign, WorldConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let n_users = args.next().map(|s| s.parse()).transpose()?.unwrap_or(3000);
    let seed = args.next().map(|s| s.parse()).transpose()?.unwrap_or(7);

    let world = generate_world(&WorldConfig {
        n_users,
        seed,
        ..Default::default()
    })?;
    let design = TrialDesign {
        seed,
        ..Default::default()
    };
    let log = run_trial(&world, &design)?;
    println!("{} call records from {} users\n", log.records().len(), log.users().len());

    let options = AnalysisOptions {
        seed,
        ..Default::default()
    };
    let report = analyze(&log, design.baseline_days, &options)?;
    print!("{}", report.to_text());
    Ok(())
}
