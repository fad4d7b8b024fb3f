//! Estimates the value of the per-user exploit policy from a uniformly
//! random control arm by importance sampling, and checks it against running
//! that policy for real on the same world.
//!
//!     cargo run --release --example off_policy_replay

use callslot::analysis::{is_value, pooled_pr, CallSet, SlotDistribution};
use callslot::domain::{filter_active, split_by_phase, Arm};
use callslot::policy::{fit_per_user_exploit, PolicyConfig, PolicyKind};
use callslot::simworld::{generate_world, run_trial, TrialDesign, WorldConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let world = generate_world(&WorldConfig {
        n_users: 4000,
        seed: 2,
        ..Default::default()
    })?;
    let design = TrialDesign {
        treatment: PolicyConfig::of_kind(PolicyKind::PerUserExploit),
        seed: 2,
        ..Default::default()
    };
    let log = filter_active(&run_trial(&world, &design)?);
    let (base, int) = split_by_phase(&log, design.baseline_days);
    let control = int.arm(Arm::Control);

    let q = fit_per_user_exploit(&base.arm(Arm::Control));
    let uniform = SlotDistribution::uniform().0;
    for set in [CallSet::First, CallSet::All] {
        let est = is_value(&control, &q, &uniform, set)?;
        println!("V_q over {set:?} calls: {:.4} from {} calls", est.value, est.n_calls);
    }
    println!("control pooled rate:        {:.4}", pooled_pr(&control)?);
    println!("exploit arm pooled rate:    {:.4}", pooled_pr(&int.arm(Arm::Treatment))?);
    Ok(())
}
