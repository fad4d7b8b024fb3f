//! Shows how the phased policy's slot distribution sharpens as the
//! temperature decays, then samples recommendations from a fresh state.
//!
//!     cargo run --example boltzmann_policy

use callslot::domain::UserId;
use callslot::policy::{boltzmann_probabilities, PolicyConfig, PolicyKind, PolicyState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = PolicyConfig::of_kind(PolicyKind::PhasedMc);
    let row = [0.42, 0.55, 0.61, 0.48, 0.39, 0.58, 0.44];
    println!("estimated pickup rates {row:?}");
    for phase in 0..6 {
        let tau = config.temperature(phase);
        let p = boltzmann_probabilities(&row, tau);
        let shown: Vec<String> = p.iter().map(|x| format!("{x:.3}")).collect();
        println!("phase {phase} tau {tau:.4}: [{}]", shown.join(", "));
    }

    let state = PolicyState::new((0..5).map(UserId), &config, 3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let picks: Vec<u8> = (0..5)
        .map(|u| state.recommend(&config, UserId(u), 0, &mut rng).map(|s| s.get()))
        .collect::<Result<_, _>>()?;
    println!("\nfirst-day slots from a flat estimate: {picks:?}");
    Ok(())
}
