//! Recovers a noisy low-rank pickup matrix from half of its cells, picking
//! lambda on a recency holdout first.
//!
//!     cargo run --release --example complete_matrix

use callslot::matcomp::{complete, nuclear_norm, tune_lambda, ObservationSet, SolverSettings};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const USERS: usize = 300;
const SLOTS: usize = 7;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let u = DMatrix::from_fn(USERS, 2, |_, _| rng.gen_range(0.0..1.0));
    let v = DMatrix::from_fn(SLOTS, 2, |_, _| rng.gen_range(0.0..1.0));
    let truth = &u * v.transpose() / 2.0;

    let mut obs = ObservationSet::new(USERS, SLOTS);
    let mut hidden = Vec::new();
    for i in 0..USERS {
        for j in 0..SLOTS {
            if rng.gen_bool(0.5) {
                let noisy = (truth[(i, j)] + rng.gen_range(-0.05..0.05_f64)).clamp(0.0, 1.0);
                obs.insert(i, j, noisy, 1, rng.gen_range(0..35))?;
            } else {
                hidden.push((i, j));
            }
        }
    }

    let s = SolverSettings::default();
    let tuned = tune_lambda(&obs, &s.lambda_grid, s.holdout_fraction, s.tol, s.max_iter)?;
    for score in &tuned.scores {
        println!("lambda {:>6}  holdout rmse {:.4}", score.lambda, score.rmse);
    }
    let fit = complete(&obs, tuned.best_lambda, s.tol, s.max_iter)?;
    let rmse = (hidden
        .iter()
        .map(|&(i, j)| (fit.values[(i, j)] - truth[(i, j)]).powi(2))
        .sum::<f64>()
        / hidden.len() as f64)
        .sqrt();
    println!(
        "\nlambda {} after {} iterations (converged: {})",
        fit.lambda, fit.iterations, fit.converged
    );
    println!("nuclear norm {:.3}, rmse on unobserved cells {rmse:.4}", nuclear_norm(&fit.values));
    Ok(())
}
