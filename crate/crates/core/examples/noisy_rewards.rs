//! Noisy returns versus perfect information.
//!
//! ```text
//! cargo run --release --example noisy_rewards
//! ```
//!
//! In noisy mode the realised return is the predictor plus independent noise.
//! The reward an agent trains on becomes very noisy, while the "true" columns,
//! computed with the predictor in place of the return, stay comparable with
//! the noiseless environment.

use detpo::config::Preset;
use detpo::harness::evaluate;
use detpo::reference::{solve_reference, ReferenceSearch};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for preset in [Preset::LqrPaper, Preset::LqrPaperNoisy, Preset::MaxposPaper, Preset::MaxposPaperNoisy] {
        let env = preset.env();
        let (reference, _) = solve_reference(&env, &ReferenceSearch::default())?;
        let r = evaluate(&reference, &reference, &env, 10, 5000, 1)?;
        println!(
            "{:<20} σ_r = {:>4}: reward {:8.4}  reward_true {:7.4}  pnl {:8.4}  pnl_true {:7.4}",
            preset.name(),
            env.sigma_r,
            r.mean_reward,
            r.mean_reward_true,
            r.mean_pnl,
            r.mean_pnl_true
        );
    }
    Ok(())
}
