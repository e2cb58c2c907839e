//! Bang-bang reference under a hard position cap.
//!
//! ```text
//! cargo run --release --example maxpos_threshold
//! ```
//!
//! The policy jumps to `±M` once `|p|` exceeds a threshold `q` and otherwise
//! holds. Searches `q` and compares reward with PnL: they differ only by the
//! small barrier tail paid while sitting exactly at the cap.

use detpo::env::{rollout, EnvParams};
use detpo::harness::evaluate;
use detpo::reference::{solve_reference, ReferencePolicy, ReferenceSearch};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let env = EnvParams::maxpos_paper();
    let (policy, grid) = solve_reference(&env, &ReferenceSearch::default())?;
    let ReferencePolicy::Threshold(sol) = policy else {
        unreachable!("maxpos references are thresholds")
    };
    let grid = grid.expect("threshold references are grid-searched");
    println!("threshold q = {:.3}, cap M = {}", sol.threshold, sol.maxpos);
    println!("grid-search objective {:.4}", grid.best_value.mean_reward);

    let report = evaluate(&sol, &sol, &env, 10, 5000, 1)?;
    println!(
        "out of sample: reward {:.4}  pnl {:.4}  (gap {:.2e} per step)",
        report.mean_reward,
        report.mean_pnl,
        report.mean_pnl - report.mean_reward
    );

    let traj = rollout(&sol, &env.with_seed(3), 2000)?;
    let at_cap = traj.steps.iter().filter(|s| s.next_pi.abs() == sol.maxpos).count();
    println!("{at_cap} of {} steps end at ±M", traj.len());
    Ok(())
}
