//! Train a few seeds briefly, evaluate each against the reference on coupled
//! environments, and print the best / mean / worst / quantile table.
//!
//! ```text
//! cargo run --release --example seed_summary -- [n_seeds]
//! ```

use detpo::agent::{train, AgentConfig, TrainError};
use detpo::env::EnvParams;
use detpo::harness::{evaluate, multi_seed_summary, SeedResult};
use detpo::reference::{solve_reference, ReferenceSearch};
use rayon::prelude::*;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let n_seeds: u64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(4);
    let env = EnvParams::lqr_paper();
    let (reference, _) = solve_reference(&env, &ReferenceSearch::default())?;

    let results: Vec<SeedResult> = (0..n_seeds)
        .into_par_iter()
        .map(|seed| {
            let config = AgentConfig {
                seed,
                ..AgentConfig::smoke()
            };
            let report = match train(&env, &config) {
                Ok(trained) => Some(evaluate(&trained.agent, &reference, &env, 4, 2000, 99).expect("valid env")),
                Err(TrainError::Diverged { .. }) => None,
                Err(e) => panic!("seed {seed}: {e}"),
            };
            SeedResult { seed, report }
        })
        .collect();

    for r in &results {
        match &r.report {
            Some(rep) => println!("seed {}: reward {:.4}  diff {:.4}", r.seed, rep.mean_reward_true, rep.diff_l1),
            None => println!("seed {}: diverged", r.seed),
        }
    }
    println!();
    print!("{}", multi_seed_summary(&results));
    Ok(())
}
