//! Grid search for the half-width of the no-trade band under linear costs.
//!
//! ```text
//! cargo run --release --example band_grid_search -- [gamma_cost] [lambda_risk]
//! ```
//!
//! Every candidate half-width is scored on the same Monte-Carlo paths, so the
//! printed curve is smooth even at a modest budget.

use detpo::env::EnvParams;
use detpo::reference::{solve_reference, GridSpec, ReferencePolicy, ReferenceSearch};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<f64> = std::env::args().skip(1).map(|s| s.parse()).collect::<Result<_, _>>()?;
    let gamma_cost = args.first().copied().unwrap_or(4.0);
    let lambda_risk = args.get(1).copied().unwrap_or(0.3);
    let env = EnvParams::band(gamma_cost, lambda_risk, 0.9);

    let search = ReferenceSearch {
        episodes: 10,
        band_grid: GridSpec::new(0.0, 2.5, 26),
        ..ReferenceSearch::default()
    };
    let (policy, grid) = solve_reference(&env, &search)?;
    let grid = grid.expect("band references are grid-searched");

    println!("{:>8} {:>10} {:>10}", "b", "reward", "pnl");
    for pt in &grid.points {
        let mark = if pt.param == grid.best_param { " <" } else { "" };
        println!(
            "{:8.3} {:10.4} {:10.4}{mark}",
            pt.param, pt.value.mean_reward, pt.value.mean_pnl
        );
    }
    if let ReferencePolicy::Band(b) = policy {
        println!(
            "best half-width {:.3}: trade only when |π − p/(2λ)| > {:.3}",
            b.half_width, b.half_width
        );
    }
    grid.save_csv("band_grid.csv")?;
    println!("wrote band_grid.csv");
    Ok(())
}
