//! Closed-form optimal policy for quadratic costs and quadratic risk.
//!
//! ```text
//! cargo run --release --example lqr_reference -- [gamma_cost] [lambda_risk] [rho]
//! ```
//!
//! Prints the smoothing factor ω, the predictor discount ψ and the out-of-sample
//! reward and PnL of the policy `a = −ωπ + ωψp/(2λ)`, then writes a short
//! trajectory to `lqr_trajectory.csv`.

use detpo::env::{rollout, EnvParams};
use detpo::harness::evaluate;
use detpo::reference::solve_lqr;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<f64> = std::env::args().skip(1).map(|s| s.parse()).collect::<Result<_, _>>()?;
    let gamma_cost = args.first().copied().unwrap_or(1.0);
    let lambda_risk = args.get(1).copied().unwrap_or(0.3);
    let rho = args.get(2).copied().unwrap_or(0.9);

    let sol = solve_lqr(gamma_cost, lambda_risk, rho)?;
    let (k_pi, k_p) = sol.gains();
    println!("Γ = {gamma_cost}, λ = {lambda_risk}, ρ = {rho}");
    println!("ω = {:.6}  ψ = {:.6}", sol.omega, sol.psi);
    println!("a = -{k_pi:.6}·π + {k_p:.6}·p");

    let env = EnvParams::lqr(gamma_cost, lambda_risk, rho);
    let report = evaluate(&sol, &sol, &env, 10, 5000, 1)?;
    println!(
        "10 episodes x 5000 steps: reward {:.4}  pnl {:.4}",
        report.mean_reward, report.mean_pnl
    );

    let path = "lqr_trajectory.csv";
    rollout(&sol, &env.with_seed(7), 500)?.save_csv(path)?;
    println!("wrote {path}");
    Ok(())
}
