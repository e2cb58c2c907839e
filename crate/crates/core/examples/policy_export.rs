//! Policy slices and grids for plotting.
//!
//! ```text
//! cargo run --release --example policy_export -- [out_dir]
//! ```
//!
//! Writes the band reference and a briefly trained agent as long-format CSVs:
//! slices `position,p,action` at π ∈ {−1, 0, 1} and grids
//! `pi,p,action,action_clipped` over the (π, p) plane.

use std::fs::File;
use std::path::PathBuf;

use detpo::agent::{train, AgentConfig};
use detpo::env::EnvParams;
use detpo::harness::{policy_grid, policy_slice, DEFAULT_SLICE_POSITIONS};
use detpo::reference::{solve_reference, ReferenceSearch};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "policy_export".into()));
    std::fs::create_dir_all(&out)?;
    let env = EnvParams::band_paper();
    let (reference, _) = solve_reference(&env, &ReferenceSearch::default())?;
    let agent = train(&env, &AgentConfig::smoke())?.agent;

    let policies: [(&str, &dyn detpo::env::Policy); 2] = [("reference", &reference), ("agent", &agent)];
    for (name, policy) in policies {
        let slice = policy_slice(policy, &DEFAULT_SLICE_POSITIONS, (-4.0, 4.0), 201);
        let grid = policy_grid(policy, (-3.0, 3.0), (-3.0, 3.0), 121);
        slice.write_csv(File::create(out.join(format!("{name}_slice.csv")))?)?;
        grid.write_csv(File::create(out.join(format!("{name}_grid.csv")))?)?;

        let flat = &slice.actions[1];
        let zeros = flat.iter().filter(|a| a.abs() < 1e-9).count();
        println!("{name}: {zeros} of {} slice points at π = 0 do not trade", flat.len());
    }
    println!("wrote CSVs to {}", out.display());
    Ok(())
}
