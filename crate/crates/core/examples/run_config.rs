//! Drive the command layer from a TOML config instead of the binary.
//!
//! ```text
//! cargo run --release --example run_config -- [out_dir]
//! ```
//!
//! Trains two tiny agents on the LQR preset, evaluates them against the
//! closed-form reference and exports policy slices and grids. The same
//! config, echoed as `config.toml`, reproduces the run through
//! `detpo train --config <out_dir>/config.toml`.

use std::path::PathBuf;

use detpo::cli::{cmd_eval, cmd_policy_export, cmd_train, CheckpointSource};
use detpo::config::RunConfig;

const CONFIG: &str = r#"
preset = "lqr-paper"

[agent]
pretrain_steps = 500
episodes = 3
episode_length = 200
batch_size = 16
hidden_layers = [16, 16]
eval_every = 1
eval_episodes = 1
eval_horizon = 500

[eval]
n_episodes = 2
horizon = 1000
seeds = [0, 1]
"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "run_config_out".into()));
    let cfg = RunConfig::from_toml_str(CONFIG)?;

    for seed in cmd_train(&cfg, &out, None, false)? {
        println!("{}", seed.render());
    }
    let run = CheckpointSource::Run(out.clone());
    let eval = cmd_eval(&cfg, &run, &out, None)?;
    print!("{}", eval.table);
    let export = cmd_policy_export(&cfg, Some(&run), &out)?;
    println!("exported seed {:?} and the reference to {}", export.agent_seed, out.display());
    Ok(())
}
