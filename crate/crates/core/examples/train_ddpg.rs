//! Train one DDPG agent and print its learning curve.
//!
//! ```text
//! cargo run --release --example train_ddpg -- [lqr|band|maxpos] [episodes] [seed]
//! ```
//!
//! Every fifth episode the noise-free actor is scored on fresh environments.
//! Training stops early if the position runs away.

use detpo::agent::{train_with_observer, AgentConfig, TrainEvent};
use detpo::env::EnvParams;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let env = match args.first().map(String::as_str).unwrap_or("lqr") {
        "band" => EnvParams::band_paper(),
        "maxpos" => EnvParams::maxpos_paper(),
        _ => EnvParams::lqr_paper(),
    };
    let config = AgentConfig {
        episodes: args.get(1).and_then(|s| s.parse().ok()).unwrap_or(30),
        seed: args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0),
        eval_every: 5,
        ..AgentConfig::default()
    };
    let started = std::time::Instant::now();
    let result = train_with_observer(&env, &config, &mut |e| {
        if let TrainEvent::EpisodeFinished { record } = e {
            let eval = record
                .eval
                .map(|(r, p)| format!("  eval reward {r:8.4}  pnl {p:8.4}"))
                .unwrap_or_default();
            println!(
                "episode {:4}  train reward {:9.4}  pnl {:8.4}  max|pi| {:6.2}{eval}",
                record.episode, record.train_reward, record.train_pnl, record.max_abs_position
            );
        }
    });
    match result {
        Ok(_) => println!("finished in {:.1?}", started.elapsed()),
        Err(e) => println!("stopped: {e}"),
    }
}
