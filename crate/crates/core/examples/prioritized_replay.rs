//! Prioritized replay: sampling frequencies, importance weights and priority updates.
//!
//! ```text
//! cargo run --release --example prioritized_replay
//! ```

use detpo::env::Transition;
use detpo::replay::{anneal_beta, PerConfig, PrioritizedBuffer, PriorityMode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn transition(tag: f64) -> Transition {
    Transition {
        state: [tag, 0.0],
        action: 0.0,
        reward: tag,
        next_state: [0.0, 0.0],
        done: false,
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut buffer = PrioritizedBuffer::new(PerConfig {
        capacity: 8,
        ..PerConfig::default()
    })?;
    for (i, td) in [0.1, 0.5, 1.0, 2.0, 4.0].into_iter().enumerate() {
        buffer.insert(transition(i as f64), PriorityMode::Explicit(td));
    }

    let probs = buffer.probabilities();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let draws = 100_000;
    let mut counts = vec![0usize; buffer.len()];
    for _ in 0..draws / 5 {
        for i in buffer.sample(5, 0.4, &mut rng)?.indices {
            counts[i] += 1;
        }
    }
    println!("{:>4} {:>10} {:>10} {:>10}", "slot", "priority", "P(i)", "observed");
    for i in 0..buffer.len() {
        println!(
            "{i:>4} {:>10.3} {:>10.4} {:>10.4}",
            buffer.priority(i).unwrap(),
            probs[i],
            counts[i] as f64 / draws as f64
        );
    }

    let batch = buffer.sample(5, 1.0, &mut rng)?;
    println!("β = 1 importance weights (max-normalised):");
    for (i, w) in batch.indices.iter().zip(&batch.is_weights) {
        println!("  slot {i}: {w:.4}");
    }

    buffer.update_priorities(&batch.indices, &vec![0.0; batch.len()])?;
    println!("after zero TD errors the sampled slots drop to priority ε:");
    for &i in &batch.indices {
        println!("  slot {i}: {:.4}", buffer.priority(i).unwrap());
    }

    let total = 1000;
    println!(
        "β schedule over {total} steps: {:.2} → {:.2} → {:.2}",
        anneal_beta(0, total, 0.4),
        anneal_beta(total / 2, total, 0.4),
        anneal_beta(total, total, 0.4)
    );
    Ok(())
}
