//! Reverse-mode gradients against central finite differences.
//!
//! ```text
//! cargo run --release --example gradient_check -- [n_nets]
//! ```

use detpo::nn::{gradient_check, Activation, MlpNet, OutputActivation};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let n_nets: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(20);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for k in 0..n_nets {
        let depth = rng.random_range(1..=3);
        let mut sizes = vec![rng.random_range(1..=4)];
        sizes.extend((0..depth).map(|_| rng.random_range(1..=8)));
        sizes.push(rng.random_range(1..=3));
        let hidden = if k % 2 == 0 { Activation::Relu } else { Activation::Tanh };
        let output = if k % 3 == 0 { OutputActivation::ScaledTanh(3.0) } else { OutputActivation::Linear };
        let net = MlpNet::new(&sizes, hidden, output, &mut rng)?;
        let input: Vec<f64> = (0..sizes[0]).map(|_| rng.random_range(-2.0..2.0)).collect();
        let out_grad: Vec<f64> = (0..*sizes.last().unwrap()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let check = gradient_check(&net, &input, &out_grad, 1e-5, 1e-6)?;
        worst = worst.max(check.max_error());
        println!(
            "{sizes:?} {hidden:?}: params {:.2e}  inputs {:.2e}",
            check.max_param_error, check.max_input_error
        );
    }
    println!("worst relative error over {n_nets} nets: {worst:.2e}");
    Ok(())
}
