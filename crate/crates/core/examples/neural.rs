//! Fit a small MLP to sin(x) with Adam.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use semcom::neural::{Activation, AdamConfig, AdamState, Mlp};

fn main() -> semcom::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut net = Mlp::new(&[1, 32, 32, 1], Activation::Tanh, Activation::Identity, &mut rng)?;
    let mut adam = AdamState::new(AdamConfig::with_learning_rate(3e-3), &net);
    for step in 0..=3000 {
        let x = Array2::from_shape_fn((64, 1), |_| rng.random_range(-3.0..3.0));
        let y = x.mapv(f64::sin);
        let tape = net.forward_tape(x.view())?;
        let diff = tape.output() - &y;
        if step % 500 == 0 {
            println!("step {step:>4}: mse {:.2e}", diff.mapv(|d| d * d).mean().unwrap_or(0.0));
        }
        let (grads, _) = net.backward(&tape, (diff * (2.0 / 64.0)).view())?;
        adam.step(&mut net, &grads)?;
    }
    for x in [-2.0, 0.0, 1.0] {
        println!("f({x}) = {:.4}, sin = {:.4}", net.forward_one(&[x])?[0], f64::sin(x));
    }
    Ok(())
}
