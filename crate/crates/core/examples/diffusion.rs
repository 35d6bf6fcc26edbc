//! Train the diffusion allocator briefly on the ten-object scene and compare
//! its schemes with the Avg and Conf references.
//!
//! ```text
//! cargo run --release --example diffusion -- [episodes]
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use semcom::diffusion::{RewardEnv, SurrogateEnv, Trainer};
use semcom::experiments::{reference_scores, trailing_mean, training_surrogate, ExperimentConfig};

fn main() -> semcom::Result<()> {
    let episodes: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(500);
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let cfg = ExperimentConfig::load(path)?;
    let block = cfg.diffusion.clone().expect("desk config has a diffusion block");

    let surrogate = training_surrogate(&cfg, &block)?;
    let (refs, best) = reference_scores(&surrogate, &block.reference_etas)?;
    println!("Avg {:.4}, best Conf {:.4} (η = {})", refs[0].mist, best.mist, best.eta);

    let env = SurrogateEnv::new(surrogate);
    let mut trainer = Trainer::new(block.policy.clone(), cfg.seed)?;
    trainer.train_with(&env, episodes, |p| {
        if (p.episode + 1) % 100 == 0 {
            println!("episode {:>5}: reward {:.4}, critic loss {:.2e}", p.episode + 1, p.reward, p.loss);
        }
    })?;
    if let Some(m) = trailing_mean(&trainer.curve, 100) {
        println!("last 100 episodes: {m:.4} ({:+.2}% vs Avg)", 100.0 * (m / refs[0].mist - 1.0));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let scheme = trainer.policy.generate_scheme(env.state(), &mut rng)?;
    println!("one generated scheme scores {:.4}:", env.reward(&scheme)?);
    for (c, p) in env.state().confidences.iter().zip(&scheme.powers) {
        println!("  confidence {c:.3} -> {p:7.1} W");
    }
    Ok(())
}
