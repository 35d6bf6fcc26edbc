//! Avg against Conf allocation on the fixture scene for a few exponents.
//!
//! ```text
//! cargo run --release --example allocation -- [distance_m] [trials]
//! ```

use semcom::experiments::{load_scenes, sweep_cell, ExperimentConfig};
use semcom::scene::Scene;

fn main() -> semcom::Result<()> {
    let mut args = std::env::args().skip(1);
    let distance: f64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(20.0);
    let trials: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(20);

    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/paper.toml");
    let cfg = ExperimentConfig::load(path)?;
    let scenes = load_scenes(&cfg.paths.detections, &cfg.paths.images, cfg.mist.c_min)?
        .iter()
        .map(|(set, img)| Scene::from_image(img, set))
        .collect::<semcom::Result<Vec<_>>>()?;
    let env = cfg.channel.with_distance(distance);
    let mist = cfg.mist.config();

    let (avg, se) = sweep_cell(&scenes, &env, &mist, &cfg.ssim, None, trials, 1)?;
    println!("D = {distance} m, {trials} trials");
    println!("  Avg          MIST {avg:.4} ± {se:.4}");
    for eta in [0.25, 0.5, 0.75, 1.0, 1.5] {
        let (m, se) = sweep_cell(&scenes, &env, &mist, &cfg.ssim, Some(eta), trials, 1)?;
        println!("  Conf η = {eta:<4} MIST {m:.4} ± {se:.4} ({:+.2}%)", 100.0 * (m / avg - 1.0));
    }
    Ok(())
}
