//! SSIM of a received crop at several bit error rates, and the MIST score of
//! one transmitted scene.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use semcom::allocation::{allocate_conf, AllocationRequest};
use semcom::channel;
use semcom::experiments::{load_scenes, ExperimentConfig};
use semcom::quality::{simulate_transmission, ssim};
use semcom::scene::Scene;

fn main() -> semcom::Result<()> {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/paper.toml");
    let cfg = ExperimentConfig::load(path)?;
    let scenes = load_scenes(&cfg.paths.detections, &cfg.paths.images, cfg.mist.c_min)?;
    let scene = Scene::from_image(&scenes[0].1, &scenes[0].0)?;

    let crop = &scene.crops[0];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for ber in [0.0, 1e-4, 1e-3, 1e-2, 1e-1] {
        let mut rx = crop.clone();
        channel::flip_bits(rx.pixels_mut(), ber, &mut rng);
        println!("BER {ber:<7} SSIM {:.4}", ssim(crop, &rx, &cfg.ssim)?);
    }

    let env = cfg.channel.with_distance(20.0);
    let powers = allocate_conf(&AllocationRequest::new(scene.confidences.clone(), env), 1.0).powers;
    let mut bits = ChaCha8Rng::seed_from_u64(4);
    let rep = simulate_transmission(
        &scene.crops,
        &scene.confidences,
        &powers,
        &env,
        &cfg.mist.config(),
        &cfg.ssim,
        &mut rng,
        &mut bits,
    )?;
    println!("{}: {} objects at 20 m, MIST {:.4}", scene.image_id, scene.len(), rep.mist);
    print!("{}", rep.sorted_by_confidence().to_csv()?);
    Ok(())
}
