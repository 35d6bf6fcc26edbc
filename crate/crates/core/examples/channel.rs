//! Fading link statistics: mean SNR and average BER against transmit power
//! and distance, plus one simulated crop transmission.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use semcom::channel::{self, ChannelEnv, FadingSampler};
use semcom::detection::{BBox, Crop};

fn main() -> semcom::Result<()> {
    let env = ChannelEnv::default();
    println!("{:>8} {:>8} {:>12} {:>12}", "D (m)", "p (W)", "mean SNR", "avg BER");
    for d in [10.0, 20.0, 30.0] {
        for p in [10.0, 100.0, 1000.0] {
            let e = env.with_distance(d);
            let omega = channel::mean_snr(p, &e);
            println!("{d:>8} {p:>8} {omega:>12.4} {:>12.3e}", channel::average_ber(omega, &e)?);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let sampler = FadingSampler::new(env.m_f, env.m_s)?;
    let draws: Vec<f64> = (0..5).map(|_| sampler.gain(&mut rng)).collect();
    println!("unit-mean fading gains: {draws:.3?}");

    let px = (0..32 * 32 * 3).map(|i| (i % 251) as u8).collect();
    let crop = Crop::new(32, 32, px, BBox::new(0, 0, 32, 32))?;
    let (_, link) = channel::transmit(&crop, 50.0, &env.with_distance(20.0), &mut rng)?;
    println!(
        "50 W at 20 m: BER {:.3e}, {} of {} bits flipped",
        link.ber, link.bits_flipped, link.bits_sent
    );
    Ok(())
}
