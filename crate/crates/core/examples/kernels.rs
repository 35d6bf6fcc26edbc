//! SimAM attention and a recursive gated convolution on a random feature map.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use semcom::kernels::{self, FeatureMap, GnConvParams};

fn main() -> semcom::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = FeatureMap::random(8, 6, 6, &mut rng)?;

    let y = kernels::simam(&x, 1e-4)?;
    let ratio: Vec<f64> = x.values.iter().zip(y.values.iter()).take(6).map(|(a, b)| b / a).collect();
    println!("SimAM gates of the first row: {ratio:.3?}");

    for (order, channels) in [(1, 8), (2, 16), (3, 64), (4, 60)] {
        match kernels::order_channels(order, channels) {
            Ok(c) => println!("order {order}, C = {channels}: channels per order {c:?}"),
            Err(e) => println!("order {order}, C = {channels}: {e}"),
        }
    }

    let params = GnConvParams::seeded(3, 8, 7)?;
    let out = kernels::gnconv(&x, &params)?;
    println!("gnConv {:?} -> {:?}", x.shape(), out.shape());
    println!("gradient check: max relative error {:.2e}", kernels::gnconv_grad_check(&params, &x)?);
    Ok(())
}
