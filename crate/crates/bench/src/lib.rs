//! Shared helpers for the kernel benchmarks.

use mtnet_core::layers::ConvParams;
use mtnet_core::tensor::Tensor3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(h: usize, w: usize, c: usize, seed: u64) -> Tensor3<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor3::from_vec(h, w, c, (0..h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn random_conv(n: usize, cin: usize, cout: usize, seed: u64) -> ConvParams<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ConvParams::new(
        (0..n * n * cin * cout).map(|_| rng.gen_range(-0.2..0.2)).collect(),
        (0..cout).map(|_| rng.gen_range(-0.2..0.2)).collect(),
        n,
        cin,
        cout,
    )
    .unwrap()
}
