//! Shared fixtures for the kernel benchmarks.

use dfqlab::vit::{MicroViT, ViTConfig};
use dfqlab::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn default_model() -> MicroViT {
    MicroViT::new(ViTConfig::default(), 0).expect("default config is valid")
}
