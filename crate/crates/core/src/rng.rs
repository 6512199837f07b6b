//! Named random streams split from one root seed.
//!
//! Each stream seed is `sha256(root_seed || name)`, so adding a layer or a
//! new consumer never shifts the values another stream produces.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::real::Real;
use crate::tensor::Tensor;

pub type StreamRng = ChaCha8Rng;

pub fn stream(root_seed: u64, name: &str) -> StreamRng {
    let mut h = Sha256::new();
    h.update(root_seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

pub fn normal<T: Real>(rng: &mut StreamRng, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
    Tensor::from_fn(shape, |_| T::from_f64(dist.sample(rng)))
}

pub fn uniform<T: Real>(rng: &mut StreamRng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    use rand::Rng;
    Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(lo..hi)))
}
