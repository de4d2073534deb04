//! Seeded weight initialization.
//!
//! All draws go through an explicit ChaCha stream so model construction is a
//! pure function of the seed; the Box-Muller transform is inlined to keep the
//! byte stream independent of sampler-crate versions.

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// Dedicated RNG for parameter initialization.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One standard normal draw (Box-Muller, two uniforms per sample).
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Gaussian tensor with the given std.
pub fn normal<S: Into<candle_core::Shape>>(
    rng: &mut ChaCha8Rng,
    shape: S,
    std: f64,
    dev: &Device,
) -> Result<Tensor> {
    let shape = shape.into();
    let data: Vec<f32> = (0..shape.elem_count())
        .map(|_| (standard_normal(rng) * std) as f32)
        .collect();
    Ok(Tensor::from_vec(data, shape, dev)?)
}

/// He-normal initialization: std = sqrt(2 / fan_in).
pub fn he_normal<S: Into<candle_core::Shape>>(
    rng: &mut ChaCha8Rng,
    shape: S,
    fan_in: usize,
    dev: &Device,
) -> Result<Tensor> {
    normal(rng, shape, (2.0 / fan_in as f64).sqrt(), dev)
}

pub fn zeros<S: Into<candle_core::Shape>>(shape: S, dev: &Device) -> Result<Tensor> {
    Ok(Tensor::zeros(shape, candle_core::DType::F32, dev)?)
}

pub fn ones<S: Into<candle_core::Shape>>(shape: S, dev: &Device) -> Result<Tensor> {
    Ok(Tensor::ones(shape, candle_core::DType::F32, dev)?)
}
