//! Basic trainable layers on top of the BLAS-backed ops.

use candle_core::{Tensor, Var};
use rand_chacha::ChaCha8Rng;

use super::init;
use super::ops;
use super::params::ParamStore;
use crate::error::Result;

pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        prefix: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let fan_in = in_c * k * k;
        let w = init::he_normal(rng, (out_c, in_c, k, k), fan_in, ps.device())?;
        let weight = ps.param(format!("{prefix}.weight"), w, true)?;
        let bias = if bias {
            Some(ps.param(
                format!("{prefix}.bias"),
                init::zeros(out_c, ps.device())?,
                false,
            )?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = ops::conv2d(x, self.weight.as_tensor(), None, self.stride, self.padding)?;
        match &self.bias {
            Some(b) => ops::add_chan_bias(&y, b.as_tensor()),
            None => Ok(y),
        }
    }
}

pub struct Linear {
    pub weight: Var, // stored (in, out) so the forward pass is transpose-free
    pub bias: Option<Var>,
}

impl Linear {
    pub fn new(
        ps: &mut ParamStore,
        prefix: &str,
        in_f: usize,
        out_f: usize,
        std: f64,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let w = init::normal(rng, (in_f, out_f), std, ps.device())?;
        let weight = ps.param(format!("{prefix}.weight"), w, true)?;
        let bias = if bias {
            Some(ps.param(
                format!("{prefix}.bias"),
                init::zeros(out_f, ps.device())?,
                false,
            )?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::linear(
            x,
            self.weight.as_tensor(),
            self.bias.as_ref().map(|b| b.as_tensor()),
        )
    }
}

/// Batch normalization over `(B, C, H, W)` with running statistics.
///
/// Training mode normalizes with batch statistics and updates the running
/// estimates; eval mode uses the frozen running estimates. `frozen` forces
/// eval behavior even during training.
pub struct BatchNorm2d {
    pub gamma: Var,
    pub beta: Var,
    running_mean: Var,
    running_var: Var,
    eps: f64,
    momentum: f64,
    pub frozen: bool,
}

impl BatchNorm2d {
    pub fn new(ps: &mut ParamStore, prefix: &str, channels: usize, frozen: bool) -> Result<Self> {
        let dev = ps.device().clone();
        Ok(Self {
            gamma: ps.param(format!("{prefix}.gamma"), init::ones(channels, &dev)?, false)?,
            beta: ps.param(format!("{prefix}.beta"), init::zeros(channels, &dev)?, false)?,
            running_mean: ps.buffer(
                format!("{prefix}.running_mean"),
                init::zeros(channels, &dev)?,
            )?,
            running_var: ps.buffer(format!("{prefix}.running_var"), init::ones(channels, &dev)?)?,
            eps: 1e-5,
            momentum: 0.1,
            frozen,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        if train && !self.frozen {
            let (mean, var) = ops::batch_channel_stats(x)?;
            self.update_running(&mean, &var, x)?;
            ops::batch_norm_train(x, self.gamma.as_tensor(), self.beta.as_tensor(), self.eps)
        } else {
            let mean = self
                .running_mean
                .as_tensor()
                .to_dtype(candle_core::DType::F64)?
                .to_vec1::<f64>()?;
            let var = self
                .running_var
                .as_tensor()
                .to_dtype(candle_core::DType::F64)?
                .to_vec1::<f64>()?;
            ops::batch_norm_fixed(
                x,
                self.gamma.as_tensor(),
                self.beta.as_tensor(),
                mean,
                var,
                self.eps,
            )
        }
    }

    fn update_running(&self, mean: &[f64], var: &[f64], x: &Tensor) -> Result<()> {
        let (b, _, h, w) = x.dims4()?;
        let n = (b * h * w) as f64;
        // unbiased variance for the running estimate, matching convention
        let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        let old_m = self.running_mean.as_tensor().to_vec1::<f32>()?;
        let old_v = self.running_var.as_tensor().to_vec1::<f32>()?;
        let new_m: Vec<f32> = old_m
            .iter()
            .zip(mean.iter())
            .map(|(&o, &m)| ((1.0 - self.momentum) * o as f64 + self.momentum * m) as f32)
            .collect();
        let new_v: Vec<f32> = old_v
            .iter()
            .zip(var.iter())
            .map(|(&o, &v)| ((1.0 - self.momentum) * o as f64 + self.momentum * v * unbias) as f32)
            .collect();
        let c = new_m.len();
        let dev = x.device();
        self.running_mean.set(&Tensor::from_vec(new_m, c, dev)?)?;
        self.running_var.set(&Tensor::from_vec(new_v, c, dev)?)?;
        Ok(())
    }
}

/// Layer normalization over the last dimension.
pub struct LayerNorm {
    pub gamma: Var,
    pub beta: Var,
    eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        let dev = ps.device().clone();
        Ok(Self {
            gamma: ps.param(format!("{prefix}.gamma"), init::ones(dim, &dev)?, false)?,
            beta: ps.param(format!("{prefix}.beta"), init::zeros(dim, &dev)?, false)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(layer_norm(
            x,
            self.gamma.as_tensor(),
            self.beta.as_tensor(),
            self.eps,
        )?)
    }
}

/// Functional layer norm over the last dimension (biased variance).
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    ops::layer_norm_fused(x, gamma, beta, eps)
}

/// Reference implementation from candle primitives; the fused op is tested
/// against it.
pub fn layer_norm_composed(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let last = x.rank() - 1;
    let mean = x.mean_keepdim(last)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(last)?;
    let xhat = centered.broadcast_div(&var.affine(1.0, eps)?.sqrt()?)?;
    Ok(xhat.broadcast_mul(gamma)?.broadcast_add(beta)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn batchnorm_train_normalizes_batch() {
        let dev = Device::Cpu;
        let mut ps = ParamStore::new(dev.clone());
        let bn = BatchNorm2d::new(&mut ps, "bn", 2, false).unwrap();
        let x = Tensor::randn(3f32, 2f32, (4, 2, 5, 5), &dev).unwrap();
        let y = bn.forward(&x, true).unwrap();
        let m = y
            .mean_keepdim((0, 2, 3))
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        let v = y
            .sqr()
            .unwrap()
            .mean_keepdim((0, 2, 3))
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        for c in 0..2 {
            assert!(m[c].abs() < 1e-4);
            assert!((v[c] - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let dev = Device::Cpu;
        let mut ps = ParamStore::new(dev.clone());
        let bn = BatchNorm2d::new(&mut ps, "bn", 1, false).unwrap();
        // fresh running stats are mean 0 / var 1: eval is then identity
        let x = Tensor::randn(0f32, 1f32, (2, 1, 3, 3), &dev).unwrap();
        let y = bn.forward(&x, false).unwrap();
        let d = (&y - &x)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!(d < 1e-3);
    }

    #[test]
    fn layernorm_zero_mean_unit_var() {
        let dev = Device::Cpu;
        let x = Tensor::randn(5f64, 3f64, (4, 16), &dev).unwrap();
        let gamma = Tensor::ones(16, DType::F64, &dev).unwrap();
        let beta = Tensor::zeros(16, DType::F64, &dev).unwrap();
        let y = layer_norm(&x, &gamma, &beta, 1e-12)
            .unwrap()
            .to_vec2::<f64>()
            .unwrap();
        for row in y {
            let mean: f64 = row.iter().sum::<f64>() / 16.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }
}
