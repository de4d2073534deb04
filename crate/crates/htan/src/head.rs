//! Dynamic convolution head: maps refined tokens to per-instance weights for
//! a three-layer 1x1 convolution stack and applies it to the decoder's mask
//! features.
//!
//! The layer plan is `c_in -> c_in -> c_in -> 1` with kernel size 1, so the
//! parameter budget is `2*c_in^2 + 3*c_in + 1` scalars and the token count
//! must equal it exactly: one token per generated scalar.

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::nn::layers::{layer_norm, LayerNorm, Linear};
use crate::nn::ops::{self, ResizeMode};
use crate::nn::params::ParamStore;

/// Number of tokens (= generated scalars) required for the dynamic head.
pub fn compute_token_count(c_in: usize) -> Result<usize> {
    if c_in < 1 {
        return Err(Error::config(format!(
            "dynamic head needs c_in >= 1, got {c_in}"
        )));
    }
    Ok(2 * c_in * c_in + 3 * c_in + 1)
}

/// Scalar layout of the generated parameters, in partition order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadLayout {
    pub c_in: usize,
    /// Total scalars: weights and biases of the three 1x1 layers.
    pub total: usize,
}

impl HeadLayout {
    pub fn new(c_in: usize) -> Result<Self> {
        Ok(Self {
            c_in,
            total: compute_token_count(c_in)?,
        })
    }

    /// `(out_channels, in_channels)` of the three 1x1 layers.
    pub fn layer_plan(&self) -> [(usize, usize); 3] {
        [
            (self.c_in, self.c_in),
            (self.c_in, self.c_in),
            (1, self.c_in),
        ]
    }

    /// Parameter tensor sizes in layout order: W1, b1, W2, b2, W3, b3.
    pub fn tensor_sizes(&self) -> [usize; 6] {
        let c = self.c_in;
        [c * c, c, c * c, c, c, 1]
    }
}

/// Per-instance weights and biases, stored batched.
pub struct DynamicHeadParams {
    pub w1: Tensor, // (B, c, c)
    pub b1: Tensor, // (B, c)
    pub w2: Tensor, // (B, c, c)
    pub b2: Tensor, // (B, c)
    pub w3: Tensor, // (B, 1, c)
    pub b3: Tensor, // (B, 1)
}

impl DynamicHeadParams {
    pub fn batch(&self) -> usize {
        self.w1.dims()[0]
    }

    /// One instance's parameters as batch-1 tensors (loop-oracle helper).
    pub fn instance(&self, i: usize) -> Result<DynamicHeadParams> {
        Ok(DynamicHeadParams {
            w1: self.w1.narrow(0, i, 1)?,
            b1: self.b1.narrow(0, i, 1)?,
            w2: self.w2.narrow(0, i, 1)?,
            b2: self.b2.narrow(0, i, 1)?,
            w3: self.w3.narrow(0, i, 1)?,
            b3: self.b3.narrow(0, i, 1)?,
        })
    }
}

/// Splits the `(B, P)` scalar matrix into head parameters following the
/// documented layout order (W1, b1, W2, b2, W3, b3; row-major tensors).
pub fn partition_scalars(scalars: &Tensor, c_in: usize) -> Result<DynamicHeadParams> {
    let layout = HeadLayout::new(c_in)?;
    let (b, p) = scalars.dims2()?;
    if p != layout.total {
        return Err(Error::shape(format!(
            "expected {} scalars per instance for c_in={c_in}, got {p}",
            layout.total
        )));
    }
    let c = c_in;
    let sizes = layout.tensor_sizes();
    let mut offset = 0usize;
    let mut take = |len: usize| -> Result<Tensor> {
        let t = scalars.narrow(1, offset, len)?;
        offset += len;
        Ok(t)
    };
    let w1 = take(sizes[0])?.reshape((b, c, c))?;
    let b1 = take(sizes[1])?;
    let w2 = take(sizes[2])?.reshape((b, c, c))?;
    let b2 = take(sizes[3])?;
    let w3 = take(sizes[4])?.reshape((b, 1, c))?;
    let b3 = take(sizes[5])?;
    Ok(DynamicHeadParams { w1, b1, w2, b2, w3, b3 })
}

/// Inverse of [`partition_scalars`]: flattens parameters back to `(B, P)`.
pub fn flatten_params(params: &DynamicHeadParams) -> Result<Tensor> {
    let b = params.batch();
    let parts = [
        params.w1.reshape((b, ()))?,
        params.b1.clone(),
        params.w2.reshape((b, ()))?,
        params.b2.clone(),
        params.w3.reshape((b, ()))?,
        params.b3.clone(),
    ];
    Ok(Tensor::cat(&parts.iter().collect::<Vec<_>>(), 1)?)
}

/// Applies the per-instance head to mask features.
///
/// Each layer is a 1x1 convolution, i.e. a channel-mixing matrix product at
/// every spatial site, with ReLU between layers and raw logits out.
pub fn apply_head(params: &DynamicHeadParams, d_final: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = d_final.dims4()?;
    if params.batch() != b {
        return Err(Error::shape(format!(
            "params batch {} does not match features batch {b}",
            params.batch()
        )));
    }
    if params.w1.dims()[1] != c {
        return Err(Error::shape(format!(
            "head expects {} channels, features have {c}",
            params.w1.dims()[1]
        )));
    }
    let x = d_final.reshape((b, c, h * w))?;
    let h1 = ops::relu(&ops::bmm(&params.w1, &x)?.broadcast_add(&params.b1.unsqueeze(2)?)?)?;
    let h2 = ops::relu(&ops::bmm(&params.w2, &h1)?.broadcast_add(&params.b2.unsqueeze(2)?)?)?;
    let logits = ops::bmm(&params.w3, &h2)?.broadcast_add(&params.b3.unsqueeze(2)?)?;
    Ok(logits.reshape((b, 1, h, w))?)
}

/// Shared projection turning each token into one scalar: layer-norm then a
/// learned `D -> 1` map, initialized small (std 0.01, zero bias) so the
/// generated head starts near zero.
pub struct TokenProjector {
    norm: LayerNorm,
    proj: Linear,
}

impl TokenProjector {
    pub fn new(ps: &mut ParamStore, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(ps, "head.token_norm", dim)?,
            proj: Linear::new(ps, "head.token_proj", dim, 1, 0.01, true, rng)?,
        })
    }

    /// `(B, P, D) -> (B, P)` scalars.
    pub fn project(&self, tokens: &Tensor) -> Result<Tensor> {
        project_tokens(
            tokens,
            self.norm.gamma.as_tensor(),
            self.norm.beta.as_tensor(),
            self.proj.weight.as_tensor(),
            self.proj.bias.as_ref().map(|b| b.as_tensor()),
        )
    }
}

/// Functional token projection (dtype-generic; the gradient-fidelity checks
/// drive this same code path in f64).
pub fn project_tokens(
    tokens: &Tensor,
    ln_gamma: &Tensor,
    ln_beta: &Tensor,
    proj_w: &Tensor,
    proj_b: Option<&Tensor>,
) -> Result<Tensor> {
    let (b, p, _) = tokens.dims3()?;
    let normed = layer_norm(tokens, ln_gamma, ln_beta, 1e-5)?;
    let scalars = ops::linear(&normed, proj_w, proj_b)?;
    Ok(scalars.reshape((b, p))?)
}

/// Tokens to batched head parameters; the token count must equal the layout
/// total exactly.
pub fn tokens_to_params(
    projector: &TokenProjector,
    tokens: &Tensor,
    c_in: usize,
) -> Result<DynamicHeadParams> {
    let expected = compute_token_count(c_in)?;
    let (_, p, _) = tokens.dims3()?;
    if p != expected {
        return Err(Error::shape(format!(
            "token count {p} does not match required {expected} for c_in={c_in}"
        )));
    }
    partition_scalars(&projector.project(tokens)?, c_in)
}

/// Static replacement for the dynamic head: the same three-layer 1x1 stack
/// with ordinary learned parameters shared across instances.
pub struct StaticHead {
    params: DynamicHeadParams,
}

impl StaticHead {
    pub fn new(ps: &mut ParamStore, c_in: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let dev = ps.device().clone();
        let c = c_in;
        let he = |rng: &mut ChaCha8Rng, shape: (usize, usize, usize), fan_in: usize| {
            crate::nn::init::normal(rng, shape, (2.0 / fan_in as f64).sqrt(), &dev)
        };
        let w1 = ps.param("head.static.w1", he(rng, (1, c, c), c)?, true)?;
        let b1 = ps.param("head.static.b1", crate::nn::init::zeros((1, c), &dev)?, false)?;
        let w2 = ps.param("head.static.w2", he(rng, (1, c, c), c)?, true)?;
        let b2 = ps.param("head.static.b2", crate::nn::init::zeros((1, c), &dev)?, false)?;
        // final layer starts small so initial logits sit near zero, matching
        // the dynamic path's initialization regime
        let w3 = ps.param(
            "head.static.w3",
            crate::nn::init::normal(rng, (1, 1, c), 0.01, &dev)?,
            true,
        )?;
        let b3 = ps.param("head.static.b3", crate::nn::init::zeros((1, 1), &dev)?, false)?;
        Ok(Self {
            params: DynamicHeadParams {
                w1: w1.as_tensor().clone(),
                b1: b1.as_tensor().clone(),
                w2: w2.as_tensor().clone(),
                b2: b2.as_tensor().clone(),
                w3: w3.as_tensor().clone(),
                b3: b3.as_tensor().clone(),
            },
        })
    }

    pub fn forward(&self, d_final: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = d_final.dims4()?;
        let x = d_final.reshape((b, c, h * w))?;
        // batch-1 parameter tensors broadcast across the instance batch
        let h1 = ops::relu(&ops::bmm(&self.params.w1, &x)?.broadcast_add(&self.params.b1.unsqueeze(2)?)?)?;
        let h2 = ops::relu(&ops::bmm(&self.params.w2, &h1)?.broadcast_add(&self.params.b2.unsqueeze(2)?)?)?;
        let logits = ops::bmm(&self.params.w3, &h2)?.broadcast_add(&self.params.b3.unsqueeze(2)?)?;
        Ok(logits.reshape((b, 1, h, w))?)
    }
}

/// Upsamples logits to `out_size` bilinearly, applies the sigmoid and
/// thresholds with the `probability >= threshold` convention.
pub fn predict_mask(
    logits: &Tensor,
    out_size: (usize, usize),
    threshold: f64,
) -> Result<Vec<BinaryMask>> {
    if !(0.0..1.0).contains(&threshold) || threshold == 0.0 {
        return Err(Error::config(format!(
            "threshold must lie in (0,1), got {threshold}"
        )));
    }
    let (b, c, _, _) = logits.dims4()?;
    if c != 1 {
        return Err(Error::shape(format!("logits must have 1 channel, got {c}")));
    }
    let (oh, ow) = out_size;
    let up = ops::resize2d(logits, oh, ow, ResizeMode::Bilinear)?;
    let probs = ops::sigmoid(&up)?;
    let flat = probs.flatten_all()?.to_vec1::<f32>()?;
    let mut masks = Vec::with_capacity(b);
    for i in 0..b {
        masks.push(BinaryMask::from_f32(
            oh,
            ow,
            &flat[i * oh * ow..(i + 1) * oh * ow],
            threshold as f32,
        )?);
    }
    Ok(masks)
}
