//! Hyper transformer: fuses multi-scale image features and mask embeddings
//! into a conditioning sequence on the stride-32 grid, then refines a set of
//! learnable tokens through cross-attention / self-attention / FFN blocks.
//! The refined tokens parameterize the dynamic head.

use candle_core::{Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::MultiScaleFeatures;
use crate::error::{Error, Result};
use crate::nn::layers::{Conv2d, LayerNorm, Linear};
use crate::nn::ops::{self, ResizeMode};
use crate::nn::params::ParamStore;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct HyperTransformerConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_expansion: usize,
}

impl Default for HyperTransformerConfig {
    fn default() -> Self {
        Self {
            depth: 6,
            dim: 512,
            heads: 8,
            ffn_expansion: 4,
        }
    }
}

impl HyperTransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "transformer dim {} must be divisible by heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Fixed 2D sine/cosine positional embedding of shape `(h*w, dim)`.
///
/// The first `dim/2` channels encode the row index, the rest the column
/// index; within each half, channels alternate sine/cosine over geometric
/// frequencies with base 10000. Parameter-free and deterministic.
pub fn positional_embedding_2d(h: usize, w: usize, dim: usize) -> Result<Vec<f32>> {
    if dim % 4 != 0 {
        return Err(Error::config(format!(
            "positional embedding dim {dim} must be divisible by 4"
        )));
    }
    let half = dim / 2;
    let pairs = half / 2;
    let mut out = vec![0f32; h * w * dim];
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * dim;
            for (axis, pos) in [(0usize, y as f64), (1, x as f64)] {
                for i in 0..pairs {
                    let freq = 10000f64.powf(-2.0 * i as f64 / half as f64);
                    let angle = pos * freq;
                    out[base + axis * half + 2 * i] = angle.sin() as f32;
                    out[base + axis * half + 2 * i + 1] = angle.cos() as f32;
                }
            }
        }
    }
    Ok(out)
}

fn pos_tensor(h: usize, w: usize, dim: usize, dev: &candle_core::Device) -> Result<Tensor> {
    let data = positional_embedding_2d(h, w, dim)?;
    Ok(Tensor::from_vec(data, (h * w, dim), dev)?)
}

/// Projects each encoder level with its own 1x1 convolution, resamples all of
/// them onto the stride-32 grid and concatenates along channels to the full
/// transformer width. The ablated form keeps only the deepest level behind a
/// single full-width projection.
pub struct MultiScaleFusion {
    projs: Vec<Conv2d>,
    full: bool,
}

impl MultiScaleFusion {
    pub fn new(
        ps: &mut ParamStore,
        enc_channels: [usize; 4],
        dim: usize,
        use_multiscale: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut projs = Vec::new();
        if use_multiscale {
            if dim % 4 != 0 {
                return Err(Error::config(format!(
                    "fusion needs dim divisible by 4, got {dim}"
                )));
            }
            for (i, &c) in enc_channels.iter().enumerate() {
                projs.push(Conv2d::new(
                    ps,
                    &format!("hyper.fusion.c{}", i + 1),
                    c,
                    dim / 4,
                    1,
                    1,
                    0,
                    true,
                    rng,
                )?);
            }
        } else {
            projs.push(Conv2d::new(
                ps,
                "hyper.fusion.c4",
                enc_channels[3],
                dim,
                1,
                1,
                0,
                true,
                rng,
            )?);
        }
        Ok(Self {
            projs,
            full: use_multiscale,
        })
    }

    /// Returns `(B, (H/32)*(W/32), dim)` image tokens.
    pub fn forward(&self, features: &MultiScaleFeatures) -> Result<Tensor> {
        let (_, _, h32, w32) = features.i4.dims4()?;
        let fused = if self.full {
            let mut parts = Vec::with_capacity(4);
            for (i, proj) in self.projs.iter().enumerate() {
                let p = proj.forward(features.level(i + 1))?;
                parts.push(ops::resize2d(&p, h32, w32, ResizeMode::Area)?);
            }
            Tensor::cat(&parts.iter().collect::<Vec<_>>(), 1)?
        } else {
            self.projs[0].forward(&features.i4)?
        };
        flatten_tokens(&fused)
    }
}

/// `(B, C, h, w) -> (B, h*w, C)` in row-major spatial order.
fn flatten_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// Strided convolutional stem embedding the visible mask onto the stride-32
/// token grid.
pub struct MaskEmbedder {
    convs: Vec<Conv2d>,
}

impl MaskEmbedder {
    pub fn new(ps: &mut ParamStore, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let widths = [
            32.min(dim),
            64.min(dim),
            128.min(dim),
            256.min(dim),
            dim,
        ];
        let mut convs = Vec::new();
        let mut in_c = 1;
        for (i, &out_c) in widths.iter().enumerate() {
            convs.push(Conv2d::new(
                ps,
                &format!("hyper.mask_stem.{i}"),
                in_c,
                out_c,
                3,
                2,
                1,
                true,
                rng,
            )?);
            in_c = out_c;
        }
        Ok(Self { convs })
    }

    /// Returns `(B, (H/32)*(W/32), dim)` mask tokens.
    pub fn forward(&self, visible_mask: &Tensor) -> Result<Tensor> {
        let mut x = visible_mask.clone();
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(&x)?;
            if i != last {
                x = ops::relu(&x)?;
            }
        }
        flatten_tokens(&x)
    }
}

/// Self-attention with the Q/K/V projections packed into one matrix so the
/// projection runs as a single gemm and the attention core reads strided
/// slices of its output.
struct SelfAttention {
    qkv: Linear,
    o: Linear,
    heads: usize,
}

impl SelfAttention {
    fn new(ps: &mut ParamStore, prefix: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            qkv: Linear::new(ps, &format!("{prefix}.qkv"), dim, 3 * dim, 0.02, true, rng)?,
            o: Linear::new(ps, &format!("{prefix}.o"), dim, dim, 0.02, true, rng)?,
            heads,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, d) = x.dims3()?;
        let dh = d / self.heads;
        let qkv = self.qkv.forward(x)?;
        let ctx = ops::self_attention_packed(&qkv, self.heads, 1.0 / (dh as f64).sqrt())?;
        self.o.forward(&ctx)
    }
}

/// Cross-attention: queries from the token stream, packed K/V from the
/// conditioning sequence.
struct CrossAttention {
    q: Linear,
    kv: Linear,
    o: Linear,
    heads: usize,
}

impl CrossAttention {
    fn new(ps: &mut ParamStore, prefix: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            q: Linear::new(ps, &format!("{prefix}.q"), dim, dim, 0.02, true, rng)?,
            kv: Linear::new(ps, &format!("{prefix}.kv"), dim, 2 * dim, 0.02, true, rng)?,
            o: Linear::new(ps, &format!("{prefix}.o"), dim, dim, 0.02, true, rng)?,
            heads,
        })
    }

    fn forward(&self, queries: &Tensor, keys_values: &Tensor) -> Result<Tensor> {
        let (_, _, d) = queries.dims3()?;
        let dh = d / self.heads;
        let q = self.q.forward(queries)?;
        let kv = self.kv.forward(keys_values)?;
        let ctx = ops::cross_attention_packed(&q, &kv, self.heads, 1.0 / (dh as f64).sqrt())?;
        self.o.forward(&ctx)
    }
}

struct HyperBlock {
    ln_q: LayerNorm,
    ln_kv: LayerNorm,
    cross: CrossAttention,
    ln_self: LayerNorm,
    self_attn: SelfAttention,
    ln_ffn: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl HyperBlock {
    fn new(ps: &mut ParamStore, prefix: &str, cfg: &HyperTransformerConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let hidden = cfg.dim * cfg.ffn_expansion;
        Ok(Self {
            ln_q: LayerNorm::new(ps, &format!("{prefix}.ln_q"), cfg.dim)?,
            ln_kv: LayerNorm::new(ps, &format!("{prefix}.ln_kv"), cfg.dim)?,
            cross: CrossAttention::new(ps, &format!("{prefix}.cross"), cfg.dim, cfg.heads, rng)?,
            ln_self: LayerNorm::new(ps, &format!("{prefix}.ln_self"), cfg.dim)?,
            self_attn: SelfAttention::new(ps, &format!("{prefix}.self"), cfg.dim, cfg.heads, rng)?,
            ln_ffn: LayerNorm::new(ps, &format!("{prefix}.ln_ffn"), cfg.dim)?,
            fc1: Linear::new(ps, &format!("{prefix}.ffn.fc1"), cfg.dim, hidden, 0.02, true, rng)?,
            fc2: Linear::new(ps, &format!("{prefix}.ffn.fc2"), hidden, cfg.dim, 0.02, true, rng)?,
        })
    }

    /// Pre-norm residual composition: cross-attention first, then
    /// self-attention, then the FFN (two linear maps around a ReLU).
    fn forward(&self, tokens: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let mut e = tokens.clone();
        let cross = self
            .cross
            .forward(&self.ln_q.forward(&e)?, &self.ln_kv.forward(cond)?)?;
        e = e.add(&cross)?;
        e = e.add(&self.self_attn.forward(&self.ln_self.forward(&e)?)?)?;
        let ffn = {
            let n = self.ln_ffn.forward(&e)?;
            let h = ops::linear(&n, self.fc1.weight.as_tensor(), None)?;
            let h = ops::add_row_bias_relu(
                &h,
                self.fc1.bias.as_ref().expect("ffn fc1 has a bias").as_tensor(),
            )?;
            self.fc2.forward(&h)?
        };
        Ok(e.add(&ffn)?)
    }
}

/// The full hyper transformer: learnable tokens plus conditioning pipeline.
pub struct HyperTransformer {
    pub cfg: HyperTransformerConfig,
    pub tokens: Var,
    fusion: MultiScaleFusion,
    mask_embed: MaskEmbedder,
    blocks: Vec<HyperBlock>,
}

impl HyperTransformer {
    pub fn new(
        ps: &mut ParamStore,
        cfg: &HyperTransformerConfig,
        enc_channels: [usize; 4],
        n_tokens: usize,
        use_multiscale: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        // learnable token initialization: zero-mean Gaussian, std 0.02
        let t0 = crate::nn::init::normal(rng, (n_tokens, cfg.dim), 0.02, ps.device())?;
        let tokens = ps.param("hyper.tokens", t0, false)?;
        let fusion = MultiScaleFusion::new(ps, enc_channels, cfg.dim, use_multiscale, rng)?;
        let mask_embed = MaskEmbedder::new(ps, cfg.dim, rng)?;
        let blocks = (0..cfg.depth)
            .map(|l| HyperBlock::new(ps, &format!("hyper.block{l}"), cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            tokens,
            fusion,
            mask_embed,
            blocks,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens.dims()[0]
    }

    /// Builds the conditioning sequence: `concat(I_f + pos, E_mask + pos)`
    /// along the sequence axis, both halves sharing the stride-32 grid
    /// embedding.
    pub fn conditioning(
        &self,
        features: &MultiScaleFeatures,
        visible_mask: &Tensor,
    ) -> Result<Tensor> {
        let (_, _, h32, w32) = features.i4.dims4()?;
        let i_f = self.fusion.forward(features)?;
        let e_mask = self.mask_embed.forward(visible_mask)?;
        let pos = pos_tensor(h32, w32, self.cfg.dim, i_f.device())?.unsqueeze(0)?;
        let i_f = i_f.broadcast_add(&pos)?;
        let e_mask = e_mask.broadcast_add(&pos)?;
        Ok(Tensor::cat(&[&i_f, &e_mask], 1)?)
    }

    /// Runs the `depth` transformer blocks over a token set.
    pub fn run_blocks(&self, tokens: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let mut e = tokens.clone();
        for block in &self.blocks {
            e = block.forward(&e, cond)?;
        }
        Ok(e)
    }

    /// Full forward pass: broadcast the learnable tokens over the batch and
    /// refine them against the conditioning sequence.
    pub fn forward(
        &self,
        features: &MultiScaleFeatures,
        visible_mask: &Tensor,
    ) -> Result<Tensor> {
        let cond = self.conditioning(features, visible_mask)?;
        let (b, _, _) = cond.dims3()?;
        let (n, d) = self.tokens.dims2()?;
        let e0 = self
            .tokens
            .as_tensor()
            .unsqueeze(0)?
            .broadcast_as((b, n, d))?
            .contiguous()?;
        self.run_blocks(&e0, &cond)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, ImageEncoder};
    use crate::nn::init::init_rng;
    use candle_core::{DType, Device};
    use std::collections::BTreeSet;

    fn tiny_features(b: usize) -> (MultiScaleFeatures, Tensor) {
        let dev = Device::Cpu;
        let mut ps = ParamStore::new(dev.clone());
        let mut rng = init_rng(5);
        let enc = ImageEncoder::new(&mut ps, &EncoderConfig::default(), &mut rng).unwrap();
        let img = Tensor::randn(0f32, 1f32, (b, 3, 128, 128), &dev).unwrap();
        let mask = Tensor::ones((b, 1, 128, 128), DType::F32, &dev).unwrap();
        (enc.encode(&img, &mask, false).unwrap(), mask)
    }

    fn build_hyper(cfg: &HyperTransformerConfig, n_tokens: usize, multiscale: bool) -> HyperTransformer {
        let mut ps = ParamStore::new(Device::Cpu);
        let mut rng = init_rng(7);
        HyperTransformer::new(&mut ps, cfg, [16, 32, 64, 128], n_tokens, multiscale, &mut rng).unwrap()
    }

    #[test]
    fn positional_embedding_rows_have_equal_norm() {
        let emb = positional_embedding_2d(4, 6, 64).unwrap();
        let norms: Vec<f64> = emb
            .chunks(64)
            .map(|row| row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt())
            .collect();
        // sin^2 + cos^2 = 1 per pair: norm^2 = dim/2
        let want = (64f64 / 2.0).sqrt();
        for n in norms {
            assert!((n - want).abs() < 1e-5, "{n} vs {want}");
        }
    }

    #[test]
    fn positional_embedding_single_cell_starts_at_sin_zero() {
        let emb = positional_embedding_2d(1, 1, 16).unwrap();
        assert_eq!(emb.len(), 16);
        // sine channels of position 0 are exactly 0, cosines exactly 1
        for i in 0..4 {
            assert_eq!(emb[2 * i], 0.0);
            assert_eq!(emb[2 * i + 1], 1.0);
        }
    }

    #[test]
    fn positional_embedding_distinct_for_all_positions_up_to_64() {
        let (h, w, dim) = (64, 64, 32);
        let emb = positional_embedding_2d(h, w, dim).unwrap();
        // min pairwise distance > 0 <=> no two rows bit-identical
        let mut seen = BTreeSet::new();
        for row in emb.chunks(dim) {
            let key: Vec<u32> = row.iter().map(|v| v.to_bits()).collect();
            assert!(seen.insert(key), "duplicate positional embedding row");
        }
    }

    #[test]
    fn fusion_token_shape_and_ablation() {
        let (feats, _) = tiny_features(2);
        let cfg = HyperTransformerConfig {
            depth: 1,
            dim: 64,
            heads: 4,
            ffn_expansion: 2,
        };
        let full = build_hyper(&cfg, 10, true);
        let ab = build_hyper(&cfg, 10, false);
        let t_full = full.fusion.forward(&feats).unwrap();
        let t_ab = ab.fusion.forward(&feats).unwrap();
        assert_eq!(t_full.dims(), [2, 16, 64]);
        assert_eq!(t_ab.dims(), [2, 16, 64]);
    }

    #[test]
    fn zeroing_i1_changes_fusion_only_when_multiscale_enabled() {
        let (feats, _) = tiny_features(1);
        let zeroed = MultiScaleFeatures {
            i1: feats.i1.zeros_like().unwrap(),
            i2: feats.i2.clone(),
            i3: feats.i3.clone(),
            i4: feats.i4.clone(),
        };
        let cfg = HyperTransformerConfig {
            depth: 1,
            dim: 64,
            heads: 4,
            ffn_expansion: 2,
        };
        for (multiscale, expect_change) in [(true, true), (false, false)] {
            let hyper = build_hyper(&cfg, 10, multiscale);
            let a = hyper.fusion.forward(&feats).unwrap();
            let b = hyper.fusion.forward(&zeroed).unwrap();
            let d = (&a - &b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
            assert_eq!(d > 1e-6, expect_change, "multiscale={multiscale} diff={d}");
        }
    }

    #[test]
    fn mask_embedding_shape_and_locality() {
        let dev = Device::Cpu;
        let cfg = HyperTransformerConfig {
            depth: 1,
            dim: 64,
            heads: 4,
            ffn_expansion: 2,
        };
        let hyper = build_hyper(&cfg, 10, true);
        let zeros = Tensor::zeros((1, 1, 128, 128), DType::F32, &dev).unwrap();
        let e0 = hyper.mask_embed.forward(&zeros).unwrap();
        assert_eq!(e0.dims(), [1, 16, 64]);
        let m = e0.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(m.is_finite());

        // flipping one stride-32 cell changes at least that token
        let mut on = vec![0f32; 128 * 128];
        for y in 32..64 {
            for x in 96..128 {
                on[y * 128 + x] = 1.0;
            }
        }
        let m1 = Tensor::from_vec(on, (1, 1, 128, 128), &dev).unwrap();
        let e1 = hyper.mask_embed.forward(&m1).unwrap();
        // cell (row 1, col 3) -> token index 1*4+3 = 7
        let d = (&e0 - &e1)
            .unwrap()
            .abs()
            .unwrap()
            .narrow(1, 7, 1)
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!(d > 1e-4, "token 7 unchanged: {d}");
    }

    #[test]
    fn zero_depth_transformer_is_identity() {
        let cfg = HyperTransformerConfig {
            depth: 0,
            dim: 32,
            heads: 4,
            ffn_expansion: 2,
        };
        let hyper = build_hyper(&cfg, 5, true);
        let dev = Device::Cpu;
        let tokens = Tensor::randn(0f32, 1f32, (2, 5, 32), &dev).unwrap();
        let cond = Tensor::randn(0f32, 1f32, (2, 32, 32), &dev).unwrap();
        let out = hyper.run_blocks(&tokens, &cond).unwrap();
        let d = (&out - &tokens).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn conditioning_permutation_leaves_output_unchanged() {
        let (feats, mask) = tiny_features(1);
        let cfg = HyperTransformerConfig {
            depth: 2,
            dim: 64,
            heads: 4,
            ffn_expansion: 2,
        };
        let hyper = build_hyper(&cfg, 12, true);
        let cond = hyper.conditioning(&feats, &mask).unwrap();
        let (_, s, _) = cond.dims3().unwrap();
        let dev = Device::Cpu;
        // deterministic permutation of the sequence axis
        let perm: Vec<u32> = (0..s as u32).map(|i| (i * 7 + 3) % s as u32).collect();
        let idx = Tensor::new(perm.as_slice(), &dev).unwrap();
        let cond_p = cond.index_select(&idx, 1).unwrap().contiguous().unwrap();
        let tokens = Tensor::randn(0f32, 0.5f32, (1, 12, 64), &dev).unwrap();
        let a = hyper.run_blocks(&tokens, &cond).unwrap();
        let b = hyper.run_blocks(&tokens, &cond_p).unwrap();
        let d = (&a - &b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(d < 1e-5, "kv permutation changed output by {d}");
    }

    #[test]
    fn gradients_reach_all_component_parameters() {
        let (feats, mask) = tiny_features(1);
        let dev = Device::Cpu;
        let mut ps = ParamStore::new(dev);
        let mut rng = init_rng(11);
        let cfg = HyperTransformerConfig {
            depth: 2,
            dim: 64,
            heads: 4,
            ffn_expansion: 2,
        };
        let hyper =
            HyperTransformer::new(&mut ps, &cfg, [16, 32, 64, 128], 12, true, &mut rng).unwrap();
        let out = hyper.forward(&feats, &mask).unwrap();
        let grads = out.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        for probe in [
            "hyper.tokens",
            "hyper.fusion.c1.weight",
            "hyper.fusion.c4.weight",
            "hyper.mask_stem.0.weight",
            "hyper.block0.cross.q.weight",
            "hyper.block1.ffn.fc2.weight",
            "hyper.block1.self.qkv.weight",
        ] {
            let var = ps.get(probe).unwrap_or_else(|| panic!("missing {probe}"));
            let g = grads.get(var.as_tensor());
            let norm = g
                .unwrap_or_else(|| panic!("no grad for {probe}"))
                .sqr()
                .unwrap()
                .sum_all()
                .unwrap()
                .to_scalar::<f32>()
                .unwrap();
            assert!(norm > 0.0, "zero gradient for {probe}");
        }
    }

    #[test]
    fn duplicate_rows_stay_identical_through_blocks() {
        let (feats, mask) = tiny_features(1);
        let cfg = HyperTransformerConfig {
            depth: 2,
            dim: 64,
            heads: 4,
            ffn_expansion: 2,
        };
        let hyper = build_hyper(&cfg, 8, true);
        let cond1 = hyper.conditioning(&feats, &mask).unwrap();
        let cond = Tensor::cat(&[&cond1, &cond1], 0).unwrap();
        let t1 = Tensor::randn(0f32, 0.5f32, (1, 8, 64), &Device::Cpu).unwrap();
        let tokens = Tensor::cat(&[&t1, &t1], 0).unwrap();
        let out = hyper.run_blocks(&tokens, &cond).unwrap();
        let a = out.narrow(0, 0, 1).unwrap();
        let b = out.narrow(0, 1, 1).unwrap();
        let d = (&a - &b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(d < 1e-6);
    }
}
