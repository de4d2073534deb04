//! Mask branch: U-shaped decoder fusing encoder features through skip
//! connections into the stride-4 mask feature map the dynamic head consumes.

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;

use crate::encoder::MultiScaleFeatures;
use crate::error::{Error, Result};
use crate::nn::layers::{BatchNorm2d, Conv2d};
use crate::nn::ops::{self, ResizeMode};
use crate::nn::params::ParamStore;

struct RefineBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
}

impl RefineBlock {
    fn new(ps: &mut ParamStore, prefix: &str, width: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(ps, &format!("{prefix}.conv1"), width, width, 3, 1, 1, false, rng)?,
            bn1: BatchNorm2d::new(ps, &format!("{prefix}.bn1"), width, false)?,
            conv2: Conv2d::new(ps, &format!("{prefix}.conv2"), width, width, 3, 1, 1, false, rng)?,
            bn2: BatchNorm2d::new(ps, &format!("{prefix}.bn2"), width, false)?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = ops::relu(&self.bn1.forward(&self.conv1.forward(x)?, train)?)?;
        let y = self.bn2.forward(&self.conv2.forward(&y)?, train)?;
        ops::relu(&x.add(&y)?)
    }
}

/// Decoder producing `D_final` with `c_in` channels at stride 4.
///
/// The visible mask is area-resized to the stride-32 grid and embedded by a
/// convolution; the bottleneck feature `I_4` joins through a 1x1 projection.
/// Three stages then double the resolution (`bilinear x2`), add the matching
/// skip projection when skips are enabled, and refine residually.
pub struct MaskDecoder {
    width: usize,
    c_in: usize,
    use_skips: bool,
    mask_embed: Conv2d,
    proj_bottleneck: Conv2d,
    skip_projs: Vec<Conv2d>, // levels I3, I2, I1 in application order
    refines: Vec<RefineBlock>,
    out_proj: Conv2d,
}

impl MaskDecoder {
    pub fn new(
        ps: &mut ParamStore,
        enc_channels: [usize; 4],
        width: usize,
        c_in: usize,
        use_skips: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if c_in < 1 {
            return Err(Error::config("decoder output channels must be >= 1"));
        }
        let mask_embed = Conv2d::new(ps, "decoder.mask_embed", 1, width, 3, 1, 1, true, rng)?;
        let proj_bottleneck = Conv2d::new(
            ps,
            "decoder.proj4",
            enc_channels[3],
            width,
            1,
            1,
            0,
            true,
            rng,
        )?;
        let mut skip_projs = Vec::new();
        if use_skips {
            for (idx, level) in [(3usize, enc_channels[2]), (2, enc_channels[1]), (1, enc_channels[0])] {
                skip_projs.push(Conv2d::new(
                    ps,
                    &format!("decoder.proj{idx}"),
                    level,
                    width,
                    1,
                    1,
                    0,
                    true,
                    rng,
                )?);
            }
        }
        let refines = (0..3)
            .map(|i| RefineBlock::new(ps, &format!("decoder.refine{i}"), width, rng))
            .collect::<Result<Vec<_>>>()?;
        let out_proj = Conv2d::new(ps, "decoder.out_proj", width, c_in, 1, 1, 0, true, rng)?;
        Ok(Self {
            width,
            c_in,
            use_skips,
            mask_embed,
            proj_bottleneck,
            skip_projs,
            refines,
            out_proj,
        })
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `visible_mask` is the full-resolution `(B,1,H,W)` mask (already zeroed
    /// by the caller when the mask pathway is ablated).
    pub fn forward(
        &self,
        features: &MultiScaleFeatures,
        visible_mask: &Tensor,
        train: bool,
    ) -> Result<Tensor> {
        let (_, _, h32, w32) = features.i4.dims4()?;
        let m32 = ops::resize2d(visible_mask, h32, w32, ResizeMode::Area)?;
        let mut d = self
            .mask_embed
            .forward(&m32)?
            .add(&self.proj_bottleneck.forward(&features.i4)?)?;
        for (i, refine) in self.refines.iter().enumerate() {
            let (_, _, dh, dw) = d.dims4()?;
            d = ops::resize2d(&d, dh * 2, dw * 2, ResizeMode::Bilinear)?;
            if self.use_skips {
                let skip = self.skip_projs[i].forward(features.level(3 - i))?;
                d = d.add(&skip)?;
            }
            d = refine.forward(&d, train)?;
        }
        Ok(self.out_proj.forward(&d)?)
    }
}
