//! Image branch: a residual encoder over the 4-channel concatenation of the
//! RGB image and the visible mask, emitting feature maps at strides
//! 4/8/16/32.

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::nn::layers::{BatchNorm2d, Conv2d};
use crate::nn::ops;
use crate::nn::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    /// 4-stage basic-block net, desk-scale default.
    Tiny,
    /// Bottleneck stages mirroring the standard 50-layer layout.
    Resnet50Style,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    pub variant: EncoderVariant,
    /// Per-stage output channels; `None` selects the variant default.
    #[serde(default)]
    pub channels: Option<[usize; 4]>,
    #[serde(default)]
    pub pretrained_init: bool,
    /// Checkpoint supplying pretrained encoder weights (3-channel stem
    /// accepted, see [`init_stem_from_pretrained`]).
    #[serde(default)]
    pub pretrained_path: Option<PathBuf>,
    /// Freeze batch-norm statistics during training.
    #[serde(default)]
    pub bn_frozen: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            variant: EncoderVariant::Tiny,
            channels: None,
            pretrained_init: false,
            pretrained_path: None,
            bn_frozen: false,
        }
    }
}

impl EncoderConfig {
    pub fn resolved_channels(&self) -> [usize; 4] {
        self.channels.unwrap_or(match self.variant {
            EncoderVariant::Tiny => [16, 32, 64, 128],
            EncoderVariant::Resnet50Style => [256, 512, 1024, 2048],
        })
    }

    pub fn validate(&self) -> Result<()> {
        let ch = self.resolved_channels();
        if !(ch[0] < ch[1] && ch[1] < ch[2] && ch[2] < ch[3]) {
            return Err(Error::config(format!(
                "encoder channels must be strictly increasing, got {ch:?}"
            )));
        }
        if self.variant == EncoderVariant::Resnet50Style && ch.iter().any(|c| c % 4 != 0) {
            return Err(Error::config(
                "bottleneck stages need channels divisible by 4",
            ));
        }
        Ok(())
    }
}

/// The four encoder feature maps at strides 4/8/16/32 of one forward pass.
pub struct MultiScaleFeatures {
    pub i1: Tensor,
    pub i2: Tensor,
    pub i3: Tensor,
    pub i4: Tensor,
}

impl MultiScaleFeatures {
    pub fn level(&self, idx: usize) -> &Tensor {
        match idx {
            1 => &self.i1,
            2 => &self.i2,
            3 => &self.i3,
            4 => &self.i4,
            _ => panic!("encoder level {idx} out of range"),
        }
    }
}

struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    down: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    fn new(
        ps: &mut ParamStore,
        prefix: &str,
        in_c: usize,
        out_c: usize,
        stride: usize,
        bn_frozen: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let conv1 = Conv2d::new(ps, &format!("{prefix}.conv1"), in_c, out_c, 3, stride, 1, false, rng)?;
        let bn1 = BatchNorm2d::new(ps, &format!("{prefix}.bn1"), out_c, bn_frozen)?;
        let conv2 = Conv2d::new(ps, &format!("{prefix}.conv2"), out_c, out_c, 3, 1, 1, false, rng)?;
        let bn2 = BatchNorm2d::new(ps, &format!("{prefix}.bn2"), out_c, bn_frozen)?;
        let down = if stride != 1 || in_c != out_c {
            Some((
                Conv2d::new(ps, &format!("{prefix}.down.conv"), in_c, out_c, 1, stride, 0, false, rng)?,
                BatchNorm2d::new(ps, &format!("{prefix}.down.bn"), out_c, bn_frozen)?,
            ))
        } else {
            None
        };
        Ok(Self { conv1, bn1, conv2, bn2, down })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut y = ops::relu(&self.bn1.forward(&self.conv1.forward(x)?, train)?)?;
        y = self.bn2.forward(&self.conv2.forward(&y)?, train)?;
        let short = match &self.down {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, train)?,
            None => x.clone(),
        };
        ops::relu(&y.add(&short)?)
    }
}

struct Bottleneck {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    conv3: Conv2d,
    bn3: BatchNorm2d,
    down: Option<(Conv2d, BatchNorm2d)>,
}

impl Bottleneck {
    fn new(
        ps: &mut ParamStore,
        prefix: &str,
        in_c: usize,
        out_c: usize,
        stride: usize,
        bn_frozen: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mid = out_c / 4;
        let conv1 = Conv2d::new(ps, &format!("{prefix}.conv1"), in_c, mid, 1, 1, 0, false, rng)?;
        let bn1 = BatchNorm2d::new(ps, &format!("{prefix}.bn1"), mid, bn_frozen)?;
        let conv2 = Conv2d::new(ps, &format!("{prefix}.conv2"), mid, mid, 3, stride, 1, false, rng)?;
        let bn2 = BatchNorm2d::new(ps, &format!("{prefix}.bn2"), mid, bn_frozen)?;
        let conv3 = Conv2d::new(ps, &format!("{prefix}.conv3"), mid, out_c, 1, 1, 0, false, rng)?;
        let bn3 = BatchNorm2d::new(ps, &format!("{prefix}.bn3"), out_c, bn_frozen)?;
        let down = if stride != 1 || in_c != out_c {
            Some((
                Conv2d::new(ps, &format!("{prefix}.down.conv"), in_c, out_c, 1, stride, 0, false, rng)?,
                BatchNorm2d::new(ps, &format!("{prefix}.down.bn"), out_c, bn_frozen)?,
            ))
        } else {
            None
        };
        Ok(Self { conv1, bn1, conv2, bn2, conv3, bn3, down })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut y = ops::relu(&self.bn1.forward(&self.conv1.forward(x)?, train)?)?;
        y = ops::relu(&self.bn2.forward(&self.conv2.forward(&y)?, train)?)?;
        y = self.bn3.forward(&self.conv3.forward(&y)?, train)?;
        let short = match &self.down {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, train)?,
            None => x.clone(),
        };
        ops::relu(&y.add(&short)?)
    }
}

enum Block {
    Basic(BasicBlock),
    Bottle(Bottleneck),
}

impl Block {
    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        match self {
            Block::Basic(b) => b.forward(x, train),
            Block::Bottle(b) => b.forward(x, train),
        }
    }
}

/// The image branch encoder.
pub struct ImageEncoder {
    cfg: EncoderConfig,
    stem_conv: Conv2d,
    stem_bn: BatchNorm2d,
    /// Tiny variant reaches stride 4 with a strided stage; the bottleneck
    /// variant max-pools after the stem like its reference layout.
    stem_pool: bool,
    stages: [Vec<Block>; 4],
}

impl ImageEncoder {
    pub fn new(ps: &mut ParamStore, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let ch = cfg.resolved_channels();
        let frozen = cfg.bn_frozen;
        match cfg.variant {
            EncoderVariant::Tiny => {
                let stem_conv = Conv2d::new(ps, "encoder.stem.conv", 4, ch[0], 3, 2, 1, false, rng)?;
                let stem_bn = BatchNorm2d::new(ps, "encoder.stem.bn", ch[0], frozen)?;
                let mut stages: [Vec<Block>; 4] = Default::default();
                let mut in_c = ch[0];
                for (s, &out_c) in ch.iter().enumerate() {
                    let mut blocks = Vec::new();
                    for b in 0..2 {
                        let stride = if b == 0 { 2 } else { 1 };
                        blocks.push(Block::Basic(BasicBlock::new(
                            ps,
                            &format!("encoder.stage{}.block{b}", s + 1),
                            if b == 0 { in_c } else { out_c },
                            out_c,
                            stride,
                            frozen,
                            rng,
                        )?));
                    }
                    in_c = out_c;
                    stages[s] = blocks;
                }
                Ok(Self {
                    cfg: cfg.clone(),
                    stem_conv,
                    stem_bn,
                    stem_pool: false,
                    stages,
                })
            }
            EncoderVariant::Resnet50Style => {
                let stem_conv = Conv2d::new(ps, "encoder.stem.conv", 4, 64, 7, 2, 3, false, rng)?;
                let stem_bn = BatchNorm2d::new(ps, "encoder.stem.bn", 64, frozen)?;
                let depths = [3usize, 4, 6, 3];
                let mut stages: [Vec<Block>; 4] = Default::default();
                let mut in_c = 64;
                for (s, (&out_c, &depth)) in ch.iter().zip(depths.iter()).enumerate() {
                    let mut blocks = Vec::new();
                    for b in 0..depth {
                        let stride = if b == 0 && s > 0 { 2 } else { 1 };
                        blocks.push(Block::Bottle(Bottleneck::new(
                            ps,
                            &format!("encoder.stage{}.block{b}", s + 1),
                            if b == 0 { in_c } else { out_c },
                            out_c,
                            stride,
                            frozen,
                            rng,
                        )?));
                    }
                    in_c = out_c;
                    stages[s] = blocks;
                }
                Ok(Self {
                    cfg: cfg.clone(),
                    stem_conv,
                    stem_bn,
                    stem_pool: true,
                    stages,
                })
            }
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Encodes `concat(image, visible_mask)` into the four stride-4/8/16/32
    /// feature maps.
    pub fn encode(
        &self,
        image: &Tensor,
        visible_mask: &Tensor,
        train: bool,
    ) -> Result<MultiScaleFeatures> {
        let (b, c, h, w) = image.dims4()?;
        if c != 3 {
            return Err(Error::shape(format!("image must have 3 channels, got {c}")));
        }
        let (mb, mc, mh, mw) = visible_mask.dims4()?;
        if (mb, mc, mh, mw) != (b, 1, h, w) {
            return Err(Error::shape(format!(
                "mask shape ({mb},{mc},{mh},{mw}) does not match image ({b},3,{h},{w})"
            )));
        }
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::shape(format!(
                "input size {h}x{w} must be a multiple of 32"
            )));
        }
        let x = Tensor::cat(&[image, visible_mask], 1)?;
        let mut y = ops::relu(&self.stem_bn.forward(&self.stem_conv.forward(&x)?, train)?)?;
        if self.stem_pool {
            y = ops::max_pool2d(&y, 3, 2, 1)?;
        }
        let mut outs = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in stage {
                y = block.forward(&y, train)?;
            }
            outs.push(y.clone());
        }
        let i4 = outs.pop().unwrap();
        let i3 = outs.pop().unwrap();
        let i2 = outs.pop().unwrap();
        let i1 = outs.pop().unwrap();
        Ok(MultiScaleFeatures { i1, i2, i3, i4 })
    }
}

/// Expands 3-channel stem weights to 4 channels: RGB slices copied, the mask
/// slice initialized to the mean of the RGB slices.
pub fn init_stem_from_pretrained(weights_3ch: &Tensor, target_dims: &[usize]) -> Result<Tensor> {
    let (o, c, kh, kw) = weights_3ch.dims4()?;
    if c != 3 {
        return Err(Error::shape(format!(
            "pretrained stem must have 3 input channels, got {c}"
        )));
    }
    if target_dims != [o, 4, kh, kw] {
        return Err(Error::shape(format!(
            "stem geometry mismatch: pretrained ({o},3,{kh},{kw}) cannot fill {target_dims:?}"
        )));
    }
    let mean = weights_3ch.mean_keepdim(1)?;
    Ok(Tensor::cat(&[weights_3ch, &mean], 1)?)
}

/// Applies a pretrained checkpoint to the encoder parameters in `ps`.
///
/// The stem weight may come from a 3-channel model; everything else must
/// match shapes exactly. Buffers missing from the file keep their fresh
/// initialization.
pub fn apply_pretrained(ps: &ParamStore, ck: &crate::nn::checkpoint::Checkpoint) -> Result<()> {
    for p in ps.params().iter().filter(|p| p.name.starts_with("encoder.")) {
        let key = format!("param.{}", p.name);
        let Some(t) = ck.tensors.get(&key) else {
            return Err(Error::Checkpoint(format!(
                "pretrained file is missing parameter {}",
                p.name
            )));
        };
        if t.dims() == p.var.dims() {
            p.var.set(t)?;
        } else if p.name == "encoder.stem.conv.weight" {
            let expanded = init_stem_from_pretrained(t, p.var.dims())?;
            p.var.set(&expanded)?;
        } else {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for pretrained parameter {}: file {:?}, model {:?}",
                p.name,
                t.dims(),
                p.var.dims()
            )));
        }
    }
    for b in ps.buffers().iter().filter(|b| b.name.starts_with("encoder.")) {
        if let Some(t) = ck.tensors.get(&format!("buffer.{}", b.name)) {
            if t.dims() == b.var.dims() {
                b.var.set(t)?;
            }
        }
    }
    Ok(())
}
