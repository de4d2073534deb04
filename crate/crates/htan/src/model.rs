//! Model assembly: wires the encoder, decoder, hyper transformer and dynamic
//! head together according to the run config and its ablation flags.

use candle_core::{Device, Tensor};

use crate::config::RunConfig;
use crate::decoder::MaskDecoder;
use crate::encoder::{self, ImageEncoder};
use crate::error::{Error, Result};
use crate::head::{self, StaticHead, TokenProjector};
use crate::hyper::HyperTransformer;
use crate::nn::checkpoint;
use crate::nn::init::init_rng;
use crate::nn::ops::{self, ResizeMode};
use crate::nn::params::ParamStore;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Seed stream ids, kept distinct so init/data-order/augmentation draws never
/// alias.
pub mod seed_stream {
    pub const INIT: u64 = 0x01;
    pub const DATA_ORDER: u64 = 0x02;
    pub const AUGMENT: u64 = 0x03;
}

pub fn derive_seed(base: u64, stream: u64) -> u64 {
    splitmix64(base ^ splitmix64(stream))
}

pub struct HtanModel {
    pub cfg: RunConfig,
    pub encoder: ImageEncoder,
    pub decoder: MaskDecoder,
    pub hyper: Option<HyperTransformer>,
    pub projector: Option<TokenProjector>,
    pub static_head: Option<StaticHead>,
}

/// Builds the model and its parameter store. Initialization is a pure
/// function of `cfg.seed`.
pub fn build_model(cfg: &RunConfig, device: &Device) -> Result<(HtanModel, ParamStore)> {
    cfg.validate()?;
    let mut ps = ParamStore::new(device.clone());
    let mut rng = init_rng(derive_seed(cfg.seed, seed_stream::INIT));
    let enc_channels = cfg.encoder.resolved_channels();

    let image_encoder = ImageEncoder::new(&mut ps, &cfg.encoder, &mut rng)?;
    let decoder = MaskDecoder::new(
        &mut ps,
        enc_channels,
        cfg.decoder_width,
        cfg.c_in,
        cfg.ablations.use_skip_connections,
        &mut rng,
    )?;
    let (hyper, projector, static_head) = if cfg.ablations.use_hyper_transformer {
        let n_tokens = cfg.n_tokens()?;
        let hyper = HyperTransformer::new(
            &mut ps,
            &cfg.transformer,
            enc_channels,
            n_tokens,
            cfg.ablations.use_multiscale_fusion,
            &mut rng,
        )?;
        let projector = TokenProjector::new(&mut ps, cfg.transformer.dim, &mut rng)?;
        (Some(hyper), Some(projector), None)
    } else {
        let static_head = StaticHead::new(&mut ps, cfg.c_in, &mut rng)?;
        (None, None, Some(static_head))
    };

    if cfg.encoder.pretrained_init {
        let path = cfg.encoder.pretrained_path.as_ref().ok_or_else(|| {
            Error::config("pretrained_init is set but pretrained_path is missing")
        })?;
        let ck = checkpoint::load(path, device)?;
        encoder::apply_pretrained(&ps, &ck)?;
    }

    Ok((
        HtanModel {
            cfg: cfg.clone(),
            encoder: image_encoder,
            decoder,
            hyper,
            projector,
            static_head,
        },
        ps,
    ))
}

impl HtanModel {
    /// Full forward pass: `(B,3,H,W)` image + `(B,1,H,W)` visible mask to
    /// `(B,1,H,W)` amodal logits.
    pub fn forward(&self, image: &Tensor, visible_mask: &Tensor, train: bool) -> Result<Tensor> {
        let (_, _, h, w) = image.dims4()?;
        let flags = &self.cfg.ablations;
        let zeros = if flags.mv_in_image && flags.mv_in_mask && flags.mv_in_dynamic_head {
            None
        } else {
            Some(visible_mask.zeros_like()?)
        };
        let pick = |on: bool| -> &Tensor {
            if on {
                visible_mask
            } else {
                zeros.as_ref().expect("zeros built for ablated pathway")
            }
        };

        let feats = self.encoder.encode(image, pick(flags.mv_in_image), train)?;
        let d_final = self.decoder.forward(&feats, pick(flags.mv_in_mask), train)?;
        let logits_s4 = match (&self.hyper, &self.projector, &self.static_head) {
            (Some(hyper), Some(projector), None) => {
                let tokens = hyper.forward(&feats, pick(flags.mv_in_dynamic_head))?;
                let params = head::tokens_to_params(projector, &tokens, self.cfg.c_in)?;
                head::apply_head(&params, &d_final)?
            }
            (None, None, Some(static_head)) => static_head.forward(&d_final)?,
            _ => unreachable!("model built with inconsistent head components"),
        };
        // the head acts pointwise at stride 4; logits are upsampled to full
        // resolution before the loss
        ops::resize2d(&logits_s4, h, w, ResizeMode::Bilinear)
    }
}
