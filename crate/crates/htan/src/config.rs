//! Run configuration: architecture, optimization and ablation switches.
//! Serialized with every checkpoint; reloading reproduces the exact model
//! shape.

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::head::compute_token_count;
use crate::hyper::HyperTransformerConfig;

/// Component and mask-pathway switches.
///
/// `use_hyper_transformer = false` swaps the dynamic head for a static
/// learned three-layer 1x1 head shared across instances (and builds no
/// transformer parameters at all). The `mv_in_*` flags zero the visible-mask
/// input of one pathway while leaving the architecture unchanged.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(default)]
pub struct AblationFlags {
    pub use_hyper_transformer: bool,
    pub use_multiscale_fusion: bool,
    pub use_skip_connections: bool,
    pub mv_in_image: bool,
    pub mv_in_mask: bool,
    pub mv_in_dynamic_head: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            use_hyper_transformer: true,
            use_multiscale_fusion: true,
            use_skip_connections: true,
            mv_in_image: true,
            mv_in_mask: true,
            mv_in_dynamic_head: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub decoder_width: usize,
    pub transformer: HyperTransformerConfig,
    /// Channel count of the decoder output / dynamic head input.
    pub c_in: usize,
    pub lr: f64,
    pub warmup_iters: usize,
    pub total_iters: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_decay: f64,
    /// Evaluate (and log a metrics record) every this many iterations.
    pub eval_interval: usize,
    /// Mask binarization threshold at prediction time.
    pub threshold: f64,
    /// Apply visible-mask augmentation during training.
    pub augment: bool,
    pub ablations: AblationFlags,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            decoder_width: 64,
            transformer: HyperTransformerConfig::default(),
            c_in: 8,
            lr: 3e-4,
            warmup_iters: 500,
            total_iters: 5000,
            batch_size: 16,
            seed: 0,
            weight_decay: 0.05,
            eval_interval: 500,
            threshold: 0.5,
            augment: true,
            ablations: AblationFlags::default(),
        }
    }
}

impl RunConfig {
    pub fn n_tokens(&self) -> Result<usize> {
        compute_token_count(self.c_in)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.transformer.validate()?;
        if self.ablations.use_hyper_transformer && self.ablations.use_multiscale_fusion {
            // channel concatenation of four projections must land on dim
            if self.transformer.dim % 4 != 0 {
                return Err(Error::config(format!(
                    "multi-scale fusion needs transformer.dim divisible by 4, got {}",
                    self.transformer.dim
                )));
            }
        }
        compute_token_count(self.c_in)?;
        if self.decoder_width == 0 {
            return Err(Error::config("decoder_width must be positive"));
        }
        if self.batch_size == 0 || self.total_iters == 0 {
            return Err(Error::config("batch_size and total_iters must be positive"));
        }
        if !(0.0..1.0).contains(&self.threshold) || self.threshold == 0.0 {
            return Err(Error::config(format!(
                "threshold must lie in (0,1), got {}",
                self.threshold
            )));
        }
        if self.eval_interval == 0 {
            return Err(Error::config("eval_interval must be positive"));
        }
        Ok(())
    }

    /// Canonical JSON used in checkpoints and resolved-config files.
    pub fn canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Applies one `dotted.path=value` override. Values parse as JSON when
    /// possible (numbers, booleans, arrays) and fall back to strings.
    pub fn apply_override(&mut self, key: &str, raw: &str) -> Result<()> {
        let mut root = serde_json::to_value(&*self)?;
        {
            let parts: Vec<&str> = key.split('.').collect();
            let (last, parents) = parts.split_last().expect("split produces at least one part");
            let parent = if parents.is_empty() {
                &mut root
            } else {
                let pointer = format!("/{}", parents.join("/"));
                root.pointer_mut(&pointer)
                    .ok_or_else(|| Error::config(format!("override {key}: unknown path")))?
            };
            let obj = parent
                .as_object_mut()
                .ok_or_else(|| Error::config(format!("override {key}: not an object path")))?;
            if !obj.contains_key(*last) {
                return Err(Error::config(format!("override {key}: unknown field {last}")));
            }
            let value: serde_json::Value = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            obj.insert((*last).to_string(), value);
        }
        *self = serde_json::from_value(root)
            .map_err(|e| Error::config(format!("override {key}={raw}: {e}")))?;
        Ok(())
    }

    /// Parses a `key=value` pair and applies it.
    pub fn apply_override_str(&mut self, spec: &str) -> Result<()> {
        let (key, value) = spec
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override '{spec}' is not key=value")))?;
        self.apply_override(key.trim(), value.trim())
    }
}
