//! Hyper-transformer amodal completion network.
//!
//! Given an image and the visible mask of one occluded instance, the model
//! predicts the instance's full (amodal) mask. A dual-branch extractor
//! encodes image+mask into multi-scale features and decodes them into a mask
//! feature map; a transformer over learnable tokens, conditioned on fused
//! multi-scale image features and mask embeddings, emits one scalar per token
//! that becomes the weights and biases of a per-instance three-layer 1x1
//! convolution head applied to the mask features.
//!
//! The crate also ships a synthetic occlusion benchmark with exact ground
//! truth, a COCO-style amodal annotation loader, IoU metrics split into full
//! and occluded-region variants, a seeded training loop, and ablation
//! switches for every architectural component.

pub mod config;
pub mod decoder;
pub mod encoder;
pub mod eval;
pub mod error;
pub mod head;
pub mod hyper;
pub mod mask;
pub mod model;
pub mod nn;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
