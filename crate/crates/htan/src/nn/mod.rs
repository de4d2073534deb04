//! Minimal neural-network toolkit: candle tensors and autograd underneath,
//! BLAS-backed custom ops for the heavy lifting, explicit parameter registry,
//! AdamW, and a self-contained checkpoint format.

pub mod blas;
pub mod checkpoint;
pub mod init;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod params;
