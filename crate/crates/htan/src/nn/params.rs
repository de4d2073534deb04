//! Named parameter registry.
//!
//! Parameters are registered in construction order under stable dotted names;
//! the optimizer and checkpoint format both rely on that ordering, so model
//! builds are reproducible run to run.

use std::collections::HashMap;

use candle_core::{Device, Tensor, Var};

use crate::error::{Error, Result};

/// A trainable parameter.
pub struct ParamEntry {
    pub name: String,
    pub var: Var,
    /// Whether weight decay applies (false for biases, norm affines, tokens).
    pub decay: bool,
}

/// A non-trainable state tensor saved with checkpoints (e.g. batch-norm
/// running statistics).
pub struct BufferEntry {
    pub name: String,
    pub var: Var,
}

pub struct ParamStore {
    device: Device,
    params: Vec<ParamEntry>,
    buffers: Vec<BufferEntry>,
    names: HashMap<String, bool>,
}

impl ParamStore {
    pub fn new(device: Device) -> Self {
        Self {
            device,
            params: Vec::new(),
            buffers: Vec::new(),
            names: HashMap::new(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn claim(&mut self, name: &str) -> Result<()> {
        if self.names.insert(name.to_string(), true).is_some() {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        Ok(())
    }

    /// Registers a trainable parameter initialized from `t`.
    pub fn param(&mut self, name: impl Into<String>, t: Tensor, decay: bool) -> Result<Var> {
        let name = name.into();
        self.claim(&name)?;
        let var = Var::from_tensor(&t)?;
        self.params.push(ParamEntry {
            name,
            var: var.clone(),
            decay,
        });
        Ok(var)
    }

    /// Registers a non-trainable buffer.
    pub fn buffer(&mut self, name: impl Into<String>, t: Tensor) -> Result<Var> {
        let name = name.into();
        self.claim(&name)?;
        let var = Var::from_tensor(&t)?;
        self.buffers.push(BufferEntry {
            name,
            var: var.clone(),
        });
        Ok(var)
    }

    pub fn params(&self) -> &[ParamEntry] {
        &self.params
    }

    pub fn buffers(&self) -> &[BufferEntry] {
        &self.buffers
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.var)
            .or_else(|| self.buffers.iter().find(|b| b.name == name).map(|b| &b.var))
    }

    /// Total number of scalar parameters (excluding buffers).
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.var.elem_count()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_duplicate_names() {
        let dev = Device::Cpu;
        let mut ps = ParamStore::new(dev.clone());
        let t = Tensor::zeros((2, 2), candle_core::DType::F32, &dev).unwrap();
        ps.param("a.weight", t.clone(), true).unwrap();
        assert!(ps.param("a.weight", t, true).is_err());
    }

    #[test]
    fn counts_scalars() {
        let dev = Device::Cpu;
        let mut ps = ParamStore::new(dev.clone());
        let t = Tensor::zeros((3, 4), candle_core::DType::F32, &dev).unwrap();
        ps.param("w", t, true).unwrap();
        assert_eq!(ps.param_count(), 12);
    }
}
