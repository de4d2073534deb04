//! Checkpoint archive: one safetensors file holding the run config (as
//! canonical JSON in the header metadata), all named parameters and buffers,
//! the optimizer moments and the iteration counter.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{Device, Tensor};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use super::optim::AdamW;
use super::params::ParamStore;
use crate::error::{Error, Result};

const FORMAT_TAG: &str = "htan-checkpoint-v1";

fn f32_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let v = t.flatten_all()?.to_vec1::<f32>()?;
    let mut bytes = Vec::with_capacity(v.len() * 4);
    for x in v {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    Ok(bytes)
}

fn tensor_from_view(view: &TensorView<'_>, device: &Device) -> Result<Tensor> {
    if view.dtype() != Dtype::F32 {
        return Err(Error::Checkpoint(format!(
            "unsupported tensor dtype {:?}",
            view.dtype()
        )));
    }
    let data = view.data();
    let mut v = Vec::with_capacity(data.len() / 4);
    for chunk in data.chunks_exact(4) {
        v.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    Ok(Tensor::from_vec(v, view.shape().to_vec(), device)?)
}

/// Writes a checkpoint archive.
pub fn save(
    path: &Path,
    config_json: &str,
    iteration: usize,
    ps: &ParamStore,
    opt: Option<&AdamW>,
) -> Result<()> {
    let mut named: Vec<(String, Tensor)> = Vec::new();
    for p in ps.params() {
        named.push((format!("param.{}", p.name), p.var.as_tensor().clone()));
    }
    for b in ps.buffers() {
        named.push((format!("buffer.{}", b.name), b.var.as_tensor().clone()));
    }
    let mut opt_step = 0usize;
    if let Some(opt) = opt {
        opt_step = opt.step_count();
        named.extend(opt.state_tensors(ps));
    }

    let byte_blobs: Vec<(String, Vec<usize>, Vec<u8>)> = named
        .iter()
        .map(|(name, t)| Ok((name.clone(), t.dims().to_vec(), f32_bytes(t)?)))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<(String, TensorView<'_>)> = byte_blobs
        .iter()
        .map(|(name, shape, bytes)| {
            let view = TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            Ok((name.clone(), view))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut meta = HashMap::new();
    meta.insert("format".to_string(), FORMAT_TAG.to_string());
    meta.insert("config".to_string(), config_json.to_string());
    meta.insert("iteration".to_string(), iteration.to_string());
    meta.insert("opt_step".to_string(), opt_step.to_string());

    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    safetensors::serialize_to_file(views, &Some(meta), path)
        .map_err(|e| Error::Checkpoint(format!("writing {}: {e}", path.display())))?;
    Ok(())
}

/// A checkpoint loaded into memory.
pub struct Checkpoint {
    pub config_json: String,
    pub iteration: usize,
    pub opt_step: usize,
    pub tensors: HashMap<String, Tensor>,
}

pub fn load(path: &Path, device: &Device) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::IoPath {
        path: path.to_path_buf(),
        source: e,
    })?;
    let (_, meta) = SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::Checkpoint(format!("reading {}: {e}", path.display())))?;
    let md = meta.metadata().clone().unwrap_or_default();
    if md.get("format").map(String::as_str) != Some(FORMAT_TAG) {
        return Err(Error::Checkpoint(format!(
            "{} is not an htan checkpoint",
            path.display()
        )));
    }
    let config_json = md
        .get("config")
        .ok_or_else(|| Error::Checkpoint("missing config metadata".into()))?
        .clone();
    let iteration = md
        .get("iteration")
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    let opt_step = md.get("opt_step").and_then(|s| s.parse().ok()).unwrap_or(0);
    let st = SafeTensors::deserialize(&bytes)
        .map_err(|e| Error::Checkpoint(format!("reading {}: {e}", path.display())))?;
    let mut tensors = HashMap::new();
    for (name, view) in st.tensors() {
        tensors.insert(name.to_string(), tensor_from_view(&view, device)?);
    }
    Ok(Checkpoint {
        config_json,
        iteration,
        opt_step,
        tensors,
    })
}

/// Copies checkpoint tensors into a constructed model's store. Every model
/// parameter must be present with a matching shape; the error names the
/// offending parameter.
pub fn restore(ck: &Checkpoint, ps: &ParamStore) -> Result<()> {
    for p in ps.params() {
        let key = format!("param.{}", p.name);
        let t = ck
            .tensors
            .get(&key)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", p.name)))?;
        if t.dims() != p.var.dims() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for parameter {}: checkpoint {:?}, model {:?}",
                p.name,
                t.dims(),
                p.var.dims()
            )));
        }
        p.var.set(t)?;
    }
    for b in ps.buffers() {
        let key = format!("buffer.{}", b.name);
        let t = ck
            .tensors
            .get(&key)
            .ok_or_else(|| Error::Checkpoint(format!("missing buffer {}", b.name)))?;
        if t.dims() != b.var.dims() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for buffer {}: checkpoint {:?}, model {:?}",
                b.name,
                t.dims(),
                b.var.dims()
            )));
        }
        b.var.set(t)?;
    }
    Ok(())
}

/// Restores optimizer moments recorded by [`save`].
pub fn restore_optimizer(ck: &Checkpoint, ps: &ParamStore, opt: &mut AdamW) -> Result<()> {
    opt.restore_state(ps, ck.opt_step, |name| ck.tensors.get(name).cloned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn round_trip_preserves_bits_and_metadata() {
        let dev = Device::Cpu;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.safetensors");
        let mut ps = ParamStore::new(dev.clone());
        let t = Tensor::randn(0f32, 1f32, (3, 5), &dev).unwrap();
        ps.param("layer.weight", t.clone(), true).unwrap();
        ps.buffer("bn.running_mean", Tensor::randn(0f32, 1f32, (5,), &dev).unwrap())
            .unwrap();
        save(&path, "{\"seed\":7}", 42, &ps, None).unwrap();

        let ck = load(&path, &dev).unwrap();
        assert_eq!(ck.iteration, 42);
        assert_eq!(ck.config_json, "{\"seed\":7}");
        let loaded = ck.tensors.get("param.layer.weight").unwrap();
        assert_eq!(
            loaded.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            t.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );

        // restoring into a store with a different shape names the parameter
        let mut ps2 = ParamStore::new(dev.clone());
        ps2.param("layer.weight", Tensor::zeros((4, 5), candle_core::DType::F32, &dev).unwrap(), true)
            .unwrap();
        let err = restore(&ck, &ps2).unwrap_err().to_string();
        assert!(err.contains("layer.weight"), "{err}");
    }
}
