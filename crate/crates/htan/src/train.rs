//! Training loop: BCE objective, AdamW with linear warmup, periodic
//! evaluation with best-checkpoint retention, and an append-only JSON-lines
//! metrics log. Fully seeded: initialization, data order and augmentation
//! derive from `RunConfig::seed` through separate streams.

use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::model::{build_model, derive_seed, seed_stream, HtanModel};
use crate::nn::checkpoint;
use crate::nn::optim::{warmup_lr, AdamW, AdamWConfig};
use crate::nn::params::ParamStore;
use crate::synth::{augment::augment_visible_mask, Dataset};

/// Binary cross-entropy over logits, averaged over every pixel and instance.
///
/// Computed in f64 with the stable form `relu(z) - z*y + ln(1 + e^-|z|)`;
/// gradients flow back to the f32 graph through the dtype cast. Non-finite
/// losses (from non-finite logits) are an error.
pub fn bce_loss(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    if logits.dims() != targets.dims() {
        return Err(Error::shape(format!(
            "bce: logits {:?} vs targets {:?}",
            logits.dims(),
            targets.dims()
        )));
    }
    let z = logits.to_dtype(DType::F64)?;
    let y = targets.to_dtype(DType::F64)?;
    let loss = z
        .relu()?
        .sub(&z.mul(&y)?)?
        .add(&z.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?)?
        .mean_all()?;
    let value = loss.to_scalar::<f64>()?;
    if !value.is_finite() {
        return Err(Error::Training(format!("non-finite loss {value}")));
    }
    Ok(loss)
}

/// Assembles `(images, visible_masks, amodal_masks)` tensors for the given
/// sample indices. With an augmentation RNG, visible masks are perturbed
/// (ground truth never is).
pub fn batch_tensors(
    ds: &Dataset,
    indices: &[usize],
    mut augment_rng: Option<&mut ChaCha8Rng>,
    device: &Device,
) -> Result<(Tensor, Tensor, Tensor)> {
    let b = indices.len();
    let (h, w) = ds.samples[indices[0]].canvas();
    let mut images = Vec::with_capacity(b * 3 * h * w);
    let mut vis = Vec::with_capacity(b * h * w);
    let mut amo = Vec::with_capacity(b * h * w);
    for &i in indices {
        let s = &ds.samples[i];
        if s.canvas() != (h, w) {
            return Err(Error::shape(format!(
                "sample {i} has size {:?}, batch expects {:?}",
                s.canvas(),
                (h, w)
            )));
        }
        // HWC u8 -> CHW f32 in [0,1]
        let raw = s.image.as_raw();
        for c in 0..3 {
            for p in 0..h * w {
                images.push(raw[p * 3 + c] as f32 / 255.0);
            }
        }
        let visible = match augment_rng.as_deref_mut() {
            Some(rng) => augment_visible_mask(&s.visible, rng),
            None => s.visible.clone(),
        };
        vis.extend(visible.to_f32());
        amo.extend(s.amodal.to_f32());
    }
    Ok((
        Tensor::from_vec(images, (b, 3, h, w), device)?,
        Tensor::from_vec(vis, (b, 1, h, w), device)?,
        Tensor::from_vec(amo, (b, 1, h, w), device)?,
    ))
}

/// Deterministic epoch-shuffled batch order, stateless so resuming at any
/// iteration reproduces the schedule exactly.
pub struct BatchScheduler {
    n: usize,
    batch: usize,
    data_seed: u64,
}

impl BatchScheduler {
    pub fn new(n: usize, batch: usize, data_seed: u64) -> Self {
        Self { n, batch, data_seed }
    }

    fn epoch_perm(&self, epoch: usize) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.data_seed, epoch as u64));
        // Fisher-Yates
        for i in (1..self.n).rev() {
            let j = (rng.next_u64() % (i as u64 + 1)) as usize;
            perm.swap(i, j);
        }
        perm
    }

    /// Sample indices for a 1-based iteration.
    pub fn for_iteration(&self, iter: usize) -> Vec<usize> {
        let start = (iter - 1) * self.batch;
        let mut out = Vec::with_capacity(self.batch);
        let mut epoch = start / self.n;
        let mut perm = self.epoch_perm(epoch);
        for k in start..start + self.batch {
            if k / self.n != epoch {
                epoch = k / self.n;
                perm = self.epoch_perm(epoch);
            }
            out.push(perm[k % self.n]);
        }
        out
    }
}

use rand::RngCore;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub miou_full: f64,
    pub miou_occ: f64,
    pub loss: f64,
}

#[derive(Debug)]
pub struct TrainArtifacts {
    pub best_iteration: usize,
    pub best_miou_occ: f64,
    pub final_report: EvalReport,
    pub best_checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
}

/// Trains a model on `train_ds`, evaluating on `eval_ds` every
/// `eval_interval` iterations and retaining the best checkpoint by occluded
/// mIoU. `resume` restores parameters, optimizer moments and the schedule
/// position from an earlier checkpoint of the same config.
pub fn train(
    cfg: &RunConfig,
    train_ds: &Dataset,
    eval_ds: &Dataset,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainArtifacts> {
    cfg.validate()?;
    if train_ds.is_empty() || eval_ds.is_empty() {
        return Err(Error::data("training needs non-empty train and eval splits"));
    }
    std::fs::create_dir_all(out_dir)?;
    let device = Device::Cpu;
    let (model, ps) = build_model(cfg, &device)?;
    let mut opt = AdamW::new(
        &ps,
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            warmup_iters: cfg.warmup_iters,
            ..Default::default()
        },
    )?;

    let mut start_iter = 1usize;
    if let Some(ck_path) = resume {
        let ck = checkpoint::load(ck_path, &device)?;
        let ck_cfg = RunConfig::from_json(&ck.config_json)?;
        let mut a = ck_cfg.clone();
        let mut b = cfg.clone();
        // extending a run is legitimate; anything else must match exactly
        a.total_iters = 0;
        b.total_iters = 0;
        if a != b {
            return Err(Error::config(
                "checkpoint config does not match the current run config",
            ));
        }
        checkpoint::restore(&ck, &ps)?;
        checkpoint::restore_optimizer(&ck, &ps, &mut opt)?;
        start_iter = ck.iteration + 1;
        log::info!("resumed from {} at iteration {}", ck_path.display(), ck.iteration);
    }

    let scheduler = BatchScheduler::new(
        train_ds.len(),
        cfg.batch_size,
        derive_seed(cfg.seed, seed_stream::DATA_ORDER),
    );
    let aug_seed = derive_seed(cfg.seed, seed_stream::AUGMENT);

    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics = std::fs::OpenOptions::new()
        .create(true)
        .append(start_iter > 1)
        .write(true)
        .truncate(start_iter == 1)
        .open(&metrics_path)?;

    let best_path = out_dir.join("checkpoint.best");
    let final_path = out_dir.join("checkpoint.final");
    let config_json = cfg.canonical_json()?;
    let mut best_miou_occ = f64::NEG_INFINITY;
    let mut best_iteration = 0usize;
    let mut final_report: Option<EvalReport> = None;

    let t0 = std::time::Instant::now();
    for iter in start_iter..=cfg.total_iters {
        let indices = scheduler.for_iteration(iter);
        let mut aug_rng = ChaCha8Rng::seed_from_u64(derive_seed(aug_seed, iter as u64));
        let (images, vis, amo) = batch_tensors(
            train_ds,
            &indices,
            cfg.augment.then_some(&mut aug_rng),
            &device,
        )?;
        let logits = model.forward(&images, &vis, true)?;
        let loss = bce_loss(&logits, &amo).map_err(|e| match e {
            Error::Training(msg) => {
                let ids: Vec<(u32, u32)> = indices
                    .iter()
                    .map(|&i| (train_ds.samples[i].scene_id, train_ds.samples[i].instance_id))
                    .collect();
                Error::Training(format!(
                    "{msg} at iteration {iter}; batch (scene_id, instance_id): {ids:?}"
                ))
            }
            other => other,
        })?;
        let loss_value = loss.to_scalar::<f64>()?;
        let grads = loss.backward()?;
        opt.step(warmup_lr(cfg.lr, cfg.warmup_iters, iter), &ps, &grads)?;

        if iter % 50 == 0 || iter == start_iter {
            log::info!(
                "iter {iter}/{} loss {loss_value:.4} ({:.2} s/iter)",
                cfg.total_iters,
                t0.elapsed().as_secs_f64() / (iter - start_iter + 1) as f64
            );
        }

        if iter % cfg.eval_interval == 0 || iter == cfg.total_iters {
            let report = evaluate(&model, eval_ds, cfg.batch_size)?;
            let record = MetricsRecord {
                iteration: iter,
                miou_full: report.miou_full,
                miou_occ: report.miou_occ,
                loss: loss_value,
            };
            serde_json::to_writer(&mut metrics, &record)?;
            metrics.write_all(b"\n")?;
            metrics.flush()?;
            log::info!(
                "eval @ {iter}: miou_full {:.4} miou_occ {:.4}",
                report.miou_full,
                report.miou_occ
            );
            if report.miou_occ > best_miou_occ {
                best_miou_occ = report.miou_occ;
                best_iteration = iter;
                checkpoint::save(&best_path, &config_json, iter, &ps, Some(&opt))?;
            }
            if iter == cfg.total_iters {
                final_report = Some(report);
            }
        }
    }
    checkpoint::save(&final_path, &config_json, cfg.total_iters, &ps, Some(&opt))?;
    let final_report = final_report.expect("final iteration always evaluates");
    Ok(TrainArtifacts {
        best_iteration,
        best_miou_occ,
        final_report,
        best_checkpoint: best_path,
        final_checkpoint: final_path,
        metrics_path,
    })
}

/// Rebuilds a model from a checkpoint file.
pub fn load_model(ck_path: &Path, overrides: &[String]) -> Result<(HtanModel, ParamStore)> {
    let device = Device::Cpu;
    let ck = checkpoint::load(ck_path, &device)?;
    let mut cfg = RunConfig::from_json(&ck.config_json)?;
    for o in overrides {
        cfg.apply_override_str(o)?;
    }
    let (model, ps) = build_model(&cfg, &device)?;
    checkpoint::restore(&ck, &ps)?;
    Ok((model, ps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn bce_saturated_and_analytic_values() {
        let dev = Device::Cpu;
        // saturated correct predictions
        let y = Tensor::from_vec(vec![1f32, 0.0, 1.0, 0.0], (4,), &dev).unwrap();
        let z = Tensor::from_vec(vec![100f32, -100.0, 100.0, -100.0], (4,), &dev).unwrap();
        let loss = bce_loss(&z, &y).unwrap().to_scalar::<f64>().unwrap();
        assert!(loss < 1e-6, "{loss}");
        // zero logits: exactly ln 2
        let z0 = Tensor::zeros((8, 8), DType::F32, &dev).unwrap();
        let y0 = Tensor::zeros((8, 8), DType::F32, &dev).unwrap();
        let loss = bce_loss(&z0, &y0).unwrap().to_scalar::<f64>().unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-9, "{loss}");
    }

    #[test]
    fn bce_matches_per_pixel_oracle() {
        let dev = Device::Cpu;
        let z: Vec<f64> = vec![0.3, -1.7, 2.2, -0.4, 5.0, -3.3, 0.01, 1.1,
                               -2.0, 0.9, -0.6, 4.2, -5.1, 0.0, 2.7, -1.2];
        let y: Vec<f64> = vec![1., 0., 1., 1., 0., 0., 1., 0.,
                               1., 1., 0., 1., 0., 0., 1., 1.];
        let zt = Tensor::from_vec(z.clone(), (4, 4), &dev).unwrap();
        let yt = Tensor::from_vec(y.clone(), (4, 4), &dev).unwrap();
        let got = bce_loss(&zt, &yt).unwrap().to_scalar::<f64>().unwrap();
        let want: f64 = z
            .iter()
            .zip(y.iter())
            .map(|(&z, &y)| {
                let p = 1.0 / (1.0 + (-z).exp());
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 16.0;
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    #[test]
    fn bce_rejects_non_finite() {
        let dev = Device::Cpu;
        let z = Tensor::from_vec(vec![f32::NAN, 0.0], (2,), &dev).unwrap();
        let y = Tensor::zeros((2,), DType::F32, &dev).unwrap();
        assert!(bce_loss(&z, &y).is_err());
        let z = Tensor::from_vec(vec![f32::INFINITY, 0.0], (2,), &dev).unwrap();
        assert!(bce_loss(&z, &y).is_err());
    }

    #[test]
    fn bce_nonnegative_property() {
        use rand::{Rng, SeedableRng};
        let dev = Device::Cpu;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let z: Vec<f64> = (0..32).map(|_| rng.gen_range(-8.0..8.0)).collect();
            let y: Vec<f64> = (0..32).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
            let loss = bce_loss(
                &Tensor::from_vec(z, (32,), &dev).unwrap(),
                &Tensor::from_vec(y, (32,), &dev).unwrap(),
            )
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
            assert!(loss >= 0.0);
        }
    }

    #[test]
    fn scheduler_is_stateless_and_covers_epochs() {
        let s = BatchScheduler::new(10, 4, 7);
        // same iteration twice: identical batch
        assert_eq!(s.for_iteration(3), s.for_iteration(3));
        // one epoch = 2.5 batches; iterations 1..=5 cover samples 0..10 twice
        let mut seen = vec![0usize; 10];
        for it in 1..=5 {
            for i in s.for_iteration(it) {
                seen[i] += 1;
            }
        }
        assert_eq!(seen, vec![2; 10]);
        // different epochs use different permutations (overwhelmingly likely)
        assert_ne!(s.epoch_perm(0), s.epoch_perm(1));
    }
}
