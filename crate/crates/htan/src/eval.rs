//! Evaluation: intersection-over-union on full amodal masks and restricted
//! to occluded regions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::model::HtanModel;
use crate::synth::Dataset;
use crate::train::batch_tensors;

/// `|a ∩ b| / |a ∪ b|`, defined as 1.0 when both masks are empty.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let union = a.union_count(b);
    if union == 0 {
        return 1.0;
    }
    a.intersection_count(b) as f64 / union as f64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerInstance {
    pub scene_id: u32,
    pub instance_id: u32,
    pub iou_full: f64,
    /// Absent for instances with no occluded ground truth.
    pub iou_occ: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub miou_full: f64,
    /// Averaged only over instances with non-empty occluded ground truth.
    pub miou_occ: f64,
    pub n_instances: usize,
    pub n_occluded: usize,
    pub per_instance: Vec<PerInstance>,
}

/// Scores predicted masks against ground truth.
///
/// The occluded ground truth is `amodal \ visible`; the occluded prediction
/// subtracts the ground-truth visible mask from the predicted amodal mask, so
/// a visible-only predictor scores exactly zero on occluded regions.
pub fn score_predictions(
    samples: &[crate::synth::AmodalSample],
    predictions: &[BinaryMask],
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::data("cannot evaluate an empty dataset"));
    }
    if samples.len() != predictions.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} samples",
            predictions.len(),
            samples.len()
        )));
    }
    let mut per_instance = Vec::with_capacity(samples.len());
    let mut sum_full = 0.0;
    let mut sum_occ = 0.0;
    let mut n_occluded = 0usize;
    for (s, pred) in samples.iter().zip(predictions.iter()) {
        let iou_full = iou(pred, &s.amodal);
        sum_full += iou_full;
        let occ_gt = s.amodal.minus(&s.visible);
        let iou_occ = if occ_gt.is_empty() {
            None
        } else {
            let occ_pred = pred.minus(&s.visible);
            let v = iou(&occ_pred, &occ_gt);
            sum_occ += v;
            n_occluded += 1;
            Some(v)
        };
        per_instance.push(PerInstance {
            scene_id: s.scene_id,
            instance_id: s.instance_id,
            iou_full,
            iou_occ,
        });
    }
    Ok(EvalReport {
        miou_full: sum_full / samples.len() as f64,
        miou_occ: if n_occluded > 0 {
            sum_occ / n_occluded as f64
        } else {
            0.0
        },
        n_instances: samples.len(),
        n_occluded,
        per_instance,
    })
}

/// Runs the model over the dataset in eval mode and scores it.
pub fn evaluate(model: &HtanModel, ds: &Dataset, batch_size: usize) -> Result<EvalReport> {
    let predictions = predict_dataset(model, ds, batch_size)?;
    score_predictions(&ds.samples, &predictions)
}

/// Predicted amodal masks for every sample, in dataset order.
pub fn predict_dataset(
    model: &HtanModel,
    ds: &Dataset,
    batch_size: usize,
) -> Result<Vec<BinaryMask>> {
    if ds.is_empty() {
        return Err(Error::data("cannot evaluate an empty dataset"));
    }
    let device = candle_core::Device::Cpu;
    let mut out = Vec::with_capacity(ds.len());
    let mut start = 0usize;
    while start < ds.len() {
        let end = (start + batch_size).min(ds.len());
        let idx: Vec<usize> = (start..end).collect();
        let (images, masks, _) = batch_tensors(ds, &idx, None, &device)?;
        let logits = model.forward(&images, &masks, false)?;
        let (h, w) = ds.samples[start].canvas();
        let masks = crate::head::predict_mask(&logits, (h, w), model.cfg.threshold)?;
        out.extend(masks);
        start = end;
    }
    Ok(out)
}
