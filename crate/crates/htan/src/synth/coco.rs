//! COCO-style amodal annotation ingestion.
//!
//! The annotation file is JSON with `images` and `annotations` arrays; each
//! annotation carries `segmentation` (visible) and `amodal_segmentation`
//! fields, either as flat polygon coordinate lists or uncompressed
//! column-major run-length encodings. Images are padded bottom/right to the
//! next multiple of 32 and the original size is recorded for inverse mapping
//! at export time.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use image::RgbImage;
use serde::Deserialize;

use super::{AmodalSample, Dataset, IngestTransform};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;

#[derive(Debug, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
}

#[derive(Debug, Deserialize)]
struct CocoImage {
    id: i64,
    file_name: String,
    #[allow(dead_code)]
    height: Option<usize>,
    #[allow(dead_code)]
    width: Option<usize>,
}

#[derive(Debug, Deserialize)]
struct CocoAnnotation {
    id: i64,
    image_id: i64,
    segmentation: Option<Segmentation>,
    amodal_segmentation: Option<Segmentation>,
}

/// Either COCO polygons (flat x,y coordinate lists) or an uncompressed RLE.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum Segmentation {
    Polygons(Vec<Vec<f64>>),
    Rle { counts: Vec<usize>, size: [usize; 2] },
}

impl Segmentation {
    pub fn rasterize(&self, h: usize, w: usize) -> Result<BinaryMask> {
        match self {
            Segmentation::Polygons(polys) => Ok(rasterize_polygons(polys, h, w)),
            Segmentation::Rle { counts, size } => {
                let mask = decode_rle(counts, size[0], size[1])?;
                if size[0] != h || size[1] != w {
                    return Err(Error::data(format!(
                        "RLE size {:?} does not match image {h}x{w}",
                        size
                    )));
                }
                Ok(mask)
            }
        }
    }
}

/// Even-odd scanline fill of a polygon union, sampled at pixel centers.
pub fn rasterize_polygons(polys: &[Vec<f64>], h: usize, w: usize) -> BinaryMask {
    let mut mask = BinaryMask::new(h, w);
    for flat in polys {
        if flat.len() < 6 {
            continue;
        }
        let pts: Vec<(f64, f64)> = flat
            .chunks_exact(2)
            .map(|c| (c[0], c[1]))
            .collect();
        for y in 0..h {
            let yc = y as f64 + 0.5;
            let mut crossings: Vec<f64> = Vec::new();
            for i in 0..pts.len() {
                let (x1, y1) = pts[i];
                let (x2, y2) = pts[(i + 1) % pts.len()];
                if (y1 <= yc && yc < y2) || (y2 <= yc && yc < y1) {
                    crossings.push(x1 + (yc - y1) * (x2 - x1) / (y2 - y1));
                }
            }
            crossings.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for pair in crossings.chunks_exact(2) {
                let x_lo = pair[0].max(0.0);
                let x_hi = pair[1].min(w as f64);
                let mut x = x_lo.floor().max(0.0) as usize;
                while x < w {
                    let xc = x as f64 + 0.5;
                    if xc >= x_hi {
                        break;
                    }
                    if xc >= x_lo {
                        mask.set(y, x, true);
                    }
                    x += 1;
                }
            }
        }
    }
    mask
}

/// Decodes a COCO uncompressed RLE: run lengths alternate background and
/// foreground, walking the mask in column-major (Fortran) order.
pub fn decode_rle(counts: &[usize], h: usize, w: usize) -> Result<BinaryMask> {
    let total: usize = counts.iter().sum();
    if total != h * w {
        return Err(Error::data(format!(
            "RLE counts sum to {total}, expected {h}x{w}={}",
            h * w
        )));
    }
    let mut mask = BinaryMask::new(h, w);
    let mut pos = 0usize;
    let mut value = false;
    for &run in counts {
        if value {
            for p in pos..pos + run {
                // column-major: p = y + h * x
                mask.set(p % h, p / h, true);
            }
        }
        pos += run;
        value = !value;
    }
    Ok(mask)
}

/// Encodes a mask as a COCO uncompressed RLE (column-major runs).
pub fn encode_rle(mask: &BinaryMask) -> Vec<usize> {
    let (h, w) = (mask.h(), mask.w());
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0usize;
    for x in 0..w {
        for y in 0..h {
            let v = mask.get(y, x);
            if v == current {
                run += 1;
            } else {
                counts.push(run);
                current = v;
                run = 1;
            }
        }
    }
    counts.push(run);
    counts
}

fn pad_to_32(v: usize) -> usize {
    v.div_ceil(32) * 32
}

fn pad_image(img: &RgbImage) -> RgbImage {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (ph, pw) = (pad_to_32(h), pad_to_32(w));
    if ph == h && pw == w {
        return img.clone();
    }
    let mut out = RgbImage::new(pw as u32, ph as u32);
    for y in 0..h as u32 {
        for x in 0..w as u32 {
            out.put_pixel(x, y, *img.get_pixel(x, y));
        }
    }
    out
}

fn pad_mask(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = (mask.h(), mask.w());
    let (ph, pw) = (pad_to_32(h), pad_to_32(w));
    if ph == h && pw == w {
        return mask.clone();
    }
    BinaryMask::from_fn(ph, pw, |y, x| y < h && x < w && mask.get(y, x))
}

/// Loads a COCO-style amodal annotation file.
///
/// Instances missing the amodal field are skipped with a warning; an
/// unreadable image is an error.
pub fn load_cocoa_style(annotation_file: &Path, image_root: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(annotation_file).map_err(|e| Error::IoPath {
        path: annotation_file.to_path_buf(),
        source: e,
    })?;
    let file: CocoFile = serde_json::from_str(&text)?;

    let mut image_cache: HashMap<i64, (Arc<RgbImage>, IngestTransform)> = HashMap::new();
    let mut load_image = |meta: &CocoImage| -> Result<(Arc<RgbImage>, IngestTransform)> {
        if let Some(entry) = image_cache.get(&meta.id) {
            return Ok(entry.clone());
        }
        let path = image_root.join(&meta.file_name);
        let img = image::open(&path)
            .map_err(|e| Error::data(format!("unreadable image {}: {e}", path.display())))?
            .to_rgb8();
        let transform = IngestTransform {
            orig_h: img.height() as usize,
            orig_w: img.width() as usize,
        };
        let padded = Arc::new(pad_image(&img));
        image_cache.insert(meta.id, (Arc::clone(&padded), transform));
        Ok((padded, transform))
    };

    let by_id: HashMap<i64, &CocoImage> = file.images.iter().map(|i| (i.id, i)).collect();
    let mut samples = Vec::new();
    let mut transforms = Vec::new();
    for ann in &file.annotations {
        let Some(meta) = by_id.get(&ann.image_id) else {
            log::warn!("annotation {} references unknown image {}", ann.id, ann.image_id);
            continue;
        };
        let Some(amodal_seg) = &ann.amodal_segmentation else {
            log::warn!("annotation {} has no amodal segmentation; skipped", ann.id);
            continue;
        };
        let Some(visible_seg) = &ann.segmentation else {
            log::warn!("annotation {} has no visible segmentation; skipped", ann.id);
            continue;
        };
        let (image, transform) = load_image(meta)?;
        let (oh, ow) = (transform.orig_h, transform.orig_w);
        let amodal_raw = amodal_seg.rasterize(oh, ow)?;
        let visible_raw = visible_seg.rasterize(oh, ow)?;
        if amodal_raw.is_empty() {
            log::warn!("annotation {} rasterizes to an empty amodal mask; skipped", ann.id);
            continue;
        }
        // annotation noise can leave stray visible pixels outside the amodal
        // region; clamp so the sample invariant holds
        let visible = BinaryMask::from_fn(oh, ow, |y, x| {
            visible_raw.get(y, x) && amodal_raw.get(y, x)
        });
        let sample = AmodalSample {
            image,
            visible: pad_mask(&visible),
            amodal: pad_mask(&amodal_raw),
            instance_id: ann.id as u32,
            scene_id: ann.image_id as u32,
        };
        sample.validate()?;
        samples.push(sample);
        transforms.push(transform);
    }
    if samples.is_empty() {
        return Err(Error::data("annotation file yielded no usable instances"));
    }
    Ok(Dataset {
        samples,
        transforms: Some(transforms),
    })
}
