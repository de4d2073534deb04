//! Visible-mask augmentation: morphological dilation, erosion and Gaussian
//! blur, each applied with probability 0.5 in that fixed order.
//!
//! Augmentation perturbs only the model input; ground-truth masks are never
//! touched.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::mask::BinaryMask;

const SIDES: [usize; 3] = [3, 5, 7];

/// Morphological dilation with a centered `side x side` square element
/// (zero padding outside the canvas).
pub fn dilate(mask: &BinaryMask, side: usize) -> BinaryMask {
    separable_morph(mask, side, true)
}

/// Morphological erosion with a centered square element; pixels outside the
/// canvas count as background, so shapes erode at the border.
pub fn erode(mask: &BinaryMask, side: usize) -> BinaryMask {
    separable_morph(mask, side, false)
}

/// A square structuring element separates into a horizontal and a vertical
/// run, turning the O(s^2) window scan into two O(s) passes.
fn separable_morph(mask: &BinaryMask, side: usize, dilate: bool) -> BinaryMask {
    assert!(side % 2 == 1, "structuring element side must be odd");
    let r = side / 2;
    let (h, w) = (mask.h(), mask.w());
    let pass = |src: &BinaryMask, horizontal: bool| {
        BinaryMask::from_fn(h, w, |y, x| {
            let (lo, hi, fixed) = if horizontal {
                (x.saturating_sub(r), (x + r).min(w - 1), y)
            } else {
                (y.saturating_sub(r), (y + r).min(h - 1), x)
            };
            let mut acc = !dilate;
            // erosion must see the virtual zero padding
            if !dilate {
                let full_lo = if horizontal { x as isize - r as isize } else { y as isize - r as isize };
                let full_hi = if horizontal { x + r } else { y + r };
                let limit = if horizontal { w } else { h };
                if full_lo < 0 || full_hi >= limit {
                    return false;
                }
            }
            for i in lo..=hi {
                let v = if horizontal {
                    src.get(fixed, i)
                } else {
                    src.get(i, fixed)
                };
                if dilate {
                    acc |= v;
                } else {
                    acc &= v;
                }
            }
            acc
        })
    };
    let tmp = pass(mask, true);
    pass(&tmp, false)
}

/// Gaussian-blurs the mask as a real-valued field and re-thresholds at 0.5
/// (`>= 0.5` keeps a pixel). Zero padding; kernel radius is `ceil(3 sigma)`.
pub fn gaussian_blur_threshold(mask: &BinaryMask, sigma: f64) -> BinaryMask {
    let (h, w) = (mask.h(), mask.w());
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for i in -radius..=radius {
        kernel.push((-((i * i) as f64) / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= norm;
    }

    let mut field: Vec<f64> = mask.data().iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    // horizontal
    let mut tmp = vec![0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let ix = x as isize + ki as isize - radius;
                if ix >= 0 && ix < w as isize {
                    acc += k * field[y * w + ix as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    // vertical
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let iy = y as isize + ki as isize - radius;
                if iy >= 0 && iy < h as isize {
                    acc += k * tmp[iy as usize * w + x];
                }
            }
            field[y * w + x] = acc;
        }
    }
    BinaryMask::from_fn(h, w, |y, x| field[y * w + x] >= 0.5)
}

/// Applies the training-time augmentation pipeline.
///
/// RNG draw order (relied on by replay tests): dilation coin, then its side
/// if it hit; erosion coin, then its side; blur coin, then its sigma uniform
/// in [0.5, 1.5). If the pipeline empties the mask entirely the input is
/// returned unchanged.
pub fn augment_visible_mask(mask: &BinaryMask, rng: &mut ChaCha8Rng) -> BinaryMask {
    let mut out = mask.clone();
    if rng.gen_bool(0.5) {
        let side = SIDES[rng.gen_range(0..SIDES.len())];
        out = dilate(&out, side);
    }
    if rng.gen_bool(0.5) {
        let side = SIDES[rng.gen_range(0..SIDES.len())];
        out = erode(&out, side);
    }
    if rng.gen_bool(0.5) {
        let sigma = 0.5 + rng.gen::<f64>();
        out = gaussian_blur_threshold(&out, sigma);
    }
    if out.is_empty() {
        return mask.clone();
    }
    out
}
