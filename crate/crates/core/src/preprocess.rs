//! Resize, normalize and pad raw images into square model inputs.

use boxseg_tensor::{resize_bilinear, Tensor};
use rand::Rng;

use crate::bbox::Bbox;
use crate::dataio::{CaseRecord, ImageLayout};
use crate::error::{contract, CoreError, Result};

pub const DEFAULT_SIZE: usize = 256;

/// A case plane ready for the network.
#[derive(Clone, Debug)]
pub struct PreparedInput {
    /// `[3, S, S]` in `[0, 1]`, zero outside the resized region.
    pub image: Tensor,
    pub scale: f64,
    /// Zero padding (right, bottom) in pixels.
    pub pad: (usize, usize),
    /// Boxes in `S × S` coordinates.
    pub boxes: Vec<Bbox>,
    /// `(H, W)` before resizing.
    pub original_size: (usize, usize),
    /// `(h, w)` after resizing, before padding.
    pub resized_size: (usize, usize),
}

impl PreparedInput {
    pub fn size(&self) -> usize {
        self.image.shape()[1]
    }

    /// Per-pixel maximum over channels, `S × S`.
    pub fn intensity(&self) -> Vec<f32> {
        intensity_map(&self.image)
    }
}

pub fn intensity_map(image: &Tensor) -> Vec<f32> {
    let n = image.shape()[1] * image.shape()[2];
    let mut out = image.data()[..n].to_vec();
    for plane in image.data().chunks_exact(n).skip(1) {
        for (o, &v) in out.iter_mut().zip(plane) {
            *o = o.max(v);
        }
    }
    out
}

/// Scale factor and resized `(h, w)` for the longest side to become `target`.
pub fn resized_dims(h: usize, w: usize, target: usize) -> (f64, usize, usize) {
    let scale = target as f64 / h.max(w) as f64;
    let r = |d: usize| ((d as f64 * scale).round() as usize).clamp(1, target);
    (scale, r(h), r(w))
}

/// Bilinear resize of `[C, H, W]` so the longest side equals `target`.
pub fn resize_longest_side(img: &Tensor, target: usize) -> Result<(Tensor, f64)> {
    let s = img.shape();
    if s.len() != 3 {
        return contract(format!("expected [C, H, W], got {s:?}"));
    }
    let (scale, h, w) = resized_dims(s[1], s[2], target);
    Ok((resize_bilinear(img, h, w)?, scale))
}

/// Zero-pads `[C, h, w]` on the right and bottom to `[C, target, target]`.
pub fn pad_to_square(img: &Tensor, target: usize) -> Result<Tensor> {
    let s = img.shape();
    if s.len() != 3 || s[1] > target || s[2] > target {
        return contract(format!("cannot pad {s:?} to {target}x{target}"));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = vec![0.0f32; c * target * target];
    for ch in 0..c {
        for y in 0..h {
            let src = &img.data()[(ch * h + y) * w..(ch * h + y + 1) * w];
            out[(ch * target + y) * target..(ch * target + y) * target + w].copy_from_slice(src);
        }
    }
    Ok(Tensor::new(vec![c, target, target], out)?)
}

/// Percentile of sorted values with linear interpolation between ranks.
pub fn percentile(sorted: &[f32], p: f64) -> f64 {
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    let frac = pos - lo as f64;
    sorted[lo] as f64 * (1.0 - frac) + sorted[hi] as f64 * frac
}

/// Clips to the 0.5th–99.5th percentile range, then min–max scales to
/// `[0, 1]`. A constant image maps to zeros.
pub fn normalize_intensity(img: &Tensor) -> Tensor {
    let mut sorted = img.data().to_vec();
    sorted.sort_unstable_by(f32::total_cmp);
    let lo = percentile(&sorted, 0.5);
    let hi = percentile(&sorted, 99.5);
    if hi - lo <= 0.0 {
        return Tensor::zeros(img.shape().to_vec());
    }
    img.map(|v| ((v as f64).clamp(lo, hi) - lo) as f32 / (hi - lo) as f32)
}

/// Maps a box through the resize: floor on the min corner, ceil on the max
/// corner, clipped to the resized extent.
pub fn scale_box(b: &Bbox, scale: f64, resized: (usize, usize)) -> Bbox {
    let (h, w) = (resized.0 as f64, resized.1 as f64);
    // Guard against 0.49999 style float noise before rounding outward.
    let f = |v: f64| (v * scale + 1e-9).floor();
    let c = |v: f64| (v * scale - 1e-9).ceil();
    Bbox::new(
        f(b.x_min).clamp(0.0, w),
        f(b.y_min).clamp(0.0, h),
        c(b.x_max).clamp(0.0, w),
        c(b.y_max).clamp(0.0, h),
    )
}

/// Resize → normalize → pad a `[C, H, W]` plane, replicating single-channel
/// input to three channels.
pub fn prepare_plane(chw: &[f32], c: usize, h: usize, w: usize, target: usize) -> Result<(Tensor, f64, (usize, usize))> {
    if c != 1 && c != 3 {
        return contract(format!("expected 1 or 3 channels, got {c}"));
    }
    let img = Tensor::new(vec![c, h, w], chw.to_vec())?;
    let (resized, scale) = resize_longest_side(&img, target)?;
    let norm = normalize_intensity(&resized);
    let (rh, rw) = (norm.shape()[1], norm.shape()[2]);
    let three = if c == 1 {
        let mut d = Vec::with_capacity(3 * rh * rw);
        for _ in 0..3 {
            d.extend_from_slice(norm.data());
        }
        Tensor::new(vec![3, rh, rw], d)?
    } else {
        norm
    };
    Ok((pad_to_square(&three, target)?, scale, (rh, rw)))
}

/// Prepares one plane of a case. `slice_idx` is required for volumes and
/// must be absent otherwise.
pub fn prepare_case(case: &CaseRecord, slice_idx: Option<usize>, target: usize) -> Result<PreparedInput> {
    let slice = match (case.layout, slice_idx) {
        (ImageLayout::Volume, Some(s)) if s < case.depth() => s,
        (ImageLayout::Volume, Some(s)) => {
            return contract(format!("slice {s} out of range for depth {}", case.depth()))
        }
        (ImageLayout::Volume, None) => return contract("volume case needs a slice index"),
        (_, None) => 0,
        (_, Some(_)) => return contract("slice index given for a 2-D case"),
    };
    let (h, w) = (case.height(), case.width());
    let plane = case.plane_chw(slice)?;
    let (image, scale, resized) = prepare_plane(&plane, case.channels(), h, w, target)?;
    let boxes = case.boxes.iter().map(|b| scale_box(&b.bbox, scale, resized)).collect();
    Ok(PreparedInput {
        image,
        scale,
        pad: (target - resized.1, target - resized.0),
        boxes,
        original_size: (h, w),
        resized_size: resized,
    })
}

/// Brings a binary `H × W` mask into prepared `S × S` geometry (bilinear,
/// threshold 0.5, zero padding).
pub fn prepare_mask(mask: &[u8], h: usize, w: usize, target: usize) -> Result<Vec<u8>> {
    let t = Tensor::new(vec![1, h, w], mask.iter().map(|&v| f32::from(v != 0)).collect())?;
    let (r, _) = resize_longest_side(&t, target)?;
    let p = pad_to_square(&r, target)?;
    Ok(p.data().iter().map(|&v| u8::from(v >= 0.5)).collect())
}

/// Draws a slice index uniformly; when labels exist, only slices with a
/// non-empty label map are eligible.
pub fn sample_slice<R: Rng>(case: &CaseRecord, rng: &mut R) -> Result<usize> {
    let d = case.depth();
    if case.gts.is_none() {
        return Ok(rng.random_range(0..d));
    }
    let eligible: Vec<usize> = (0..d)
        .filter(|&s| case.gt_plane(s).is_some_and(|p| p.iter().any(|&v| v != 0)))
        .collect();
    if eligible.is_empty() {
        return Err(CoreError::Sampling(format!("case '{}' has no labelled slice", case.id)));
    }
    Ok(eligible[rng.random_range(0..eligible.len())])
}

/// Mirrors the top-left `valid = (h, w)` region of `img[C,S,S]`, of an
/// `S × S` mask and of the boxes.
pub fn flip_in_place(img: &mut Tensor, gt: &mut [u8], boxes: &mut [Bbox], valid: (usize, usize), horizontal: bool, vertical: bool) {
    let (c, s) = (img.shape()[0], img.shape()[2]);
    let (h, w) = valid;
    let data = img.data_mut();
    if horizontal {
        for row in 0..c * s {
            data[row * s..row * s + w].reverse();
        }
        for r in 0..s {
            gt[r * s..r * s + w].reverse();
        }
        for b in boxes.iter_mut() {
            *b = Bbox::new(w as f64 - b.x_max, b.y_min, w as f64 - b.x_min, b.y_max);
        }
    }
    if vertical {
        for ch in 0..c {
            for r in 0..h / 2 {
                let (a, bb) = ((ch * s + r) * s, (ch * s + h - 1 - r) * s);
                for x in 0..s {
                    data.swap(a + x, bb + x);
                }
            }
        }
        for r in 0..h / 2 {
            for x in 0..s {
                gt.swap(r * s + x, (h - 1 - r) * s + x);
            }
        }
        for b in boxes.iter_mut() {
            *b = Bbox::new(b.x_min, h as f64 - b.y_max, b.x_max, h as f64 - b.y_min);
        }
    }
}

/// Flips each axis independently with probability 1/2. Returns
/// `(horizontal, vertical)`.
pub fn random_flip<R: Rng>(
    img: &mut Tensor,
    gt: &mut [u8],
    boxes: &mut [Bbox],
    valid: (usize, usize),
    rng: &mut R,
) -> (bool, bool) {
    let horizontal = rng.random_bool(0.5);
    let vertical = rng.random_bool(0.5);
    flip_in_place(img, gt, boxes, valid, horizontal, vertical);
    (horizontal, vertical)
}
