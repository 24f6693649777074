//! Synthetic cases: soft-edged ellipses and rectangles on a noisy
//! background, one of which is the target.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::bbox::Bbox;
use crate::dataio::{CaseBox, CaseRecord, ImageLayout};

pub const SYNTH_SIZE: usize = 256;
/// Target area bounds as fractions of the image.
pub const MIN_AREA: f64 = 0.01;
pub const MAX_AREA: f64 = 0.40;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCase {
    pub size: usize,
    /// Gray `size × size`, roughly in `[0, 1]`.
    pub image: Vec<f32>,
    pub gt: Vec<u8>,
    /// Tight box of `gt`.
    pub bbox: Bbox,
}

#[derive(Clone, Copy, Debug)]
struct Blob {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
    rect: bool,
    level: f64,
}

impl Blob {
    fn random<R: Rng>(rng: &mut R, size: usize, min_area: f64, max_area: f64, min_level: f64) -> Self {
        let s = size as f64;
        let area = (rng.random_range(min_area.ln()..max_area.ln())).exp() * s * s;
        let aspect: f64 = rng.random_range(0.5..2.0);
        let rect = rng.random_bool(0.5);
        let denom = if rect { 4.0 } else { std::f64::consts::PI };
        let a = (area * aspect / denom).sqrt();
        let b = area / (denom * a);
        let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
        // Half-diagonal bounds a rotated rectangle; the larger semi-axis
        // bounds an ellipse.
        let reach = if rect { a.hypot(b) } else { a.max(b) } + 2.0;
        let lo = reach.min(s / 2.0);
        let cx = rng.random_range(lo..=(s - lo).max(lo));
        let cy = rng.random_range(lo..=(s - lo).max(lo));
        Self { cx, cy, a, b, cos: theta.cos(), sin: theta.sin(), rect, level: rng.random_range(min_level..0.95) }
    }

    /// Approximate signed distance in pixels, negative inside.
    fn signed_distance(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        if self.rect {
            (u.abs() - self.a).max(v.abs() - self.b)
        } else {
            let rho = ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt();
            (rho - 1.0) * self.a.min(self.b)
        }
    }

    /// Whether the two blobs come within 3 px of each other anywhere in
    /// the image.
    fn touches(&self, other: &Blob, size: usize) -> bool {
        (0..size * size).any(|i| {
            let (x, y) = ((i % size) as f64 + 0.5, (i / size) as f64 + 0.5);
            self.signed_distance(x, y) < 1.5 && other.signed_distance(x, y) < 1.5
        })
    }

    fn membership(&self, x: f64, y: f64) -> f64 {
        let d = self.signed_distance(x, y);
        1.0 / (1.0 + (d / 0.75).exp())
    }
}

/// One case at `size × size`: one to three non-touching blobs drawn from
/// the same distribution, one of them picked at random as the target. Only
/// the box tells the target apart. The target area is kept within
/// `[1%, 40%]` of the image.
pub fn gen_synthetic_case_sized<R: Rng>(rng: &mut R, size: usize) -> SyntheticCase {
    let noise = Normal::new(0.0, 0.04).expect("valid std");
    let n = size * size;
    loop {
        let base: f64 = rng.random_range(0.05..0.25);
        let mut img: Vec<f64> = (0..n).map(|_| base + noise.sample(rng)).collect();
        let count = rng.random_range(1..=3);
        let mut blobs: Vec<Blob> = Vec::with_capacity(count);
        for _ in 0..count {
            let b = Blob::random(rng, size, MIN_AREA * 1.3, MAX_AREA * 0.8, 0.45);
            if blobs.iter().all(|o| !o.touches(&b, size)) {
                blobs.push(b);
            }
        }
        let target = rng.random_range(0..blobs.len());
        let mut gt = vec![0u8; n];
        for (k, blob) in blobs.iter().enumerate() {
            for r in 0..size {
                for c in 0..size {
                    let m = blob.membership(c as f64 + 0.5, r as f64 + 0.5);
                    if m < 1e-4 {
                        continue;
                    }
                    let i = r * size + c;
                    img[i] = img[i] * (1.0 - m) + (blob.level + noise.sample(rng) * 0.5) * m;
                    if k == target {
                        gt[i] = u8::from(m >= 0.5);
                    }
                }
            }
        }
        let area = gt.iter().filter(|&&v| v != 0).count() as f64 / n as f64;
        if !(MIN_AREA..=MAX_AREA).contains(&area) {
            continue;
        }
        let bbox = Bbox::tight(&gt, size, size).expect("non-empty target");
        let image = img.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect();
        return SyntheticCase { size, image, gt, bbox };
    }
}

/// A `256 × 256` case.
pub fn gen_synthetic_case<R: Rng>(rng: &mut R) -> SyntheticCase {
    gen_synthetic_case_sized(rng, SYNTH_SIZE)
}

impl SyntheticCase {
    pub fn to_case_record(&self, id: impl Into<String>) -> CaseRecord {
        CaseRecord {
            id: id.into(),
            layout: ImageLayout::Gray,
            shape: vec![self.size, self.size],
            image: self.image.clone(),
            gts: Some(self.gt.iter().map(|&v| u32::from(v)).collect()),
            boxes: vec![CaseBox { bbox: self.bbox, z_range: None }],
            spacing: None,
            clipped_boxes: 0,
            extra_keys: Vec::new(),
        }
    }
}

/// `count` cases from one seeded stream, ids `synth_00000`, ...
pub fn synthetic_dataset(count: usize, seed: u64) -> Vec<CaseRecord> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| gen_synthetic_case(&mut rng).to_case_record(format!("synth_{i:05}")))
        .collect()
}
