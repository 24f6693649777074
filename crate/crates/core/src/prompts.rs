//! Box-derived point and scribble prompts.
//!
//! All coordinates live in the square prepared-image space of side `size`.
//! Points are pixel centers, so a point sampled from pixel `(c, r)` sits at
//! `(c + 0.5, r + 0.5)`.

use rand::seq::index;
use rand::Rng;

use crate::bbox::Bbox;

/// Inward shift ranges as fractions of the box width and height.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShiftRanges {
    pub w_lo: f64,
    pub w_hi: f64,
    pub h_lo: f64,
    pub h_hi: f64,
}

impl ShiftRanges {
    pub const fn both(lo: f64, hi: f64) -> Self {
        Self { w_lo: lo, w_hi: hi, h_lo: lo, h_hi: hi }
    }

    pub const NONE: Self = Self::both(0.0, 0.0);
    /// Inference-time range for the interior points.
    pub const POINTS: Self = Self::both(1.0 / 5.0, 2.0 / 5.0);
    /// Inference-time range for the scribble.
    pub const SCRIBBLE: Self = Self::both(1.0 / 8.0, 1.0 / 6.0);

    pub fn is_valid(&self) -> bool {
        let ok = |lo: f64, hi: f64| 0.0 <= lo && lo <= hi && hi <= 0.5 && (lo < hi || hi < 0.5);
        ok(self.w_lo, self.w_hi) && ok(self.h_lo, self.h_hi)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    /// Center of pixel `(col, row)`.
    pub fn pixel(col: usize, row: usize) -> Self {
        Self::new(col as f64 + 0.5, row as f64 + 0.5)
    }
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Moves all four edges inward by `shift_w` horizontally and `shift_h`
/// vertically.
pub fn shrink_box_by(b: &Bbox, shift_w: f64, shift_h: f64) -> Bbox {
    Bbox::new(b.x_min + shift_w, b.y_min + shift_h, b.x_max - shift_w, b.y_max - shift_h)
}

/// Shrinks with shifts drawn uniformly from `[lo·w, hi·w)` and `[lo·h, hi·h)`
/// where `w, h` are the box dimensions.
pub fn shrink_box<R: Rng>(b: &Bbox, r: &ShiftRanges, rng: &mut R) -> Bbox {
    debug_assert!(r.is_valid(), "{r:?}");
    let (w, h) = (b.width(), b.height());
    let sw = uniform(rng, r.w_lo * w, r.w_hi * w);
    let sh = uniform(rng, r.h_lo * h, r.h_hi * h);
    shrink_box_by(b, sw, sh)
}

/// The four sub-boxes split at the center, ordered NW, NE, SW, SE.
pub fn quadrants(b: &Bbox) -> [Bbox; 4] {
    let (cx, cy) = b.center();
    [
        Bbox::new(b.x_min, b.y_min, cx, cy),
        Bbox::new(cx, b.y_min, b.x_max, cy),
        Bbox::new(b.x_min, cy, cx, b.y_max),
        Bbox::new(cx, cy, b.x_max, b.y_max),
    ]
}

/// Non-zero pixels of a `size × size` map whose centers fall in `b`.
fn nonzero_pixels(b: &Bbox, intensity: &[f32], size: usize) -> Vec<(usize, usize)> {
    let (cols, rows) = b.pixel_ranges(size, size);
    let mut out = Vec::new();
    for r in rows {
        for c in cols.clone() {
            if intensity[r * size + c] != 0.0 {
                out.push((c, r));
            }
        }
    }
    out
}

/// One point per quadrant, uniform over that quadrant's non-zero pixels;
/// the quadrant center when it has none.
pub fn quadrant_points<R: Rng>(b: &Bbox, intensity: &[f32], size: usize, rng: &mut R) -> [Point; 4] {
    quadrants(b).map(|q| {
        let cands = nonzero_pixels(&q, intensity, size);
        if cands.is_empty() {
            let (x, y) = q.center();
            Point::new(x, y)
        } else {
            let (c, r) = cands[rng.random_range(0..cands.len())];
            Point::pixel(c, r)
        }
    })
}

/// Control points of a random walk through up to four distinct non-zero
/// pixels inside `b`, as `(col, row)`. Empty when the box holds no non-zero
/// pixel.
pub fn generate_scribble<R: Rng>(b: &Bbox, intensity: &[f32], size: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let cands = nonzero_pixels(b, intensity, size);
    let k = cands.len().min(4);
    if k == 0 {
        return Vec::new();
    }
    index::sample(rng, cands.len(), k).into_iter().map(|i| cands[i]).collect()
}

/// Calls `f` on every pixel of the Bresenham line from `a` to `b`.
pub fn bresenham(a: (usize, usize), b: (usize, usize), mut f: impl FnMut(usize, usize)) {
    let (mut x, mut y) = (a.0 as i64, a.1 as i64);
    let (x1, y1) = (b.0 as i64, b.1 as i64);
    let dx = (x1 - x).abs();
    let dy = -(y1 - y).abs();
    let sx = if x < x1 { 1 } else { -1 };
    let sy = if y < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        f(x as usize, y as usize);
        if x == x1 && y == y1 {
            return;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// One-pixel-wide rasterization of a polyline into a `size × size` mask.
pub fn rasterize_scribble(polyline: &[(usize, usize)], size: usize) -> Vec<u8> {
    let mut mask = vec![0u8; size * size];
    let mut set = |c: usize, r: usize| {
        if c < size && r < size {
            mask[r * size + c] = 1;
        }
    };
    match polyline {
        [] => {}
        [p] => set(p.0, p.1),
        _ => {
            for w in polyline.windows(2) {
                bresenham(w[0], w[1], &mut set);
            }
        }
    }
    mask
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptMode {
    /// Points and scribble over the whole box.
    Train,
    /// Points and scribble from independently shrunken boxes.
    Infer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptSet {
    /// NW, NE, SW, SE; all positive.
    pub points: [Point; 4],
    /// Top-left and bottom-right box corners.
    pub corners: [Point; 2],
    pub polyline: Vec<(usize, usize)>,
    /// Binary `size × size` scribble mask.
    pub scribble: Vec<u8>,
    /// Region the points were drawn from.
    pub point_box: Bbox,
    /// Region the scribble was drawn from.
    pub scribble_box: Bbox,
}

pub fn make_prompts<R: Rng>(b: &Bbox, intensity: &[f32], size: usize, mode: PromptMode, rng: &mut R) -> PromptSet {
    let (point_box, scribble_box) = match mode {
        PromptMode::Train => (*b, *b),
        PromptMode::Infer => {
            let p = shrink_box(b, &ShiftRanges::POINTS, rng);
            let s = shrink_box(b, &ShiftRanges::SCRIBBLE, rng);
            (p, s)
        }
    };
    let points = quadrant_points(&point_box, intensity, size, rng);
    let polyline = generate_scribble(&scribble_box, intensity, size, rng);
    let mut scribble = rasterize_scribble(&polyline, size);
    // Segments may cross zero-intensity pixels; those stay unmarked.
    for (m, &v) in scribble.iter_mut().zip(intensity) {
        if v == 0.0 {
            *m = 0;
        }
    }
    PromptSet {
        points,
        corners: [Point::new(b.x_min, b.y_min), Point::new(b.x_max, b.y_max)],
        polyline,
        scribble,
        point_box,
        scribble_box,
    }
}

/// Which prompt kinds reach the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PromptKinds {
    Box,
    BoxPoints,
    #[default]
    BoxPointsScribble,
}

impl PromptKinds {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "box" => Self::Box,
            "box+points" => Self::BoxPoints,
            "box+points+scribble" => Self::BoxPointsScribble,
            _ => return None,
        })
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Box => "box",
            Self::BoxPoints => "box+points",
            Self::BoxPointsScribble => "box+points+scribble",
        }
    }

    pub fn uses_points(&self) -> bool {
        !matches!(self, Self::Box)
    }

    pub fn uses_scribble(&self) -> bool {
        matches!(self, Self::BoxPointsScribble)
    }
}

impl TryFrom<String> for PromptKinds {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        Self::parse(&s).ok_or_else(|| format!("unknown prompt mode '{s}' (box, box+points, box+points+scribble)"))
    }
}

impl From<PromptKinds> for String {
    fn from(k: PromptKinds) -> Self {
        k.as_str().to_string()
    }
}
