/// Axis-aligned box with float edges; the max edges are exclusive.
///
/// Pixel `(col, row)` is inside when its center `(col + 0.5, row + 0.5)`
/// lies in `[x_min, x_max) × [y_min, y_max)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bbox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Bbox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self { x_min, y_min, x_max, y_max }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn is_valid(&self) -> bool {
        [self.x_min, self.y_min, self.x_max, self.y_max].iter().all(|v| v.is_finite())
            && self.x_min < self.x_max
            && self.y_min < self.y_max
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max
    }

    pub fn contains_pixel(&self, col: usize, row: usize) -> bool {
        self.contains_point(col as f64 + 0.5, row as f64 + 0.5)
    }

    /// Column and row ranges of the pixels inside the box, clipped to a
    /// `width × height` grid.
    pub fn pixel_ranges(&self, width: usize, height: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let span = |lo: f64, hi: f64, n: usize| {
            // Centers c + 0.5 in [lo, hi)  ⇔  c in [ceil(lo - 0.5), ceil(hi - 0.5)).
            let a = (lo - 0.5).ceil().clamp(0.0, n as f64) as usize;
            let b = (hi - 0.5).ceil().clamp(0.0, n as f64) as usize;
            a..b.max(a)
        };
        (span(self.x_min, self.x_max, width), span(self.y_min, self.y_max, height))
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    /// Tight box around the non-zero pixels of a row-major `h × w` mask.
    pub fn tight(mask: &[u8], w: usize, h: usize) -> Option<Self> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for r in 0..h {
            for c in 0..w {
                if mask[r * w + c] != 0 {
                    x0 = x0.min(c);
                    y0 = y0.min(r);
                    x1 = x1.max(c + 1);
                    y1 = y1.max(r + 1);
                }
            }
        }
        (x0 != usize::MAX).then(|| Self::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64))
    }
}
