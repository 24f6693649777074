use crate::error::{dim_err, shape_err, Result};
use crate::float::Float;
use crate::graph::{Graph, Var};
use crate::ops::shape::permute;
use crate::tensor::Tensor;

/// Interpolation taps for one output coordinate.
#[derive(Clone, Copy, Debug)]
struct Tap<T> {
    i0: usize,
    i1: usize,
    w0: T,
    w1: T,
}

/// Half-pixel bilinear taps (`align_corners = false`), clamped at the edges.
fn taps<T: Float>(n_in: usize, n_out: usize) -> Vec<Tap<T>> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let l1 = src - i0 as f64;
            Tap { i0, i1, w0: T::lit(1.0 - l1), w1: T::lit(l1) }
        })
        .collect()
}

fn chw(op: &'static str, s: &[usize]) -> Result<(usize, usize, usize)> {
    if s.len() != 3 {
        return dim_err(op, format!("expected [C, H, W], got {s:?}"));
    }
    Ok((s[0], s[1], s[2]))
}

fn hwc(op: &'static str, s: &[usize]) -> Result<(usize, usize, usize)> {
    if s.len() != 3 {
        return dim_err(op, format!("expected [H, W, C], got {s:?}"));
    }
    Ok((s[0], s[1], s[2]))
}

fn resize_forward<T: Float>(x: &[T], c: usize, h: usize, w: usize, ty: &[Tap<T>], tx: &[Tap<T>]) -> Vec<T> {
    let (ho, wo) = (ty.len(), tx.len());
    let mut rows = vec![T::zero(); c * h * wo];
    for (src, dst) in x.chunks_exact(w).zip(rows.chunks_exact_mut(wo)) {
        for (d, t) in dst.iter_mut().zip(tx) {
            *d = src[t.i0] * t.w0 + src[t.i1] * t.w1;
        }
    }
    let mut out = vec![T::zero(); c * ho * wo];
    for ch in 0..c {
        let plane = &rows[ch * h * wo..(ch + 1) * h * wo];
        for (oy, t) in ty.iter().enumerate() {
            let dst = &mut out[(ch * ho + oy) * wo..(ch * ho + oy + 1) * wo];
            let (r0, r1) = (&plane[t.i0 * wo..(t.i0 + 1) * wo], &plane[t.i1 * wo..(t.i1 + 1) * wo]);
            for i in 0..wo {
                dst[i] = r0[i] * t.w0 + r1[i] * t.w1;
            }
        }
    }
    out
}

/// Bilinear resize of `x[C,H,W]` to `[C,ho,wo]` with half-pixel centers.
pub fn resize_bilinear<T: Float>(x: &Tensor<T>, ho: usize, wo: usize) -> Result<Tensor<T>> {
    let (c, h, w) = chw("resize_bilinear", x.shape())?;
    if ho == 0 || wo == 0 {
        return dim_err("resize_bilinear", "target size must be positive");
    }
    let out = resize_forward(x.data(), c, h, w, &taps(h, ho), &taps(w, wo));
    Ok(Tensor::from_parts(vec![c, ho, wo], out))
}

/// Non-overlapping `f×f` mean pooling of `x[C,H,W]`.
pub fn avg_pool<T: Float>(x: &Tensor<T>, f: usize) -> Result<Tensor<T>> {
    let (c, h, w) = chw("avg_pool", x.shape())?;
    if f == 0 || h % f != 0 || w % f != 0 {
        return dim_err("avg_pool", format!("factor {f} does not divide {h}x{w}"));
    }
    let (ho, wo) = (h / f, w / f);
    let inv = T::one() / T::lit((f * f) as f64);
    let mut out = vec![T::zero(); c * ho * wo];
    for ch in 0..c {
        for y in 0..h {
            for x_ in 0..w {
                out[(ch * ho + y / f) * wo + x_ / f] += x.data()[(ch * h + y) * w + x_];
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= inv);
    Ok(Tensor::from_parts(vec![c, ho, wo], out))
}

/// Tiles `x[H,W,C]` into `[nW, win, win, C]`, windows in row-major order.
pub fn window_partition<T: Float>(x: &Tensor<T>, win: usize) -> Result<Tensor<T>> {
    let (h, w, c) = hwc("window_partition", x.shape())?;
    if win == 0 || h % win != 0 || w % win != 0 {
        return dim_err("window_partition", format!("window {win} does not divide {h}x{w}"));
    }
    let t = x.clone().reshape(vec![h / win, win, w / win, win, c])?;
    permute(&t, &[0, 2, 1, 3, 4])?.reshape(vec![(h / win) * (w / win), win, win, c])
}

/// Inverse of [`window_partition`].
pub fn window_reverse<T: Float>(wins: &Tensor<T>, win: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = wins.shape();
    if win == 0 || h % win != 0 || w % win != 0 {
        return dim_err("window_reverse", format!("window {win} does not divide {h}x{w}"));
    }
    let n = (h / win) * (w / win);
    if s.len() != 4 || s[0] != n || s[1] != win || s[2] != win {
        return dim_err("window_reverse", format!("expected [{n}, {win}, {win}, C], got {s:?}"));
    }
    let c = s[3];
    let t = wins.clone().reshape(vec![h / win, w / win, win, win, c])?;
    permute(&t, &[0, 2, 1, 3, 4])?.reshape(vec![h, w, c])
}

/// Cyclic shift of `x[H,W,C]`: output `(y, x)` takes input
/// `((y - dy) mod H, (x - dx) mod W)`.
pub fn roll2d<T: Float>(x: &Tensor<T>, dy: isize, dx: isize) -> Result<Tensor<T>> {
    let (h, w, c) = hwc("roll2d", x.shape())?;
    let sy = dy.rem_euclid(h as isize) as usize;
    let sx = dx.rem_euclid(w as isize) as usize;
    let mut out = vec![T::zero(); h * w * c];
    for y in 0..h {
        let ys = (y + h - sy) % h;
        for x_ in 0..w {
            let xs = (x_ + w - sx) % w;
            out[(y * w + x_) * c..(y * w + x_ + 1) * c].copy_from_slice(&x.data()[(ys * w + xs) * c..(ys * w + xs + 1) * c]);
        }
    }
    Ok(Tensor::from_parts(vec![h, w, c], out))
}

fn crop_hwc_raw<T: Float>(x: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (_, wi, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Vec::with_capacity(h * w * c);
    for y in 0..h {
        out.extend_from_slice(&x.data()[y * wi * c..(y * wi + w) * c]);
    }
    Tensor::from_parts(vec![h, w, c], out)
}

fn pad_hwc_raw<T: Float>(x: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (hi, wi, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = vec![T::zero(); h * w * c];
    for y in 0..hi {
        out[y * w * c..(y * w + wi) * c].copy_from_slice(&x.data()[y * wi * c..(y + 1) * wi * c]);
    }
    Tensor::from_parts(vec![h, w, c], out)
}

impl<T: Float> Graph<T> {
    pub fn resize_bilinear(&self, x: &Var<T>, ho: usize, wo: usize) -> Result<Var<T>> {
        let (c, h, w) = chw("resize_bilinear", x.shape())?;
        if (ho, wo) == (h, w) {
            return Ok(x.clone());
        }
        let out = resize_bilinear(x.value(), ho, wo)?;
        Ok(self.record("resize_bilinear", &[x], out, move |g, _| {
            let (ty, tx) = (taps::<T>(h, ho), taps::<T>(w, wo));
            let mut rows = vec![T::zero(); c * h * wo];
            for ch in 0..c {
                for (oy, t) in ty.iter().enumerate() {
                    let src = &g.data()[(ch * ho + oy) * wo..(ch * ho + oy + 1) * wo];
                    let base = ch * h * wo;
                    for i in 0..wo {
                        rows[base + t.i0 * wo + i] += src[i] * t.w0;
                        rows[base + t.i1 * wo + i] += src[i] * t.w1;
                    }
                }
            }
            let mut dx = vec![T::zero(); c * h * w];
            for (src, dst) in rows.chunks_exact(wo).zip(dx.chunks_exact_mut(w)) {
                for (&v, t) in src.iter().zip(&tx) {
                    dst[t.i0] += v * t.w0;
                    dst[t.i1] += v * t.w1;
                }
            }
            vec![Some(Tensor::from_parts(vec![c, h, w], dx))]
        }))
    }

    pub fn avg_pool(&self, x: &Var<T>, f: usize) -> Result<Var<T>> {
        let out = avg_pool(x.value(), f)?;
        let (c, h, w) = chw("avg_pool", x.shape())?;
        Ok(self.record("avg_pool", &[x], out, move |g, _| {
            let (ho, wo) = (h / f, w / f);
            let inv = T::one() / T::lit((f * f) as f64);
            let dx = Tensor::from_fn(vec![c, h, w], |i| {
                let (ch, y, x_) = (i / (h * w), (i / w) % h, i % w);
                g.data()[(ch * ho + y / f) * wo + x_ / f] * inv
            });
            vec![Some(dx)]
        }))
    }

    pub fn window_partition(&self, x: &Var<T>, win: usize) -> Result<Var<T>> {
        let (h, w, _) = hwc("window_partition", x.shape())?;
        let out = window_partition(x.value(), win)?;
        Ok(self.record("window_partition", &[x], out, move |g, _| {
            vec![Some(window_reverse(g, win, h, w).expect("window grad"))]
        }))
    }

    pub fn window_reverse(&self, wins: &Var<T>, win: usize, h: usize, w: usize) -> Result<Var<T>> {
        let out = window_reverse(wins.value(), win, h, w)?;
        Ok(self.record("window_reverse", &[wins], out, move |g, _| {
            vec![Some(window_partition(g, win).expect("window grad"))]
        }))
    }

    pub fn roll2d(&self, x: &Var<T>, dy: isize, dx: isize) -> Result<Var<T>> {
        let out = roll2d(x.value(), dy, dx)?;
        Ok(self.record("roll2d", &[x], out, move |g, _| {
            vec![Some(roll2d(g, -dy, -dx).expect("roll grad"))]
        }))
    }

    /// Zero-pads `x[H,W,C]` at the bottom and right to `[h,w,C]`.
    pub fn pad_hwc(&self, x: &Var<T>, h: usize, w: usize) -> Result<Var<T>> {
        let (hi, wi, _) = hwc("pad_hwc", x.shape())?;
        if h < hi || w < wi {
            return dim_err("pad_hwc", format!("cannot pad {hi}x{wi} to {h}x{w}"));
        }
        if (h, w) == (hi, wi) {
            return Ok(x.clone());
        }
        let out = pad_hwc_raw(x.value(), h, w);
        Ok(self.record("pad_hwc", &[x], out, move |g, _| vec![Some(crop_hwc_raw(g, hi, wi))]))
    }

    /// Keeps the top-left `[h,w,C]` corner of `x[H,W,C]`.
    pub fn crop_hwc(&self, x: &Var<T>, h: usize, w: usize) -> Result<Var<T>> {
        let (hi, wi, _) = hwc("crop_hwc", x.shape())?;
        if h > hi || w > wi || h == 0 || w == 0 {
            return dim_err("crop_hwc", format!("cannot crop {hi}x{wi} to {h}x{w}"));
        }
        if (h, w) == (hi, wi) {
            return Ok(x.clone());
        }
        let out = crop_hwc_raw(x.value(), h, w);
        Ok(self.record("crop_hwc", &[x], out, move |g, _| vec![Some(pad_hwc_raw(g, hi, wi))]))
    }

    /// Rearranges `x[H,W,C]` into `[H/f, W/f, f·f·C]`; each output vector
    /// stacks its `f×f` block in row-major order.
    pub fn space_to_depth_hwc(&self, x: &Var<T>, f: usize) -> Result<Var<T>> {
        let (h, w, c) = hwc("space_to_depth", x.shape())?;
        if f == 0 || h % f != 0 || w % f != 0 {
            return dim_err("space_to_depth", format!("factor {f} does not divide {h}x{w}"));
        }
        let t = self.reshape(x, &[h / f, f, w / f, f, c])?;
        let t = self.permute(&t, &[0, 2, 1, 3, 4])?;
        self.reshape(&t, &[h / f, w / f, f * f * c])
    }

    /// Picks rows of `table[R, C]`; gradients scatter-add back.
    pub fn gather_rows(&self, table: &Var<T>, idx: &[usize]) -> Result<Var<T>> {
        let s = table.shape();
        if s.len() != 2 || idx.iter().any(|&i| i >= s[0]) {
            return dim_err("gather_rows", format!("index out of range for table {s:?}"));
        }
        if idx.is_empty() {
            return dim_err("gather_rows", "empty index");
        }
        let (r, c) = (s[0], s[1]);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&table.value().data()[i * c..(i + 1) * c]);
        }
        let idx = idx.to_vec();
        let out = Tensor::from_parts(vec![idx.len(), c], out);
        Ok(self.record("gather_rows", &[table], out, move |g, _| {
            let mut d = vec![T::zero(); r * c];
            for (k, &i) in idx.iter().enumerate() {
                for j in 0..c {
                    d[i * c + j] += g.data()[k * c + j];
                }
            }
            vec![Some(Tensor::from_parts(vec![r, c], d))]
        }))
    }

    /// Adds a constant per-window mask `[nW, n, n]` to attention logits
    /// `[nW, heads, n, n]`, broadcasting over heads.
    pub fn add_window_mask(&self, x: &Var<T>, mask: &Tensor<T>) -> Result<Var<T>> {
        let (xs, ms) = (x.shape(), mask.shape());
        if xs.len() != 4 || ms.len() != 3 || xs[0] != ms[0] || xs[2..] != ms[1..] {
            return shape_err("add_window_mask", xs, ms);
        }
        let per = ms[1] * ms[2];
        let heads = xs[1];
        let mut out = x.to_tensor();
        for (k, chunk) in out.data_mut().chunks_exact_mut(per).enumerate() {
            let m = &mask.data()[(k / heads) * per..(k / heads + 1) * per];
            for (o, &v) in chunk.iter_mut().zip(m) {
                *o += v;
            }
        }
        Ok(self.record("add_window_mask", &[x], out, |g, _| vec![Some(g.clone())]))
    }
}
