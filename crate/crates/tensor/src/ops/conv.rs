use crate::error::{dim_err, shape_err, Result};
use crate::float::{gemm, Float, MatView};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Geometry of a square-kernel 2-D convolution over a `[C, H, W]` input.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(x: &[usize], k: usize, stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 3 {
            return dim_err("conv2d", format!("expected [C, H, W], got {x:?}"));
        }
        if stride == 0 || k == 0 {
            return dim_err("conv2d", "stride and kernel size must be positive");
        }
        let (c, h, w) = (x[0], x[1], x[2]);
        if h + 2 * pad < k || w + 2 * pad < k {
            return dim_err(
                "conv2d",
                format!("kernel {k} larger than padded input {}x{}", h + 2 * pad, w + 2 * pad),
            );
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Ok(Self { c, h, w, k, stride, pad, ho, wo })
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Input index for output pixel `(oy, ox)` and kernel tap `(ky, kx)`.
    #[inline]
    fn src(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.pad)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad)?;
        (y < self.h && x < self.w).then_some((y, x))
    }
}

/// Unfolds `x[C,H,W]` into `[C·k·k, Ho·Wo]`.
fn im2col<T: Float>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let n = g.ho * g.wo;
    let mut cols = vec![T::zero(); g.c * g.k * g.k * n];
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((c * g.k + ky) * g.k + kx) * n;
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        if let Some((y, x)) = g.src(oy, ox, ky, kx) {
                            cols[row + oy * g.wo + ox] = plane[y * g.w + x];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Float>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let n = g.ho * g.wo;
    let mut x = vec![T::zero(); g.c * g.h * g.w];
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((c * g.k + ky) * g.k + kx) * n;
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        if let Some((y, x)) = g.src(oy, ox, ky, kx) {
                            plane[y * g.w + x] += cols[row + oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

fn sum_rows<T: Float>(g: &[T], rows: usize) -> Vec<T> {
    let n = g.len() / rows;
    g.chunks_exact(n).map(|r| r.iter().copied().sum()).collect()
}

impl<T: Float> Graph<T> {
    /// Cross-correlation of `x[C,H,W]` with `w[O,C,k,k]` plus optional bias `[O]`.
    pub fn conv2d(
        &self,
        x: &Var<T>,
        w: &Var<T>,
        b: Option<&Var<T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<T>> {
        let ws = w.shape();
        if ws.len() != 4 || ws[2] != ws[3] || x.shape().first() != Some(&ws[1]) {
            return shape_err("conv2d", x.shape(), ws);
        }
        let g = ConvGeom::new(x.shape(), ws[2], stride, pad)?;
        let o = ws[0];
        if let Some(b) = b {
            if b.shape() != [o] {
                return shape_err("conv2d", ws, b.shape());
            }
        }
        let kk = g.c * g.k * g.k;
        let n = g.ho * g.wo;
        let cols: Option<Vec<T>> = (!g.is_pointwise()).then(|| im2col(x.value().data(), &g));
        let mut out = vec![T::zero(); o * n];
        if let Some(b) = b {
            for (row, &bv) in out.chunks_exact_mut(n).zip(b.value().data()) {
                row.fill(bv);
            }
        }
        {
            let cv = cols.as_deref().unwrap_or(x.value().data());
            let beta = if b.is_some() { T::one() } else { T::zero() };
            gemm(MatView::new(w.value().data(), o, kk), MatView::new(cv, kk, n), &mut out, beta);
        }
        self.count_macs(o * kk * n);
        let out = Tensor::from_parts(vec![o, g.ho, g.wo], out);
        let wv = w.rc();
        let xv = x.rc();
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.record("conv2d", &inputs, out, move |gr, needs| {
            let gd = gr.data();
            let dx = needs[0].then(|| {
                let mut dcols = vec![T::zero(); kk * n];
                gemm(MatView::new(wv.data(), o, kk).t(), MatView::new(gd, o, n), &mut dcols, T::zero());
                let d = if g.is_pointwise() { dcols } else { col2im(&dcols, &g) };
                Tensor::from_parts(vec![g.c, g.h, g.w], d)
            });
            let dw = needs[1].then(|| {
                let recomputed;
                let cv = match &cols {
                    Some(c) => c.as_slice(),
                    None => {
                        recomputed = xv.data();
                        recomputed
                    }
                };
                let mut d = vec![T::zero(); o * kk];
                gemm(MatView::new(gd, o, n), MatView::new(cv, kk, n).t(), &mut d, T::zero());
                Tensor::from_parts(vec![o, g.c, g.k, g.k], d)
            });
            let mut grads = vec![dx, dw];
            if needs.len() == 3 {
                grads.push(needs[2].then(|| Tensor::from_parts(vec![o], sum_rows(gd, o))));
            }
            grads
        }))
    }

    /// Depthwise `k×k` convolution, stride 1, over a channels-last `x[H,W,C]`
    /// with per-channel kernels `w[C,k,k]` and bias `b[C]`.
    pub fn depthwise_conv_hwc(&self, x: &Var<T>, w: &Var<T>, b: &Var<T>, pad: usize) -> Result<Var<T>> {
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 3 || ws.len() != 3 || ws[0] != xs[2] || ws[1] != ws[2] || b.shape() != [xs[2]] {
            return shape_err("depthwise_conv", xs, ws);
        }
        let (h, wd, c, k) = (xs[0], xs[1], xs[2], ws[1]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return dim_err("depthwise_conv", format!("kernel {k} larger than padded input"));
        }
        let (ho, wo) = (h + 2 * pad - k + 1, wd + 2 * pad - k + 1);
        // Kernel in [k,k,C] order so the innermost loop runs over channels.
        let wt: Vec<T> = (0..k * k * c).map(|i| w.value().data()[(i % c) * k * k + i / c]).collect();
        let xd = x.value().data();
        let mut out = vec![T::zero(); ho * wo * c];
        for oy in 0..ho {
            for ox in 0..wo {
                let o = &mut out[(oy * wo + ox) * c..(oy * wo + ox + 1) * c];
                o.copy_from_slice(b.value().data());
                for ky in 0..k {
                    let Some(y) = (oy + ky).checked_sub(pad).filter(|&y| y < h) else { continue };
                    for kx in 0..k {
                        let Some(xx) = (ox + kx).checked_sub(pad).filter(|&v| v < wd) else { continue };
                        let src = &xd[(y * wd + xx) * c..(y * wd + xx + 1) * c];
                        let kw = &wt[(ky * k + kx) * c..(ky * k + kx + 1) * c];
                        for i in 0..c {
                            o[i] += src[i] * kw[i];
                        }
                    }
                }
            }
        }
        self.count_macs(ho * wo * c * k * k);
        let xv = x.rc();
        let out = Tensor::from_parts(vec![ho, wo, c], out);
        Ok(self.record("depthwise_conv", &[x, w, b], out, move |gr, needs| {
            let gd = gr.data();
            let xd = xv.data();
            let mut dx = vec![T::zero(); h * wd * c];
            let mut dwt = vec![T::zero(); k * k * c];
            let mut db = vec![T::zero(); c];
            for oy in 0..ho {
                for ox in 0..wo {
                    let g = &gd[(oy * wo + ox) * c..(oy * wo + ox + 1) * c];
                    for i in 0..c {
                        db[i] += g[i];
                    }
                    for ky in 0..k {
                        let Some(y) = (oy + ky).checked_sub(pad).filter(|&y| y < h) else { continue };
                        for kx in 0..k {
                            let Some(xx) = (ox + kx).checked_sub(pad).filter(|&v| v < wd) else { continue };
                            let base = (y * wd + xx) * c;
                            let kb = (ky * k + kx) * c;
                            for i in 0..c {
                                dx[base + i] += g[i] * wt[kb + i];
                                dwt[kb + i] += g[i] * xd[base + i];
                            }
                        }
                    }
                }
            }
            let dw: Vec<T> = (0..c * k * k).map(|i| dwt[(i % (k * k)) * c + i / (k * k)]).collect();
            vec![
                needs[0].then(|| Tensor::from_parts(vec![h, wd, c], dx)),
                needs[1].then(|| Tensor::from_parts(vec![c, k, k], dw)),
                needs[2].then(|| Tensor::from_parts(vec![c], db)),
            ]
        }))
    }

    /// Transposed convolution with kernel 2 and stride 2:
    /// `x[Cin,H,W]`, `w[Cin,Cout,2,2]`, `b[Cout]` → `[Cout,2H,2W]`.
    pub fn conv_transpose2x2(&self, x: &Var<T>, w: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 3 || ws.len() != 4 || ws[0] != xs[0] || ws[2] != 2 || ws[3] != 2 || b.shape() != [ws[1]] {
            return shape_err("conv_transpose2x2", xs, ws);
        }
        let (cin, h, wd, cout) = (xs[0], xs[1], xs[2], ws[1]);
        let n = h * wd;
        // cols[(co,dy,dx), p] = Σ_ci w[ci,(co,dy,dx)]·x[ci,p]
        let mut cols = vec![T::zero(); cout * 4 * n];
        gemm(
            MatView::new(w.value().data(), cin, cout * 4).t(),
            MatView::new(x.value().data(), cin, n),
            &mut cols,
            T::zero(),
        );
        self.count_macs(cin * cout * 4 * n);
        let (ho, wo) = (2 * h, 2 * wd);
        let mut out = vec![T::zero(); cout * ho * wo];
        for co in 0..cout {
            let bias = b.value().data()[co];
            for d in 0..4 {
                let (dy, dx) = (d / 2, d % 2);
                let row = &cols[(co * 4 + d) * n..(co * 4 + d + 1) * n];
                for y in 0..h {
                    for xx in 0..wd {
                        out[(co * ho + 2 * y + dy) * wo + 2 * xx + dx] = row[y * wd + xx] + bias;
                    }
                }
            }
        }
        let (xv, wv) = (x.rc(), w.rc());
        let out = Tensor::from_parts(vec![cout, ho, wo], out);
        Ok(self.record("conv_transpose2x2", &[x, w, b], out, move |gr, needs| {
            let gd = gr.data();
            let mut gcols = vec![T::zero(); cout * 4 * n];
            for co in 0..cout {
                for d in 0..4 {
                    let (dy, dx) = (d / 2, d % 2);
                    let row = &mut gcols[(co * 4 + d) * n..(co * 4 + d + 1) * n];
                    for y in 0..h {
                        for xx in 0..wd {
                            row[y * wd + xx] = gd[(co * ho + 2 * y + dy) * wo + 2 * xx + dx];
                        }
                    }
                }
            }
            let dx = needs[0].then(|| {
                let mut d = vec![T::zero(); cin * n];
                gemm(MatView::new(wv.data(), cin, cout * 4), MatView::new(&gcols, cout * 4, n), &mut d, T::zero());
                Tensor::from_parts(vec![cin, h, wd], d)
            });
            let dw = needs[1].then(|| {
                let mut d = vec![T::zero(); cin * cout * 4];
                gemm(MatView::new(xv.data(), cin, n), MatView::new(&gcols, cout * 4, n).t(), &mut d, T::zero());
                Tensor::from_parts(vec![cin, cout, 2, 2], d)
            });
            let db = needs[2].then(|| {
                let per = sum_rows(&gcols, cout * 4);
                Tensor::from_parts(vec![cout], per.chunks_exact(4).map(|c| c.iter().copied().sum()).collect())
            });
            vec![dx, dw, db]
        }))
    }
}
