use crate::error::{shape_err, Result};
use crate::float::{gemm, Float, MatView};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Plain matrix product of two 2-D tensors.
pub fn matmul<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k, n) = check_mm("matmul", a.shape(), b.shape(), false, false)?;
    let mut out = vec![T::zero(); m * n];
    gemm(
        MatView::new(a.data(), m, k),
        MatView::new(b.data(), k, n),
        &mut out,
        T::zero(),
    );
    Ok(Tensor::from_parts(vec![m, n], out))
}

fn check_mm(
    op: &'static str,
    a: &[usize],
    b: &[usize],
    ta: bool,
    tb: bool,
) -> Result<(usize, usize, usize)> {
    if a.len() != 2 || b.len() != 2 {
        return shape_err(op, a, b);
    }
    let (m, k) = if ta { (a[1], a[0]) } else { (a[0], a[1]) };
    let (k2, n) = if tb { (b[1], b[0]) } else { (b[0], b[1]) };
    if k != k2 {
        return shape_err(op, a, b);
    }
    Ok((m, k, n))
}

/// Batched `op(a[i])·op(b[i])` over 3-D tensors `[B, r, c]`.
fn bmm_forward<T: Float>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    ta: bool,
    tb: bool,
) -> Result<(Tensor<T>, usize)> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
        return shape_err("bmm", sa, sb);
    }
    let (m, k, n) = check_mm("bmm", &sa[1..], &sb[1..], ta, tb)?;
    let batch = sa[0];
    let (a_sz, b_sz) = (sa[1] * sa[2], sb[1] * sb[2]);
    let mut out = vec![T::zero(); batch * m * n];
    for i in 0..batch {
        let mut av = MatView::new(&a.data()[i * a_sz..(i + 1) * a_sz], sa[1], sa[2]);
        let mut bv = MatView::new(&b.data()[i * b_sz..(i + 1) * b_sz], sb[1], sb[2]);
        av.trans = ta;
        bv.trans = tb;
        gemm(av, bv, &mut out[i * m * n..(i + 1) * m * n], T::zero());
    }
    Ok((Tensor::from_parts(vec![batch, m, n], out), batch * m * k * n))
}

impl<T: Float> Graph<T> {
    /// `[m×k]·[k×n]`.
    pub fn matmul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = matmul(a.value(), b.value())?;
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        self.count_macs(m * k * n);
        let (av, bv) = (a.rc(), b.rc());
        Ok(self.record("matmul", &[a, b], out, move |g, needs| {
            let ga = needs[0].then(|| {
                let mut d = vec![T::zero(); m * k];
                gemm(MatView::new(g.data(), m, n), MatView::new(bv.data(), k, n).t(), &mut d, T::zero());
                Tensor::from_parts(vec![m, k], d)
            });
            let gb = needs[1].then(|| {
                let mut d = vec![T::zero(); k * n];
                gemm(MatView::new(av.data(), m, k).t(), MatView::new(g.data(), m, n), &mut d, T::zero());
                Tensor::from_parts(vec![k, n], d)
            });
            vec![ga, gb]
        }))
    }

    /// Batched matrix product over `[B, ·, ·]` with optional transposes of
    /// either operand.
    pub fn bmm(&self, a: &Var<T>, b: &Var<T>, ta: bool, tb: bool) -> Result<Var<T>> {
        let (out, macs) = bmm_forward(a.value(), b.value(), ta, tb)?;
        self.count_macs(macs);
        let (av, bv) = (a.rc(), b.rc());
        Ok(self.record("bmm", &[a, b], out, move |g, needs| {
            // C = A'B' with A' = op(A), B' = op(B):
            // dA' = dC·B'^T, dB' = A'^T·dC, then undo the transposes.
            let ga = needs[0].then(|| {
                let gt = if ta {
                    bmm_forward(&bv, g, tb, true)
                } else {
                    bmm_forward(g, &bv, false, !tb)
                };
                gt.expect("bmm backward shapes").0
            });
            let gb = needs[1].then(|| {
                let gt = if tb {
                    bmm_forward(g, &av, true, ta)
                } else {
                    bmm_forward(&av, g, !ta, false)
                };
                gt.expect("bmm backward shapes").0
            });
            vec![ga, gb]
        }))
    }

    /// Affine map over rows: `x[N×in]·w[out×in]^T + b[out]`.
    pub fn linear(&self, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>) -> Result<Var<T>> {
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return shape_err("linear", xs, ws);
        }
        let (rows, fin, fout) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if b.shape() != [fout] {
                return shape_err("linear", ws, b.shape());
            }
        }
        let mut out = vec![T::zero(); rows * fout];
        if let Some(b) = b {
            for r in out.chunks_exact_mut(fout) {
                r.copy_from_slice(b.value().data());
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm(
            MatView::new(x.value().data(), rows, fin),
            MatView::new(w.value().data(), fout, fin).t(),
            &mut out,
            beta,
        );
        self.count_macs(rows * fin * fout);
        let (xv, wv) = (x.rc(), w.rc());
        let out = Tensor::from_parts(vec![rows, fout], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.record("linear", &inputs, out, move |g, needs| {
            let gx = needs[0].then(|| {
                let mut d = vec![T::zero(); rows * fin];
                gemm(MatView::new(g.data(), rows, fout), MatView::new(wv.data(), fout, fin), &mut d, T::zero());
                Tensor::from_parts(vec![rows, fin], d)
            });
            let gw = needs[1].then(|| {
                let mut d = vec![T::zero(); fout * fin];
                gemm(MatView::new(g.data(), rows, fout).t(), MatView::new(xv.data(), rows, fin), &mut d, T::zero());
                Tensor::from_parts(vec![fout, fin], d)
            });
            let mut grads = vec![gx, gw];
            if needs.len() == 3 {
                grads.push(needs[2].then(|| {
                    let mut d = vec![T::zero(); fout];
                    for r in g.data().chunks_exact(fout) {
                        for (acc, &v) in d.iter_mut().zip(r) {
                            *acc += v;
                        }
                    }
                    Tensor::from_parts(vec![fout], d)
                }));
            }
            grads
        }))
    }
}
