use crate::error::{dim_err, shape_err, Result};
use crate::float::Float;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Softmax over the last axis with max subtraction.
pub fn softmax_last<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let n = *x.shape().last().unwrap_or(&1);
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(n) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

/// Per-row batch statistics from a train-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, as folded into running statistics.
    pub var: Vec<T>,
    pub count: usize,
}

impl<T: Float> Graph<T> {
    pub fn softmax_last(&self, x: &Var<T>) -> Var<T> {
        let out = softmax_last(x.value());
        let y = out.clone();
        let n = *x.shape().last().unwrap_or(&1);
        self.record("softmax", &[x], out, move |g, _| {
            let mut dx = g.clone();
            for (drow, yrow) in dx.data_mut().chunks_exact_mut(n).zip(y.data().chunks_exact(n)) {
                let dot: T = drow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                for (d, &yv) in drow.iter_mut().zip(yrow) {
                    *d = yv * (*d - dot);
                }
            }
            vec![Some(dx)]
        })
    }

    /// Layer normalization over the last axis, then `gamma·x̂ + beta`.
    pub fn layer_norm(&self, x: &Var<T>, gamma: &Var<T>, beta: &Var<T>, eps: T) -> Result<Var<T>> {
        let c = *x.shape().last().unwrap_or(&1);
        if gamma.shape() != [c] || beta.shape() != [c] {
            return shape_err("layer_norm", x.shape(), gamma.shape());
        }
        let rows = x.value().len() / c;
        let mut xhat = vec![T::zero(); rows * c];
        let mut inv_std = vec![T::zero(); rows];
        let cf = T::lit(c as f64);
        for (r, row) in x.value().data().chunks_exact(c).enumerate() {
            let mean = row.iter().copied().sum::<T>() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, &v) in xhat[r * c..(r + 1) * c].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let (gv, bv) = (gamma.value().data(), beta.value().data());
        let out: Vec<T> = xhat
            .chunks_exact(c)
            .flat_map(|row| row.iter().zip(gv).zip(bv).map(|((&h, &g), &b)| h * g + b))
            .collect();
        let out = Tensor::from_parts(x.shape().to_vec(), out);
        let gamma_v = gamma.rc();
        let shape = x.shape().to_vec();
        Ok(self.record("layer_norm", &[x, gamma, beta], out, move |g, needs| {
            let gd = g.data();
            let gam = gamma_v.data();
            let dx = needs[0].then(|| {
                let mut dx = vec![T::zero(); rows * c];
                for r in 0..rows {
                    let (gr, hr) = (&gd[r * c..(r + 1) * c], &xhat[r * c..(r + 1) * c]);
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for i in 0..c {
                        let dh = gr[i] * gam[i];
                        m1 += dh;
                        m2 += dh * hr[i];
                    }
                    m1 /= cf;
                    m2 /= cf;
                    for i in 0..c {
                        dx[r * c + i] = inv_std[r] * (gr[i] * gam[i] - m1 - hr[i] * m2);
                    }
                }
                Tensor::from_parts(shape.clone(), dx)
            });
            let dgamma = needs[1].then(|| {
                let mut d = vec![T::zero(); c];
                for (gr, hr) in gd.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for i in 0..c {
                        d[i] += gr[i] * hr[i];
                    }
                }
                Tensor::from_parts(vec![c], d)
            });
            let dbeta = needs[2].then(|| {
                let mut d = vec![T::zero(); c];
                for gr in gd.chunks_exact(c) {
                    for i in 0..c {
                        d[i] += gr[i];
                    }
                }
                Tensor::from_parts(vec![c], d)
            });
            vec![dx, dgamma, dbeta]
        }))
    }

    /// Batch normalization over the rows of `x[N×C]` using the batch's own
    /// statistics. Returns the statistics so the caller can fold them into
    /// running estimates.
    pub fn batch_norm_train(
        &self,
        x: &Var<T>,
        gamma: &Var<T>,
        beta: &Var<T>,
        eps: T,
    ) -> Result<(Var<T>, BatchStats<T>)> {
        let s = x.shape();
        if s.len() != 2 || gamma.shape() != [s[1]] || beta.shape() != [s[1]] {
            return shape_err("batch_norm", s, gamma.shape());
        }
        let (n, c) = (s[0], s[1]);
        if n < 2 {
            return dim_err("batch_norm", "train mode needs at least two rows");
        }
        let nf = T::lit(n as f64);
        let xd = x.value().data();
        let mut mean = vec![T::zero(); c];
        for row in xd.chunks_exact(c) {
            for i in 0..c {
                mean[i] += row[i];
            }
        }
        mean.iter_mut().for_each(|m| *m /= nf);
        let mut var = vec![T::zero(); c];
        for row in xd.chunks_exact(c) {
            for i in 0..c {
                let d = row[i] - mean[i];
                var[i] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= nf);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); n * c];
        for (r, row) in xd.chunks_exact(c).enumerate() {
            for i in 0..c {
                xhat[r * c + i] = (row[i] - mean[i]) * inv_std[i];
            }
        }
        let (gv, bv) = (gamma.value().data(), beta.value().data());
        let out: Vec<T> = xhat
            .chunks_exact(c)
            .flat_map(|row| row.iter().zip(gv).zip(bv).map(|((&h, &g), &b)| h * g + b))
            .collect();
        let stats = BatchStats {
            mean: mean.clone(),
            var: var.iter().map(|&v| v * nf / T::lit((n - 1) as f64)).collect(),
            count: n,
        };
        let gamma_v = gamma.rc();
        let out = Tensor::from_parts(vec![n, c], out);
        let var = self.record("batch_norm", &[x, gamma, beta], out, move |g, needs| {
            let gd = g.data();
            let gam = gamma_v.data();
            let mut sum_g = vec![T::zero(); c];
            let mut sum_gh = vec![T::zero(); c];
            for (gr, hr) in gd.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                for i in 0..c {
                    sum_g[i] += gr[i];
                    sum_gh[i] += gr[i] * hr[i];
                }
            }
            let dx = needs[0].then(|| {
                let mut dx = vec![T::zero(); n * c];
                for r in 0..n {
                    for i in 0..c {
                        let k = r * c + i;
                        dx[k] = gam[i] * inv_std[i] * (gd[k] - sum_g[i] / nf - xhat[k] * sum_gh[i] / nf);
                    }
                }
                Tensor::from_parts(vec![n, c], dx)
            });
            vec![
                dx,
                needs[1].then(|| Tensor::from_parts(vec![c], sum_gh.clone())),
                needs[2].then(|| Tensor::from_parts(vec![c], sum_g.clone())),
            ]
        });
        Ok((var, stats))
    }

    /// Batch normalization over the rows of `x[N×C]` with fixed statistics.
    pub fn batch_norm_eval(
        &self,
        x: &Var<T>,
        gamma: &Var<T>,
        beta: &Var<T>,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var<T>> {
        let s = x.shape();
        if s.len() != 2 || gamma.shape() != [s[1]] || beta.shape() != [s[1]] {
            return shape_err("batch_norm", s, gamma.shape());
        }
        let c = s[1];
        if running_mean.len() != c || running_var.len() != c {
            return dim_err("batch_norm", "running statistics length mismatch");
        }
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mean = running_mean.to_vec();
        let (gv, bv) = (gamma.value().data(), beta.value().data());
        let xd = x.value().data();
        let mut out = vec![T::zero(); xd.len()];
        for (orow, row) in out.chunks_exact_mut(c).zip(xd.chunks_exact(c)) {
            for i in 0..c {
                orow[i] = (row[i] - mean[i]) * inv_std[i] * gv[i] + bv[i];
            }
        }
        let (xv, gamma_v) = (x.rc(), gamma.rc());
        let shape = s.to_vec();
        let out = Tensor::from_parts(shape.clone(), out);
        Ok(self.record("batch_norm", &[x, gamma, beta], out, move |g, needs| {
            let gd = g.data();
            let gam = gamma_v.data();
            let dx = needs[0].then(|| {
                let mut dx = gd.to_vec();
                for row in dx.chunks_exact_mut(c) {
                    for i in 0..c {
                        row[i] *= gam[i] * inv_std[i];
                    }
                }
                Tensor::from_parts(shape.clone(), dx)
            });
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for (gr, xr) in gd.chunks_exact(c).zip(xv.data().chunks_exact(c)) {
                for i in 0..c {
                    dgamma[i] += gr[i] * (xr[i] - mean[i]) * inv_std[i];
                    dbeta[i] += gr[i];
                }
            }
            vec![
                dx,
                needs[1].then(|| Tensor::from_parts(vec![c], dgamma)),
                needs[2].then(|| Tensor::from_parts(vec![c], dbeta)),
            ]
        }))
    }
}
