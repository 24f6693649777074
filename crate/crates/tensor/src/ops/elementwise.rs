use crate::error::{shape_err, Result};
use crate::float::Float;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// tanh-approximated GELU and its derivative.
pub fn gelu_scalar<T: Float>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad_scalar<T: Float>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::lit(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

pub fn sigmoid_scalar<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn same_shape(op: &'static str, a: &Var<impl Float>, b: &Var<impl Float>) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(op, a.shape(), b.shape());
    }
    Ok(())
}

/// Sums `g` over leading axes so that it has `n` trailing elements.
fn reduce_leading<T: Float>(g: &Tensor<T>, suffix: &[usize]) -> Tensor<T> {
    let n: usize = suffix.iter().product();
    let mut out = vec![T::zero(); n];
    for chunk in g.data().chunks_exact(n) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Tensor::from_parts(suffix.to_vec(), out)
}

impl<T: Float> Graph<T> {
    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("add", a, b)?;
        let out = a.value().zip_map(b.value(), |x, y| x + y)?;
        Ok(self.record("add", &[a, b], out, |g, needs| {
            vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]
        }))
    }

    pub fn sub(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("sub", a, b)?;
        let out = a.value().zip_map(b.value(), |x, y| x - y)?;
        Ok(self.record("sub", &[a, b], out, |g, needs| {
            vec![needs[0].then(|| g.clone()), needs[1].then(|| g.map(|v| -v))]
        }))
    }

    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("mul", a, b)?;
        let out = a.value().zip_map(b.value(), |x, y| x * y)?;
        let (av, bv) = (a.rc(), b.rc());
        Ok(self.record("mul", &[a, b], out, move |g, needs| {
            vec![
                needs[0].then(|| g.zip_map(&bv, |d, y| d * y).expect("mul grad")),
                needs[1].then(|| g.zip_map(&av, |d, x| d * x).expect("mul grad")),
            ]
        }))
    }

    pub fn div(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("div", a, b)?;
        let out = a.value().zip_map(b.value(), |x, y| x / y)?;
        let (av, bv) = (a.rc(), b.rc());
        Ok(self.record("div", &[a, b], out, move |g, needs| {
            let ga = needs[0].then(|| g.zip_map(&bv, |d, y| d / y).expect("div grad"));
            let gb = needs[1].then(|| {
                let q = av.zip_map(&bv, |x, y| -x / (y * y)).expect("div grad");
                g.zip_map(&q, |d, q| d * q).expect("div grad")
            });
            vec![ga, gb]
        }))
    }

    pub fn add_scalar(&self, a: &Var<T>, s: T) -> Var<T> {
        let out = a.value().map(|v| v + s);
        self.record("add_scalar", &[a], out, |g, _| vec![Some(g.clone())])
    }

    pub fn mul_scalar(&self, a: &Var<T>, s: T) -> Var<T> {
        let out = a.value().scale(s);
        self.record("mul_scalar", &[a], out, move |g, _| vec![Some(g.scale(s))])
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s; `b` repeats over the
    /// leading axes of `a`.
    pub fn add_broadcast(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != sb[..] {
            return shape_err("add_broadcast", &sa, &sb);
        }
        let n = b.value().len();
        let mut out = a.to_tensor();
        for chunk in out.data_mut().chunks_exact_mut(n) {
            for (o, &v) in chunk.iter_mut().zip(b.value().data()) {
                *o += v;
            }
        }
        Ok(self.record("add_broadcast", &[a, b], out, move |g, needs| {
            vec![
                needs[0].then(|| g.clone()),
                needs[1].then(|| reduce_leading(g, &sb)),
            ]
        }))
    }

    /// Repeats `x` over new leading axes: result shape `leading ++ x.shape`.
    pub fn broadcast_to(&self, x: &Var<T>, leading: &[usize]) -> Var<T> {
        let reps: usize = leading.iter().product();
        let suffix = x.shape().to_vec();
        let mut shape = leading.to_vec();
        shape.extend_from_slice(&suffix);
        let mut data = Vec::with_capacity(reps * x.value().len());
        for _ in 0..reps {
            data.extend_from_slice(x.value().data());
        }
        let out = Tensor::from_parts(shape, data);
        self.record("broadcast_to", &[x], out, move |g, _| vec![Some(reduce_leading(g, &suffix))])
    }

    pub fn sum_all(&self, x: &Var<T>) -> Var<T> {
        let shape = x.shape().to_vec();
        let out = Tensor::scalar(x.value().sum());
        self.record("sum_all", &[x], out, move |g, _| {
            vec![Some(Tensor::full(shape.clone(), g.data()[0]))]
        })
    }

    pub fn mean_all(&self, x: &Var<T>) -> Var<T> {
        let shape = x.shape().to_vec();
        let n = T::lit(x.value().len() as f64);
        let out = Tensor::scalar(x.value().sum() / n);
        self.record("mean_all", &[x], out, move |g, _| {
            vec![Some(Tensor::full(shape.clone(), g.data()[0] / n))]
        })
    }

    pub fn sigmoid(&self, x: &Var<T>) -> Var<T> {
        let out = x.value().map(sigmoid_scalar);
        let y = out.clone();
        self.record("sigmoid", &[x], out, move |g, _| {
            vec![Some(g.zip_map(&y, |d, s| d * s * (T::one() - s)).expect("sigmoid grad"))]
        })
    }

    pub fn gelu(&self, x: &Var<T>) -> Var<T> {
        let out = x.value().map(gelu_scalar);
        let xv = x.rc();
        self.record("gelu", &[x], out, move |g, _| {
            vec![Some(g.zip_map(&xv, |d, v| d * gelu_grad_scalar(v)).expect("gelu grad"))]
        })
    }

    pub fn abs(&self, x: &Var<T>) -> Var<T> {
        let out = x.value().map(|v| v.abs());
        let xv = x.rc();
        self.record("abs", &[x], out, move |g, _| {
            vec![Some(g.zip_map(&xv, |d, v| if v > T::zero() {
                d
            } else if v < T::zero() {
                -d
            } else {
                T::zero()
            }).expect("abs grad"))]
        })
    }

    /// Mean binary cross-entropy of `logits` against `target`, computed in
    /// the stable form `max(x,0) − x·t + ln(1 + e^{−|x|})`.
    pub fn bce_with_logits(&self, logits: &Var<T>, target: &Var<T>) -> Result<Var<T>> {
        same_shape("bce_with_logits", logits, target)?;
        let n = T::lit(logits.value().len() as f64);
        let total: T = logits
            .value()
            .data()
            .iter()
            .zip(target.value().data())
            .map(|(&x, &t)| x.max(T::zero()) - x * t + (-x.abs()).exp().ln_1p())
            .sum();
        let (xv, tv) = (logits.rc(), target.rc());
        Ok(self.record("bce_with_logits", &[logits, target], Tensor::scalar(total / n), move |g, needs| {
            let s = g.data()[0] / n;
            let gx = needs[0].then(|| xv.zip_map(&tv, |x, t| s * (sigmoid_scalar(x) - t)).expect("bce grad"));
            let gt = needs[1].then(|| xv.map(|x| -s * x));
            vec![gx, gt]
        }))
    }
}
