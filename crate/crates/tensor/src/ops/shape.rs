use crate::error::{dim_err, shape_err, Result};
use crate::float::Float;
use crate::graph::{Graph, Var};
use crate::tensor::{strides_of, Tensor};

/// Reorders axes: output axis `i` is input axis `perm[i]`.
pub fn permute<T: Float>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let s = x.shape();
    let mut seen = vec![false; s.len()];
    if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
        return dim_err("permute", format!("{perm:?} is not a permutation of {} axes", s.len()));
    }
    let in_strides = strides_of(s);
    let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    let nd = out_shape.len();
    if nd == 0 {
        return Ok(x.clone());
    }
    // Innermost axis handled by a tight loop; the rest by an odometer.
    let (inner_n, inner_s) = (out_shape[nd - 1], strides[nd - 1]);
    let mut idx = vec![0usize; nd - 1];
    let mut base = 0usize;
    loop {
        for j in 0..inner_n {
            out.push(src[base + j * inner_s]);
        }
        let mut ax = nd - 1;
        loop {
            if ax == 0 {
                return Ok(Tensor::from_parts(out_shape, out));
            }
            ax -= 1;
            idx[ax] += 1;
            base += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Copies `len` entries starting at `start` along `axis`.
pub fn slice_axis<T: Float>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if axis >= s.len() || len == 0 || start + len > s[axis] {
        return dim_err("slice", format!("[{start}, {}) on axis {axis} of {s:?}", start + len));
    }
    let (outer, n, inner) = axis_split(s, axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let off = (o * n + start) * inner;
        out.extend_from_slice(&x.data()[off..off + len * inner]);
    }
    let mut shape = s.to_vec();
    shape[axis] = len;
    Ok(Tensor::from_parts(shape, out))
}

pub fn concat<T: Float>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let Some(first) = parts.first() else {
        return dim_err("concat", "no inputs");
    };
    let s0 = first.shape();
    if axis >= s0.len() {
        return dim_err("concat", format!("axis {axis} out of range for {s0:?}"));
    }
    for p in parts {
        let s = p.shape();
        let ok = s.len() == s0.len() && s.iter().zip(s0).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return shape_err("concat", s0, s);
        }
    }
    let (outer, _, inner) = axis_split(s0, axis);
    let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let n = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * n..(o + 1) * n]);
        }
    }
    let mut shape = s0.to_vec();
    shape[axis] = total;
    Ok(Tensor::from_parts(shape, out))
}

impl<T: Float> Graph<T> {
    pub fn reshape(&self, x: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
        let out = x.to_tensor().reshape(shape.to_vec())?;
        let orig = x.shape().to_vec();
        Ok(self.record("reshape", &[x], out, move |g, _| {
            vec![Some(g.clone().reshape(orig.clone()).expect("reshape grad"))]
        }))
    }

    pub fn permute(&self, x: &Var<T>, perm: &[usize]) -> Result<Var<T>> {
        let out = permute(x.value(), perm)?;
        let mut inv = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        Ok(self.record("permute", &[x], out, move |g, _| {
            vec![Some(permute(g, &inv).expect("permute grad"))]
        }))
    }

    /// Swaps the two axes of a 2-D tensor.
    pub fn transpose(&self, x: &Var<T>) -> Result<Var<T>> {
        if x.shape().len() != 2 {
            return dim_err("transpose", format!("expected 2-D, got {:?}", x.shape()));
        }
        self.permute(x, &[1, 0])
    }

    pub fn slice(&self, x: &Var<T>, axis: usize, start: usize, len: usize) -> Result<Var<T>> {
        let out = slice_axis(x.value(), axis, start, len)?;
        let shape = x.shape().to_vec();
        Ok(self.record("slice", &[x], out, move |g, _| {
            let (outer, n, inner) = axis_split(&shape, axis);
            let mut d = vec![T::zero(); outer * n * inner];
            for o in 0..outer {
                let dst = (o * n + start) * inner;
                d[dst..dst + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::from_parts(shape.clone(), d))]
        }))
    }

    pub fn concat(&self, parts: &[&Var<T>], axis: usize) -> Result<Var<T>> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|v| v.value()).collect();
        let out = concat(&values, axis)?;
        let sizes: Vec<usize> = parts.iter().map(|v| v.shape()[axis]).collect();
        Ok(self.record("concat", parts, out, move |g, needs| {
            let mut start = 0;
            sizes
                .iter()
                .zip(needs)
                .map(|(&n, &need)| {
                    let r = need.then(|| slice_axis(g, axis, start, n).expect("concat grad"));
                    start += n;
                    r
                })
                .collect()
        }))
    }
}
