//! Parameterized building blocks shared by the model components.

use boxseg_tensor::{Float, Var};

use super::ctx::Ctx;
use crate::error::Result;

pub(crate) const LN_EPS: f64 = 1e-6;
pub(crate) const BN_EPS: f64 = 1e-5;

/// `x[N, in] → [N, out]` with `name.weight` and optionally `name.bias`.
pub(crate) fn linear<T: Float>(cx: &Ctx<T>, name: &str, x: &Var<T>, bias: bool) -> Result<Var<T>> {
    let w = cx.p(&format!("{name}.weight"))?;
    let b = if bias { Some(cx.p(&format!("{name}.bias"))?) } else { None };
    Ok(cx.g.linear(x, &w, b.as_ref())?)
}

/// Layer norm over the last axis.
pub(crate) fn layer_norm<T: Float>(cx: &Ctx<T>, name: &str, x: &Var<T>) -> Result<Var<T>> {
    let w = cx.p(&format!("{name}.weight"))?;
    let b = cx.p(&format!("{name}.bias"))?;
    Ok(cx.g.layer_norm(x, &w, &b, T::lit(LN_EPS))?)
}

pub(crate) fn conv<T: Float>(cx: &Ctx<T>, name: &str, x: &Var<T>, stride: usize, pad: usize, bias: bool) -> Result<Var<T>> {
    let w = cx.p(&format!("{name}.weight"))?;
    let b = if bias { Some(cx.p(&format!("{name}.bias"))?) } else { None };
    Ok(cx.g.conv2d(x, &w, b.as_ref(), stride, pad)?)
}

pub(crate) fn conv_t2<T: Float>(cx: &Ctx<T>, name: &str, x: &Var<T>) -> Result<Var<T>> {
    let w = cx.p(&format!("{name}.weight"))?;
    let b = cx.p(&format!("{name}.bias"))?;
    Ok(cx.g.conv_transpose2x2(x, &w, &b)?)
}

pub(crate) fn chw_to_hwc<T: Float>(cx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
    Ok(cx.g.permute(x, &[1, 2, 0])?)
}

pub(crate) fn hwc_to_chw<T: Float>(cx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
    Ok(cx.g.permute(x, &[2, 0, 1])?)
}

/// Channel layer norm on a `[C, H, W]` map.
pub(crate) fn ln2d<T: Float>(cx: &Ctx<T>, name: &str, x: &Var<T>) -> Result<Var<T>> {
    let t = chw_to_hwc(cx, x)?;
    let t = layer_norm(cx, name, &t)?;
    hwc_to_chw(cx, &t)
}

/// Three-layer perceptron with GELU between layers.
pub(crate) fn mlp3<T: Float>(cx: &Ctx<T>, name: &str, x: &Var<T>) -> Result<Var<T>> {
    let h = cx.g.gelu(&linear(cx, &format!("{name}.fc1"), x, true)?);
    let h = cx.g.gelu(&linear(cx, &format!("{name}.fc2"), &h, true)?);
    linear(cx, &format!("{name}.fc3"), &h, true)
}

/// Splits `[N, heads·hd]` into `[heads, N, hd]`.
pub(crate) fn split_heads<T: Float>(cx: &Ctx<T>, x: &Var<T>, heads: usize) -> Result<Var<T>> {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let t = cx.g.reshape(x, &[n, heads, c / heads])?;
    Ok(cx.g.permute(&t, &[1, 0, 2])?)
}

/// Inverse of [`split_heads`].
pub(crate) fn merge_heads<T: Float>(cx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
    let (h, n, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let t = cx.g.permute(x, &[1, 0, 2])?;
    Ok(cx.g.reshape(&t, &[n, h * d])?)
}
