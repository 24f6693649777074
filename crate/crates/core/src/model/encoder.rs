//! Convolutional stem, four stages of windowed-attention blocks with a
//! depthwise conv + batch norm branch, and the 256-channel neck.

use boxseg_tensor::{Float, Tensor, Var};

use super::config::ModelConfig;
use super::ctx::Ctx;
use super::layers::{chw_to_hwc, conv, hwc_to_chw, layer_norm, linear, ln2d, BN_EPS};
use super::plan::pad_to;
use crate::error::{contract, Result};

/// Per-stage features as `[C, H, W]` plus the neck embedding.
pub struct EncoderOutput<T: Float = f32> {
    pub stages: [Var<T>; 4],
    pub embedding: Var<T>,
}

/// Two 4×4 stride-2 convolutions, `[3, S, S] → [C0, S/4, S/4]`. The even
/// kernel keeps each output cell centred on the pixels it summarizes.
pub fn stem_forward<T: Float>(cx: &Ctx<T>, img: &Var<T>) -> Result<Var<T>> {
    if img.shape().len() != 3 || img.shape()[0] != 3 {
        return Err(boxseg_tensor::TensorError::Dimension {
            op: "stem",
            msg: format!("expected [3, H, W], got {:?}", img.shape()),
        }
        .into());
    }
    let x = conv(cx, "encoder.stem.conv1", img, 2, 1, true)?;
    let x = cx.g.gelu(&x);
    conv(cx, "encoder.stem.conv2", &x, 2, 1, true)
}

/// Relative-position table row for every (query, key) pair of a window.
pub fn relative_position_index(ws: usize) -> Vec<usize> {
    let n = ws * ws;
    let span = 2 * ws - 1;
    let mut idx = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let dr = i / ws + ws - 1 - j / ws;
            let dc = i % ws + ws - 1 - j % ws;
            idx.push(dr * span + dc);
        }
    }
    idx
}

/// Additive mask `[nW, n, n]` that blocks attention between tokens that
/// came from different regions before the cyclic shift.
pub fn shifted_window_mask<T: Float>(hp: usize, wp: usize, ws: usize, shift: usize) -> Tensor<T> {
    let region = |p: usize, len: usize| {
        if p < len - ws {
            0
        } else if p < len - shift {
            1
        } else {
            2
        }
    };
    let label: Vec<usize> = (0..hp * wp).map(|i| region(i / wp, hp) * 3 + region(i % wp, wp)).collect();
    let (nh, nw, n) = (hp / ws, wp / ws, ws * ws);
    let neg = T::lit(-100.0);
    let mut out = Vec::with_capacity(nh * nw * n * n);
    for wy in 0..nh {
        for wx in 0..nw {
            let lab = |k: usize| label[(wy * ws + k / ws) * wp + wx * ws + k % ws];
            for i in 0..n {
                for j in 0..n {
                    out.push(if lab(i) == lab(j) { T::zero() } else { neg });
                }
            }
        }
    }
    Tensor::new(vec![nh * nw, n, n], out).expect("mask shape")
}

/// Windowed multi-head self-attention on `x[H, W, C]` (already normalized).
fn window_attention<T: Float>(cx: &Ctx<T>, name: &str, x: &Var<T>, heads: usize, ws: usize, shift: usize) -> Result<Var<T>> {
    let g = cx.g;
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (hp, wp) = (pad_to(h, ws), pad_to(w, ws));
    let n = ws * ws;
    let nw = (hp / ws) * (wp / ws);
    let hd = c / heads;

    let mut t = g.pad_hwc(x, hp, wp)?;
    if shift > 0 {
        t = g.roll2d(&t, -(shift as isize), -(shift as isize))?;
    }
    let t = g.window_partition(&t, ws)?;
    let t = g.reshape(&t, &[nw * n, c])?;
    let qkv = linear(cx, &format!("{name}.qkv"), &t, true)?;
    let qkv = g.reshape(&qkv, &[nw, n, 3, heads, hd])?;
    let qkv = g.permute(&qkv, &[2, 0, 3, 1, 4])?;
    let part = |k: usize| -> Result<Var<T>> {
        let s = g.slice(&qkv, 0, k, 1)?;
        Ok(g.reshape(&s, &[nw * heads, n, hd])?)
    };
    let q = g.mul_scalar(&part(0)?, T::lit((hd as f64).powf(-0.5)));
    let (k, v) = (part(1)?, part(2)?);

    let attn = g.bmm(&q, &k, false, true)?;
    let attn = g.reshape(&attn, &[nw, heads, n, n])?;
    let table = cx.p(&format!("{name}.rel_pos_bias"))?;
    let bias = g.gather_rows(&table, &relative_position_index(ws))?;
    let bias = g.transpose(&bias)?;
    let bias = g.reshape(&bias, &[heads, n, n])?;
    let mut attn = g.add_broadcast(&attn, &bias)?;
    if shift > 0 {
        attn = g.add_window_mask(&attn, &shifted_window_mask(hp, wp, ws, shift))?;
    }
    let attn = g.reshape(&attn, &[nw * heads, n, n])?;
    let attn = g.softmax_last(&attn);
    let out = g.bmm(&attn, &v, false, false)?;
    let out = g.reshape(&out, &[nw, heads, n, hd])?;
    let out = g.permute(&out, &[0, 2, 1, 3])?;
    let out = g.reshape(&out, &[nw * n, c])?;
    let out = linear(cx, &format!("{name}.proj"), &out, true)?;
    let out = g.reshape(&out, &[nw, ws, ws, c])?;
    let mut out = g.window_reverse(&out, ws, hp, wp)?;
    if shift > 0 {
        out = g.roll2d(&out, shift as isize, shift as isize)?;
    }
    Ok(g.crop_hwc(&out, h, w)?)
}

/// Batch norm over the `H·W` rows of `x[H·W, C]`.
fn batch_norm<T: Float>(cx: &Ctx<T>, name: &str, x: &Var<T>) -> Result<Var<T>> {
    let gamma = cx.p(&format!("{name}.weight"))?;
    let beta = cx.p(&format!("{name}.bias"))?;
    let eps = T::lit(BN_EPS);
    if cx.train {
        let (y, stats) = cx.g.batch_norm_train(x, &gamma, &beta, eps)?;
        cx.record_bn(name, stats);
        Ok(y)
    } else {
        let mean = cx.tensor(&format!("{name}.running_mean"))?;
        let var = cx.tensor(&format!("{name}.running_var"))?;
        Ok(cx.g.batch_norm_eval(x, &gamma, &beta, mean.data(), var.data(), eps)?)
    }
}

/// One block on `x[H, W, C]`: attention, conv + batch norm, MLP, each with
/// a residual connection.
pub fn swin_block_forward<T: Float>(
    cx: &Ctx<T>,
    name: &str,
    x: &Var<T>,
    heads: usize,
    ws: usize,
    shift: usize,
    mlp: bool,
) -> Result<Var<T>> {
    let g = cx.g;
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let t = layer_norm(cx, &format!("{name}.norm1"), x)?;
    let t = window_attention(cx, &format!("{name}.attn"), &t, heads, ws, shift)?;
    let x = g.add(x, &t)?;

    let cw = cx.p(&format!("{name}.conv.weight"))?;
    let cb = cx.p(&format!("{name}.conv.bias"))?;
    let t = g.depthwise_conv_hwc(&x, &cw, &cb, 1)?;
    let t = g.reshape(&t, &[h * w, c])?;
    let t = batch_norm(cx, &format!("{name}.bn"), &t)?;
    let t = g.reshape(&t, &[h, w, c])?;
    let x = g.add(&x, &t)?;
    if !mlp {
        return Ok(x);
    }

    let t = layer_norm(cx, &format!("{name}.norm2"), &x)?;
    let t = g.reshape(&t, &[h * w, c])?;
    let t = linear(cx, &format!("{name}.mlp.fc1"), &t, true)?;
    let t = g.gelu(&t);
    let t = linear(cx, &format!("{name}.mlp.fc2"), &t, true)?;
    let t = g.reshape(&t, &[h, w, c])?;
    Ok(g.add(&x, &t)?)
}

/// Downsamples `x[H, W, C]` by `f` (space-to-depth) or only projects
/// channels when `f == 1`.
fn merge<T: Float>(cx: &Ctx<T>, name: &str, x: &Var<T>, f: usize) -> Result<Var<T>> {
    let t = if f > 1 { cx.g.space_to_depth_hwc(x, f)? } else { x.clone() };
    let (h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let t = layer_norm(cx, &format!("{name}.norm"), &t)?;
    let t = cx.g.reshape(&t, &[h * w, c])?;
    let t = linear(cx, &format!("{name}.reduction"), &t, false)?;
    let out_c = t.shape()[1];
    Ok(cx.g.reshape(&t, &[h, w, out_c])?)
}

/// 1×1 conv → LN → 3×3 conv → LN; `[C4, G, G] → [E, G, G]`.
pub fn neck_forward<T: Float>(cx: &Ctx<T>, s4: &Var<T>) -> Result<Var<T>> {
    let x = conv(cx, "encoder.neck.conv1", s4, 1, 0, false)?;
    let x = ln2d(cx, "encoder.neck.ln1", &x)?;
    let x = conv(cx, "encoder.neck.conv2", &x, 1, 1, false)?;
    ln2d(cx, "encoder.neck.ln2", &x)
}

pub fn encoder_forward<T: Float>(cx: &Ctx<T>, cfg: &ModelConfig, img: &Var<T>) -> Result<EncoderOutput<T>> {
    let s = cfg.img_size;
    if img.shape() != [3, s, s] {
        return contract(format!("encoder expects [3, {s}, {s}], got {:?}", img.shape()));
    }
    let stem = stem_forward(cx, img)?;
    let mut x = chw_to_hwc(cx, &stem)?;
    let grids = cfg.stage_grids();
    let wins = cfg.stage_windows();
    let mut stages = Vec::with_capacity(4);
    for i in 0..4 {
        let stage = format!("encoder.stage{}", i + 1);
        if i > 0 {
            x = merge(cx, &format!("{stage}.merge"), &x, cfg.merge_factors[i - 1])?;
        }
        let (ws, shift_ok) = (wins[i], grids[i] > cfg.window_size);
        for j in 0..cfg.depths[i] {
            let shift = if j % 2 == 1 && shift_ok { ws / 2 } else { 0 };
            x = swin_block_forward(cx, &format!("{stage}.block{}", j + 1), &x, cfg.num_heads[i], ws, shift, true)?;
        }
        stages.push(hwc_to_chw(cx, &x)?);
    }
    let embedding = neck_forward(cx, &stages[3])?;
    let stages: [Var<T>; 4] = stages.try_into().map_err(|_| unreachable!()).unwrap();
    Ok(EncoderOutput { stages, embedding })
}
