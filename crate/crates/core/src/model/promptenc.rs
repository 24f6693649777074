//! Sparse tokens from points and box corners, dense embedding from a
//! rasterized scribble.

use boxseg_tensor::{Float, Tensor, Var};

use super::config::ModelConfig;
use super::ctx::Ctx;
use super::layers::{conv, ln2d};
use crate::error::{contract, Result};
use crate::prompts::Point;

/// Row of `promptenc.point_embed` added to each token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Point = 0,
    CornerTopLeft = 1,
    CornerBottomRight = 2,
}

pub struct SparseEmbedding<T: Float = f32> {
    /// `[N, E]`.
    pub tokens: Var<T>,
    pub kinds: Vec<TokenKind>,
}

/// Random Fourier features of `(x, y)` given in `[0, size]` pixel units,
/// using the fixed `[2, E/2]` projection `gauss`.
pub fn positional_encode<T: Float>(gauss: &Tensor<T>, x: f64, y: f64, size: usize) -> Vec<T> {
    let half = gauss.shape()[1];
    let g = gauss.data();
    let (u, v) = (2.0 * x / size as f64 - 1.0, 2.0 * y / size as f64 - 1.0);
    let mut out = vec![T::zero(); 2 * half];
    for k in 0..half {
        let a = std::f64::consts::TAU * (u * g[k].to_f64() + v * g[half + k].to_f64());
        out[k] = T::lit(a.sin());
        out[half + k] = T::lit(a.cos());
    }
    out
}

/// Positional encoding of every embedding-grid cell center, `[G·G, E]`
/// in row-major cell order.
pub fn image_pe<T: Float>(gauss: &Tensor<T>, grid: usize, size: usize) -> Tensor<T> {
    let cell = size as f64 / grid as f64;
    let e = 2 * gauss.shape()[1];
    let mut data = Vec::with_capacity(grid * grid * e);
    for r in 0..grid {
        for c in 0..grid {
            data.extend(positional_encode(gauss, (c as f64 + 0.5) * cell, (r as f64 + 0.5) * cell, size));
        }
    }
    Tensor::new(vec![grid * grid, e], data).expect("pe shape")
}

/// One token per point, then the two corners. Each token is its positional
/// encoding plus the learned embedding of its kind.
pub fn encode_sparse<T: Float>(
    cx: &Ctx<T>,
    cfg: &ModelConfig,
    points: &[Point],
    corners: &[Point; 2],
) -> Result<SparseEmbedding<T>> {
    if points.len() > 4 {
        return contract(format!("at most 4 points, got {}", points.len()));
    }
    let gauss = cx.tensor("promptenc.pe_gaussian")?;
    let mut kinds: Vec<TokenKind> = vec![TokenKind::Point; points.len()];
    kinds.extend([TokenKind::CornerTopLeft, TokenKind::CornerBottomRight]);
    let e = cfg.embed_dim_out;
    let mut pe = Vec::with_capacity(kinds.len() * e);
    for p in points.iter().chain(corners) {
        pe.extend(positional_encode(gauss, p.x, p.y, cfg.img_size));
    }
    let pe = cx.g.constant(Tensor::new(vec![kinds.len(), e], pe)?);
    let table = cx.p("promptenc.point_embed.weight")?;
    let idx: Vec<usize> = kinds.iter().map(|&k| k as usize).collect();
    let emb = cx.g.gather_rows(&table, &idx)?;
    Ok(SparseEmbedding { tokens: cx.g.add(&pe, &emb)?, kinds })
}

/// Maps a binary `S × S` scribble to `[E, G, G]`. An empty scribble gives
/// the learned no-scribble vector at every cell.
pub fn encode_dense<T: Float>(cx: &Ctx<T>, cfg: &ModelConfig, scribble: &[u8]) -> Result<Var<T>> {
    let (s, g, e) = (cfg.img_size, cfg.embed_grid(), cfg.embed_dim_out);
    if scribble.len() != s * s {
        return contract(format!("scribble has {} pixels, expected {}", scribble.len(), s * s));
    }
    if scribble.iter().any(|&v| v > 1) {
        return contract("scribble mask must be binary");
    }
    if scribble.iter().all(|&v| v == 0) {
        let ns = cx.p("promptenc.no_scribble.weight")?;
        let t = cx.g.broadcast_to(&ns, &[g, g]);
        return Ok(cx.g.permute(&t, &[2, 0, 1])?);
    }
    let x = Tensor::new(vec![1, s, s], scribble.iter().map(|&v| T::lit(v as f64)).collect())?;
    let x = cx.g.constant(x);
    let x = conv(cx, "promptenc.dense.conv1", &x, 2, 0, true)?;
    let x = cx.g.gelu(&ln2d(cx, "promptenc.dense.ln1", &x)?);
    let x = conv(cx, "promptenc.dense.conv2", &x, 2, 0, true)?;
    let x = cx.g.gelu(&ln2d(cx, "promptenc.dense.ln2", &x)?);
    let x = cx.g.avg_pool(&x, x.shape()[1] / g)?;
    let out = conv(cx, "promptenc.dense.conv3", &x, 1, 0, true)?;
    debug_assert_eq!(out.shape(), [e, g, g]);
    Ok(out)
}
