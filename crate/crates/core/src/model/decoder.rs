//! Two-way transformer between prompt tokens and the image embedding,
//! skip fusion, upscaling and the mask / IoU heads.

use boxseg_tensor::{resize_bilinear, sigmoid_scalar, Float, Tensor, Var};

use super::config::ModelConfig;
use super::ctx::Ctx;
use super::encoder::EncoderOutput;
use super::layers::{conv, conv_t2, layer_norm, linear, ln2d, merge_heads, mlp3, split_heads};
use crate::error::{contract, Result};
use crate::preprocess::PreparedInput;

pub struct DecoderOutput<T: Float = f32> {
    /// `[1, S, S]`.
    pub mask_logits: Var<T>,
    /// `[1, 1]`, in `[0, 1]`.
    pub iou_pred: Var<T>,
}

/// Multi-head attention with separate projections; queries `[Nq, E]`,
/// keys and values `[Nk, E]`.
fn attention<T: Float>(cx: &Ctx<T>, name: &str, q: &Var<T>, k: &Var<T>, v: &Var<T>, heads: usize) -> Result<Var<T>> {
    let g = cx.g;
    let q = split_heads(cx, &linear(cx, &format!("{name}.q_proj"), q, true)?, heads)?;
    let k = split_heads(cx, &linear(cx, &format!("{name}.k_proj"), k, true)?, heads)?;
    let v = split_heads(cx, &linear(cx, &format!("{name}.v_proj"), v, true)?, heads)?;
    let hd = q.shape()[2];
    let q = g.mul_scalar(&q, T::lit((hd as f64).powf(-0.5)));
    let a = g.softmax_last(&g.bmm(&q, &k, false, true)?);
    let o = merge_heads(cx, &g.bmm(&a, &v, false, false)?)?;
    linear(cx, &format!("{name}.out_proj"), &o, true)
}

/// Returns the updated tokens `[M, E]` and image tokens `[G·G, E]`.
pub fn two_way_transformer<T: Float>(
    cx: &Ctx<T>,
    cfg: &ModelConfig,
    image: &Var<T>,
    image_pe: &Var<T>,
    tokens: &Var<T>,
) -> Result<(Var<T>, Var<T>)> {
    let g = cx.g;
    let heads = cfg.decoder_heads;
    let mut queries = tokens.clone();
    let mut keys = image.clone();
    for l in 0..cfg.decoder_depth {
        let p = format!("decoder.transformer.layer{}", l + 1);
        if l == 0 {
            queries = attention(cx, &format!("{p}.self_attn"), &queries, &queries, &queries, heads)?;
        } else {
            let q = g.add(&queries, tokens)?;
            let a = attention(cx, &format!("{p}.self_attn"), &q, &q, &queries, heads)?;
            queries = g.add(&queries, &a)?;
        }
        queries = layer_norm(cx, &format!("{p}.norm1"), &queries)?;

        let q = g.add(&queries, tokens)?;
        let k = g.add(&keys, image_pe)?;
        let a = attention(cx, &format!("{p}.cross_t2i"), &q, &k, &keys, heads)?;
        queries = layer_norm(cx, &format!("{p}.norm2"), &g.add(&queries, &a)?)?;

        let h = g.gelu(&linear(cx, &format!("{p}.mlp.fc1"), &queries, true)?);
        let h = linear(cx, &format!("{p}.mlp.fc2"), &h, true)?;
        queries = layer_norm(cx, &format!("{p}.norm3"), &g.add(&queries, &h)?)?;

        let q = g.add(&queries, tokens)?;
        let k = g.add(&keys, image_pe)?;
        let a = attention(cx, &format!("{p}.cross_i2t"), &k, &q, &queries, heads)?;
        keys = layer_norm(cx, &format!("{p}.norm4"), &g.add(&keys, &a)?)?;
    }
    let q = g.add(&queries, tokens)?;
    let k = g.add(&keys, image_pe)?;
    let a = attention(cx, "decoder.transformer.final_attn", &q, &k, &keys, heads)?;
    queries = layer_norm(cx, "decoder.transformer.norm_final", &g.add(&queries, &a)?)?;
    Ok((queries, keys))
}

/// Resizes stages 2 and 3 to the stage-4 grid, concatenates channels and
/// reduces with two 3×3 convolutions to `[E, G, G]`.
pub fn fuse_skips<T: Float>(cx: &Ctx<T>, s2: &Var<T>, s3: &Var<T>, s4: &Var<T>) -> Result<Var<T>> {
    let (gh, gw) = (s4.shape()[1], s4.shape()[2]);
    let s2 = cx.g.resize_bilinear(s2, gh, gw)?;
    let s3 = cx.g.resize_bilinear(s3, gh, gw)?;
    let x = cx.g.concat(&[&s2, &s3, s4], 0)?;
    let x = cx.g.gelu(&conv(cx, "decoder.fuse.conv1", &x, 1, 1, true)?);
    conv(cx, "decoder.fuse.conv2", &x, 1, 1, true)
}

/// `[C, H, W] → [H·W, C]`.
fn flatten_hw<T: Float>(cx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let t = cx.g.permute(x, &[1, 2, 0])?;
    Ok(cx.g.reshape(&t, &[h * w, c])?)
}

pub fn decode_masks<T: Float>(
    cx: &Ctx<T>,
    cfg: &ModelConfig,
    enc: &EncoderOutput<T>,
    sparse: &Var<T>,
    dense: &Var<T>,
    image_pe: &Tensor<T>,
) -> Result<DecoderOutput<T>> {
    let g = cx.g;
    let (e, grid, s) = (cfg.embed_dim_out, cfg.embed_grid(), cfg.img_size);
    if dense.shape() != enc.embedding.shape() {
        return contract(format!(
            "dense embedding {:?} does not match image embedding {:?}",
            dense.shape(),
            enc.embedding.shape()
        ));
    }
    if sparse.shape().len() != 2 || sparse.shape()[1] != e {
        return contract(format!("sparse tokens must be [N, {e}], got {:?}", sparse.shape()));
    }
    let iou_tok = cx.p("decoder.iou_token.weight")?;
    let mask_tok = cx.p("decoder.mask_token.weight")?;
    let tokens = g.concat(&[&iou_tok, &mask_tok, sparse], 0)?;
    let src = flatten_hw(cx, &g.add(&enc.embedding, dense)?)?;
    let pe = g.constant(image_pe.clone());
    let (hs, src) = two_way_transformer(cx, cfg, &src, &pe, &tokens)?;

    let src = g.reshape(&src, &[grid, grid, e])?;
    let src = g.permute(&src, &[2, 0, 1])?;
    let [s1, s2, s3, s4] = &enc.stages;
    let h = g.add(&src, &fuse_skips(cx, s2, s3, s4)?)?;

    let u = conv_t2(cx, "decoder.upscale.convt1", &h)?;
    let u = g.gelu(&ln2d(cx, "decoder.upscale.ln1", &u)?);
    let u = conv_t2(cx, "decoder.upscale.convt2", &u)?;
    let u = g.gelu(&ln2d(cx, "decoder.upscale.ln2", &u)?);
    let u = g.concat(&[&u, s1], 0)?;
    let u = conv(cx, "decoder.upscale.skip_conv", &u, 1, 1, true)?;
    let (md, uh, uw) = (u.shape()[0], u.shape()[1], u.shape()[2]);

    let mask_token = g.slice(&hs, 0, 1, 1)?;
    let hyper = mlp3(cx, "decoder.hyper", &mask_token)?;
    let flat = g.reshape(&u, &[md, uh * uw])?;
    let low = g.reshape(&g.matmul(&hyper, &flat)?, &[1, uh, uw])?;
    let mask_logits = g.resize_bilinear(&low, s, s)?;

    let iou_token = g.slice(&hs, 0, 0, 1)?;
    let iou_pred = g.sigmoid(&mlp3(cx, "decoder.iou_head", &iou_token)?);
    Ok(DecoderOutput { mask_logits, iou_pred })
}

/// Sigmoid, crop the padding, resize to the original plane and threshold.
pub fn postprocess_mask<T: Float>(logits: &Tensor<T>, prepared: &PreparedInput, threshold: f64) -> Result<Vec<u8>> {
    let s = prepared.size();
    if logits.len() != s * s {
        return contract(format!("logits have {} values, expected {s}×{s}", logits.len()));
    }
    let (rh, rw) = prepared.resized_size;
    let (oh, ow) = prepared.original_size;
    let d = logits.data();
    let mut prob = Vec::with_capacity(rh * rw);
    for r in 0..rh {
        prob.extend(d[r * s..r * s + rw].iter().map(|&v| sigmoid_scalar(v.to_f64())));
    }
    let prob = Tensor::new(vec![1, rh, rw], prob)?;
    let full = resize_bilinear(&prob, oh, ow)?;
    Ok(full.data().iter().map(|&p| u8::from(p > threshold)).collect())
}
