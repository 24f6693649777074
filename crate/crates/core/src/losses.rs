//! Segmentation and distillation losses built on the autodiff tape.

use boxseg_tensor::{resize_bilinear, Float, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

pub const DICE_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub dice: f64,
    pub bce: f64,
    pub iou_mse: f64,
    pub total: f64,
}

fn gt_tensor<T: Float>(shape: &[usize], gt: &[u8]) -> Result<Tensor<T>> {
    if gt.iter().any(|&v| v > 1) {
        return contract("ground truth must be binary");
    }
    Ok(Tensor::new(shape.to_vec(), gt.iter().map(|&v| T::lit(v as f64)).collect())?)
}

/// Soft dice loss and mean BCE of `logits` against a binary mask of the
/// same element count.
pub fn mask_loss<T: Float>(g: &Graph<T>, logits: &Var<T>, gt: &[u8]) -> Result<(Var<T>, Var<T>)> {
    if logits.value().len() != gt.len() {
        return Err(boxseg_tensor::TensorError::Dimension {
            op: "mask_loss",
            msg: format!("logits {:?} vs {} target pixels", logits.shape(), gt.len()),
        }
        .into());
    }
    let target = g.constant(gt_tensor(logits.shape(), gt)?);
    let eps = T::lit(DICE_EPS);
    let p = g.sigmoid(logits);
    let inter = g.sum_all(&g.mul(&p, &target)?);
    let num = g.add_scalar(&g.mul_scalar(&inter, T::lit(2.0)), eps);
    let g_sum = T::lit(gt.iter().map(|&v| v as f64).sum::<f64>());
    let den = g.add_scalar(&g.sum_all(&p), g_sum + eps);
    let ratio = g.div(&num, &den)?;
    let dice = g.add_scalar(&g.mul_scalar(&ratio, -T::one()), T::one());
    let bce = g.bce_with_logits(logits, &target)?;
    Ok((dice, bce))
}

/// Intersection over union; two empty masks count as a perfect match.
pub fn mask_iou(pred: &[u8], gt: &[u8]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &t) in pred.iter().zip(gt) {
        let (p, t) = (p != 0, t != 0);
        inter += usize::from(p && t);
        union += usize::from(p || t);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// `(iou_pred − IoU(pred_mask, gt))²`; the actual IoU is a constant.
pub fn iou_loss<T: Float>(g: &Graph<T>, iou_pred: &Var<T>, pred_mask: &[u8], gt: &[u8]) -> Result<Var<T>> {
    let actual = mask_iou(pred_mask, gt);
    let d = g.add_scalar(&g.sum_all(iou_pred), T::lit(-actual));
    Ok(g.mul(&d, &d)?)
}

/// Dice + BCE + IoU MSE with unit weights. The mask used for the actual
/// IoU is `logits > 0`.
pub fn total_loss<T: Float>(
    g: &Graph<T>,
    logits: &Var<T>,
    gt: &[u8],
    iou_pred: &Var<T>,
) -> Result<(Var<T>, LossBreakdown)> {
    let (dice, bce) = mask_loss(g, logits, gt)?;
    let pred: Vec<u8> = logits.value().data().iter().map(|&v| u8::from(v > T::zero())).collect();
    let iou = iou_loss(g, iou_pred, &pred, gt)?;
    let total = g.add(&g.add(&dice, &bce)?, &iou)?;
    let f = |v: &Var<T>| v.value().data()[0].to_f64();
    let br = LossBreakdown { dice: f(&dice), bce: f(&bce), iou_mse: f(&iou), total: f(&total) };
    Ok((total, br))
}

/// Mean absolute difference between a `[C, h, w]` student embedding and a
/// `[C, H, W]` teacher, resizing the teacher bilinearly when needed.
pub fn distill_loss<T: Float>(g: &Graph<T>, student: &Var<T>, teacher: &Tensor<T>) -> Result<Var<T>> {
    let (ss, ts) = (student.shape(), teacher.shape());
    if ss.len() != 3 || ts.len() != 3 {
        return contract(format!("embeddings must be [C, H, W], got {ss:?} and {ts:?}"));
    }
    if ss[0] != ts[0] {
        return contract(format!("channel mismatch: student {} vs teacher {}", ss[0], ts[0]));
    }
    let t = if ss == ts { teacher.clone() } else { resize_bilinear(teacher, ss[1], ss[2])? };
    let diff = g.sub(student, &g.constant(t))?;
    Ok(g.mean_all(&g.abs(&diff)))
}
