//! Case-level inference and dataset evaluation.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{CaseRecord, ImageLayout};
use crate::error::{contract, CoreError, Result};
use crate::metrics::{dsc, nsd};
use crate::model::{postprocess_mask, Model, Prompt};
use crate::preprocess::prepare_case;
use crate::prompts::{make_prompts, PromptKinds, PromptMode};

/// Anything that turns a case into one binary mask per box, each over the
/// case's full spatial shape (`D·H·W` for volumes).
pub trait Segmenter {
    fn segment(&self, case: &CaseRecord) -> Result<Vec<Vec<u8>>>;
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Prompt randomness for one (case, box, slice), independent of the order
/// in which boxes and cases are visited.
pub fn prompt_rng(seed: u64, case_id: &str, box_idx: usize, slice: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(case_id));
    rng.set_stream(((box_idx as u64) << 32) | slice as u64);
    rng
}

/// Slices a box applies to.
fn box_slices(case: &CaseRecord, i: usize) -> std::ops::RangeInclusive<usize> {
    match (case.layout, case.boxes[i].z_range) {
        (ImageLayout::Volume, Some((z0, z1))) => z0..=z1.min(case.depth() - 1),
        (ImageLayout::Volume, None) => 0..=case.depth() - 1,
        _ => 0..=0,
    }
}

/// Network inference with infer-mode prompts of the chosen kinds.
pub struct ModelSegmenter<'a> {
    pub model: &'a Model,
    pub kinds: PromptKinds,
    pub seed: u64,
    pub threshold: f64,
}

impl<'a> ModelSegmenter<'a> {
    pub fn new(model: &'a Model, kinds: PromptKinds, seed: u64) -> Self {
        Self { model, kinds, seed, threshold: 0.5 }
    }
}

impl Segmenter for ModelSegmenter<'_> {
    fn segment(&self, case: &CaseRecord) -> Result<Vec<Vec<u8>>> {
        let (h, w, d) = (case.height(), case.width(), case.depth());
        let plane = h * w;
        let size = self.model.cfg.img_size;
        let volume = case.layout == ImageLayout::Volume;
        let mut masks = vec![vec![0u8; plane * d]; case.boxes.len()];
        for s in 0..d {
            let active: Vec<usize> = (0..case.boxes.len()).filter(|&i| box_slices(case, i).contains(&s)).collect();
            if active.is_empty() {
                continue;
            }
            let prepared = prepare_case(case, volume.then_some(s), size)?;
            let intensity = prepared.intensity();
            let prompts: Vec<Prompt> = active
                .iter()
                .map(|&i| {
                    let mut rng = prompt_rng(self.seed, &case.id, i, s);
                    let set = make_prompts(&prepared.boxes[i], &intensity, size, PromptMode::Infer, &mut rng);
                    Prompt::from_set(&set, self.kinds)
                })
                .collect();
            let outs = self.model.predict(&prepared.image, &prompts)?;
            for (&i, (logits, _)) in active.iter().zip(outs) {
                let m = postprocess_mask(&logits, &prepared, self.threshold)?;
                masks[i][s * plane..(s + 1) * plane].copy_from_slice(&m);
            }
        }
        Ok(masks)
    }
}

/// Per-box masks merged into one label map; box `i` writes `i + 1` and
/// later boxes win on overlap.
pub fn label_map(masks: &[Vec<u8>]) -> Vec<u8> {
    let n = masks.first().map_or(0, Vec::len);
    let mut out = vec![0u8; n];
    for (i, m) in masks.iter().enumerate() {
        let label = u8::try_from(i + 1).unwrap_or(u8::MAX);
        for (o, &v) in out.iter_mut().zip(m) {
            if v != 0 {
                *o = label;
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub case_id: String,
    pub dsc: f64,
    pub nsd: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean_dsc: f64,
    pub mean_nsd: f64,
    pub mean_seconds: f64,
    pub nsd_tol: f64,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>, nsd_tol: f64) -> Self {
        let n = rows.len().max(1) as f64;
        let mean = |f: fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Self { mean_dsc: mean(|r| r.dsc), mean_nsd: mean(|r| r.nsd), mean_seconds: mean(|r| r.seconds), nsd_tol, rows }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("case_id,dsc,nsd,seconds\n");
        for r in &self.rows {
            s.push_str(&format!("{},{:.6},{:.6},{:.6}\n", r.case_id, r.dsc, r.nsd, r.seconds));
        }
        s
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "cases": self.rows.len(),
            "mean_dsc": self.mean_dsc,
            "mean_nsd": self.mean_nsd,
            "mean_seconds": self.mean_seconds,
            "nsd_tol": self.nsd_tol,
        })
    }
}

/// DSC over the whole (possibly volumetric) mask; NSD averaged over the
/// slices where either mask is non-empty.
fn score_box(pred: &[u8], gt: &[u8], h: usize, w: usize, tol: f64) -> (f64, f64) {
    let d = dsc(pred, gt);
    let plane = h * w;
    let mut vals = Vec::new();
    for (p, g) in pred.chunks(plane).zip(gt.chunks(plane)) {
        if p.iter().any(|&v| v != 0) || g.iter().any(|&v| v != 0) {
            vals.push(nsd(p, g, w, h, tol));
        }
    }
    let n = if vals.is_empty() { 1.0 } else { vals.iter().sum::<f64>() / vals.len() as f64 };
    (d, n)
}

/// Scores every case; a case's DSC and NSD are means over its boxes.
pub fn evaluate_dataset(seg: &dyn Segmenter, cases: &[CaseRecord], tol: f64) -> Result<EvalReport> {
    if cases.is_empty() {
        return contract("evaluation needs at least one case");
    }
    let mut rows = Vec::with_capacity(cases.len());
    for case in cases {
        if case.gts.is_none() {
            return Err(CoreError::Data(format!("case '{}' has no ground truth", case.id)));
        }
        let t0 = Instant::now();
        let masks = seg.segment(case)?;
        let seconds = t0.elapsed().as_secs_f64();
        if masks.len() != case.boxes.len() {
            return contract(format!("segmenter returned {} masks for {} boxes", masks.len(), case.boxes.len()));
        }
        let (h, w) = (case.height(), case.width());
        let (mut ds, mut ns) = (0.0, 0.0);
        for (i, pred) in masks.iter().enumerate() {
            let gt = gt_volume(case, i)?;
            let (d, n) = score_box(pred, &gt, h, w, tol);
            ds += d;
            ns += n;
        }
        let nb = masks.len().max(1) as f64;
        rows.push(EvalRow { case_id: case.id.clone(), dsc: ds / nb, nsd: ns / nb, seconds });
    }
    Ok(EvalReport::from_rows(rows, tol))
}

/// Binary target of box `i` over every slice.
pub fn gt_volume(case: &CaseRecord, i: usize) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(case.height() * case.width() * case.depth());
    for s in 0..case.depth() {
        let m = case
            .gt_mask_for_box(i, s)
            .ok_or_else(|| CoreError::Data(format!("case '{}' has no ground truth for slice {s}", case.id)))?;
        out.extend(m);
    }
    Ok(out)
}
