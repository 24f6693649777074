//! Stage 1 (embedding distillation) and stage 2 (full fine-tuning).
//!
//! Every step draws its randomness from a stream derived from
//! `(seed, step)`, so a run resumed from a checkpoint continues exactly as
//! an uninterrupted one.

use boxseg_tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{AdamW, AdamWConfig, Plateau, PlateauConfig};
use super::teacher::{teacher_lookup, TeacherStore};
use crate::bbox::Bbox;
use crate::dataio::{CaseRecord, Checkpoint, ImageLayout};
use crate::error::{contract, CoreError, Result};
use crate::losses::{distill_loss, total_loss, LossBreakdown};
use crate::metrics::dsc;
use crate::model::{Ctx, Model, ModelConfig, Prompt};
use crate::preprocess::{intensity_map, prepare_case, prepare_mask, random_flip, sample_slice};
use crate::prompts::{make_prompts, PromptKinds, PromptMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Distill,
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub model: ModelConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Optimizer steps per epoch; defaults to one pass over the training
    /// cases.
    pub steps_per_epoch: Option<usize>,
    pub lr: f64,
    pub optimizer: AdamWConfig,
    pub scheduler: PlateauConfig,
    pub seed: u64,
    /// Prompt kinds fed during fine-tuning and validation.
    pub prompts: PromptKinds,
    /// Cases held out for validation, taken from the end of the list.
    pub val_cases: usize,
    pub bn_momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::finetune_full()
    }
}

impl TrainConfig {
    pub fn distill_full() -> Self {
        Self {
            stage: Stage::Distill,
            model: ModelConfig::full(),
            batch_size: 64,
            epochs: 10,
            steps_per_epoch: None,
            lr: 2e-4,
            optimizer: AdamWConfig::default(),
            scheduler: PlateauConfig::default(),
            seed: 0,
            prompts: PromptKinds::BoxPointsScribble,
            val_cases: 0,
            bn_momentum: 0.1,
        }
    }

    pub fn finetune_full() -> Self {
        Self { stage: Stage::Finetune, batch_size: 16, epochs: 25, ..Self::distill_full() }
    }

    pub fn distill_toy() -> Self {
        Self {
            model: ModelConfig::toy(),
            batch_size: 4,
            epochs: 4,
            steps_per_epoch: Some(50),
            lr: 5e-3,
            scheduler: PlateauConfig { patience: 2, ..PlateauConfig::default() },
            ..Self::distill_full()
        }
    }

    pub fn finetune_toy() -> Self {
        Self {
            stage: Stage::Finetune,
            model: ModelConfig::toy(),
            batch_size: 4,
            epochs: 20,
            steps_per_epoch: Some(100),
            lr: 1e-3,
            scheduler: PlateauConfig { patience: 2, ..PlateauConfig::default() },
            val_cases: 50,
            ..Self::distill_full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return contract(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.steps_per_epoch == Some(0) {
            return contract("batch_size, epochs and steps_per_epoch must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return contract("bn_momentum must lie in [0, 1]");
        }
        self.model.validate()
    }
}

/// A training example in prepared `S × S` geometry.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub case_idx: usize,
    pub slice: Option<usize>,
    pub box_idx: usize,
    pub image: Tensor,
    pub gt: Vec<u8>,
    pub bbox: Bbox,
    /// Unpadded `(h, w)` region.
    pub valid: (usize, usize),
}

const MAX_DRAWS: usize = 64;

/// A random labelled box of `case` (random slice for volumes). Returns
/// `None` if the draw hit a box without target pixels.
pub fn sample_from_case<R: Rng>(case: &CaseRecord, case_idx: usize, size: usize, rng: &mut R) -> Result<Option<TrainSample>> {
    if case.boxes.is_empty() {
        return Ok(None);
    }
    let slice = if case.layout == ImageLayout::Volume { Some(sample_slice(case, rng)?) } else { None };
    let s = slice.unwrap_or(0);
    let eligible: Vec<usize> = (0..case.boxes.len())
        .filter(|&i| case.boxes[i].z_range.is_none_or(|(z0, z1)| (z0..=z1).contains(&s)))
        .collect();
    if eligible.is_empty() {
        return Ok(None);
    }
    let box_idx = eligible[rng.random_range(0..eligible.len())];
    let plane = case
        .gt_mask_for_box(box_idx, s)
        .ok_or_else(|| CoreError::Data(format!("case '{}' has no ground truth", case.id)))?;
    if plane.iter().all(|&v| v == 0) {
        return Ok(None);
    }
    let prepared = prepare_case(case, slice, size)?;
    let gt = prepare_mask(&plane, case.height(), case.width(), size)?;
    if gt.iter().all(|&v| v == 0) {
        return Ok(None);
    }
    Ok(Some(TrainSample {
        case_idx,
        slice,
        box_idx,
        image: prepared.image,
        gt,
        bbox: prepared.boxes[box_idx],
        valid: prepared.resized_size,
    }))
}

/// Uniform case, then a labelled slice and box within it.
pub fn draw_sample<R: Rng>(cases: &[CaseRecord], size: usize, rng: &mut R) -> Result<TrainSample> {
    if cases.is_empty() {
        return contract("empty dataset");
    }
    for _ in 0..MAX_DRAWS {
        let ci = rng.random_range(0..cases.len());
        if let Some(s) = sample_from_case(&cases[ci], ci, size, rng)? {
            return Ok(s);
        }
    }
    Err(CoreError::Sampling(format!("no labelled box found in {MAX_DRAWS} draws")))
}

/// Randomness for optimizer step `step`.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 + 1);
    rng
}

fn val_rng(seed: u64, idx: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_7a1d);
    rng.set_stream(idx as u64);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    /// Stage-2 loss terms averaged over the batch; stage 1 reports the L1
    /// loss as `total`.
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_dsc: Option<f64>,
    pub lr: f64,
}

/// Progress stored in checkpoints as `train_state.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub stage: Stage,
    pub step: usize,
    pub epoch: usize,
    pub scheduler: Plateau,
    pub best_val: Option<f64>,
    pub config: TrainConfig,
}

/// Owns the model and optimizer for one stage.
pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub model: Model,
    pub opt: AdamW,
    pub state: TrainState,
    train: &'a [CaseRecord],
    val: &'a [CaseRecord],
    teacher: Option<&'a TeacherStore>,
    pub best: Option<Checkpoint>,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    epoch_loss: f64,
    epoch_steps: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(
        cfg: TrainConfig,
        model: Model,
        train: &'a [CaseRecord],
        val: &'a [CaseRecord],
        teacher: Option<&'a TeacherStore>,
    ) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return contract("empty dataset");
        }
        if model.cfg != cfg.model {
            return contract("model config differs from the training config");
        }
        if cfg.stage == Stage::Distill && teacher.is_none() {
            return contract("distillation needs teacher embeddings");
        }
        let state = TrainState {
            stage: cfg.stage,
            step: 0,
            epoch: 0,
            scheduler: Plateau::new(cfg.scheduler, cfg.lr),
            best_val: None,
            config: cfg.clone(),
        };
        Ok(Self {
            opt: AdamW::new(cfg.optimizer),
            cfg,
            model,
            state,
            train,
            val,
            teacher,
            best: None,
            steps: Vec::new(),
            epochs: Vec::new(),
            epoch_loss: 0.0,
            epoch_steps: 0,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(
        ck: Checkpoint,
        train: &'a [CaseRecord],
        val: &'a [CaseRecord],
        teacher: Option<&'a TeacherStore>,
    ) -> Result<Self> {
        let state: TrainState = match &ck.train_state {
            Some(v) => serde_json::from_value(v.clone())
                .map_err(|e| CoreError::Checkpoint { msg: format!("bad train state: {e}"), missing: Vec::new() })?,
            None => return contract("checkpoint has no training state"),
        };
        let model = Model::from_params(ck.config.clone(), ck.params)?;
        let mut t = Self::new(state.config.clone(), model, train, val, teacher)?;
        t.opt = AdamW::with_state(state.config.optimizer, ck.optimizer.unwrap_or_default());
        t.state = state;
        Ok(t)
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.cfg.steps_per_epoch.unwrap_or_else(|| self.train.len().div_ceil(self.cfg.batch_size))
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch() * self.cfg.epochs
    }

    pub fn lr(&self) -> f64 {
        self.state.scheduler.lr
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.model.cfg.clone(),
            params: self.model.params.clone(),
            optimizer: Some(self.opt.state.clone()),
            train_state: Some(serde_json::to_value(&self.state).expect("train state serializes")),
        }
    }

    fn fold_bn(&mut self, stats: Vec<(String, boxseg_tensor::BatchStats<f32>)>) -> Result<()> {
        let m = self.cfg.bn_momentum as f32;
        for (name, st) in stats {
            for (suffix, vals) in [("running_mean", &st.mean), ("running_var", &st.var)] {
                let key = format!("{name}.{suffix}");
                let p = self.model.params.get_mut(&key).ok_or_else(|| CoreError::Checkpoint {
                    msg: format!("missing buffer '{key}'"),
                    missing: vec![key.clone()],
                })?;
                for (r, &v) in p.value.data_mut().iter_mut().zip(vals) {
                    *r = (1.0 - m) * *r + m * v;
                }
            }
        }
        Ok(())
    }

    /// One optimizer step on a freshly drawn batch.
    pub fn train_step(&mut self) -> Result<StepLog> {
        let step = self.state.step;
        let mut rng = step_rng(self.cfg.seed, step);
        let size = self.cfg.model.img_size;
        let bsz = self.cfg.batch_size;
        let (grads, bn, mut log) = {
            let g = Graph::new();
            let cx = match self.cfg.stage {
                Stage::Distill => Ctx::new(&g, &self.model.params, true).with_filter(|n| n.starts_with("encoder.")),
                Stage::Finetune => Ctx::new(&g, &self.model.params, true),
            };
            let mut terms = Vec::with_capacity(bsz);
            let mut sum = LossBreakdown::default();
            for _ in 0..bsz {
                let mut s = draw_sample(self.train, size, &mut rng)?;
                match self.cfg.stage {
                    Stage::Distill => {
                        let case = &self.train[s.case_idx];
                        let target = teacher_lookup(self.teacher.expect("checked in new"), &case.id, s.slice)?;
                        let img = g.constant(s.image);
                        let enc = self.model.encode(&cx, &img)?;
                        let l = distill_loss(&g, &enc.embedding, target)?;
                        sum.total += l.value().data()[0] as f64;
                        terms.push(l);
                    }
                    Stage::Finetune => {
                        let mut boxes = [s.bbox];
                        random_flip(&mut s.image, &mut s.gt, &mut boxes, s.valid, &mut rng);
                        let intensity = intensity_map(&s.image);
                        let set = make_prompts(&boxes[0], &intensity, size, PromptMode::Train, &mut rng);
                        let prompt = Prompt::from_set(&set, self.cfg.prompts);
                        let img = g.constant(s.image);
                        let out = self.model.forward(&cx, &img, &prompt)?;
                        let (l, br) = total_loss(&g, &out.mask_logits, &s.gt, &out.iou_pred)?;
                        sum.dice += br.dice;
                        sum.bce += br.bce;
                        sum.iou_mse += br.iou_mse;
                        sum.total += br.total;
                        terms.push(l);
                    }
                }
            }
            let mut loss = terms[0].clone();
            for t in &terms[1..] {
                loss = g.add(&loss, t)?;
            }
            let loss = g.mul_scalar(&loss, 1.0 / bsz as f32);
            let lv = loss.value().data()[0];
            if !lv.is_finite() {
                return Err(CoreError::Numeric(format!("non-finite loss {lv} at step {step}")));
            }
            let grads = g.backward(&loss)?;
            let pg = cx.param_grads(&grads);
            if pg.values().any(|t| !t.all_finite()) {
                return Err(CoreError::Numeric(format!("non-finite gradient at step {step}")));
            }
            let n = bsz as f64;
            let log = LossBreakdown { dice: sum.dice / n, bce: sum.bce / n, iou_mse: sum.iou_mse / n, total: sum.total / n };
            (pg, cx.take_bn_stats(), log)
        };
        self.fold_bn(bn)?;
        let lr = self.lr();
        self.opt.step(&mut self.model.params, &grads, lr);
        self.state.step += 1;
        self.epoch_loss += log.total;
        self.epoch_steps += 1;
        if self.cfg.stage == Stage::Distill {
            log = LossBreakdown { total: log.total, ..LossBreakdown::default() };
        }
        let rec = StepLog { step, lr, loss: log };
        self.steps.push(rec.clone());
        Ok(rec)
    }

    /// Validation loss (and DSC in stage 2) over the held-out cases.
    pub fn validate(&self) -> Result<Option<(f64, Option<f64>)>> {
        if self.val.is_empty() {
            return Ok(None);
        }
        let size = self.cfg.model.img_size;
        let (mut loss, mut score, mut n) = (0.0, 0.0, 0usize);
        for (i, case) in self.val.iter().enumerate() {
            let mut rng = val_rng(self.cfg.seed, i);
            let Some(s) = sample_from_case(case, i, size, &mut rng)? else { continue };
            let g = Graph::no_grad();
            let cx = Ctx::new(&g, &self.model.params, false);
            let img = g.constant(s.image.clone());
            match self.cfg.stage {
                Stage::Distill => {
                    let target = teacher_lookup(self.teacher.expect("checked in new"), &case.id, s.slice)?;
                    let enc = self.model.encode(&cx, &img)?;
                    loss += distill_loss(&g, &enc.embedding, target)?.value().data()[0] as f64;
                }
                Stage::Finetune => {
                    let intensity = intensity_map(&s.image);
                    let set = make_prompts(&s.bbox, &intensity, size, PromptMode::Infer, &mut rng);
                    let out = self.model.forward(&cx, &img, &Prompt::from_set(&set, self.cfg.prompts))?;
                    let (_, br) = total_loss(&g, &out.mask_logits, &s.gt, &out.iou_pred)?;
                    loss += br.total;
                    let pred: Vec<u8> = out.mask_logits.value().data().iter().map(|&v| u8::from(v > 0.0)).collect();
                    score += dsc(&pred, &s.gt);
                }
            }
            n += 1;
        }
        if n == 0 {
            return Ok(None);
        }
        let n = n as f64;
        let dsc = (self.cfg.stage == Stage::Finetune).then_some(score / n);
        Ok(Some((loss / n, dsc)))
    }

    /// Closes an epoch: validation, scheduler update, best tracking.
    pub fn end_epoch(&mut self) -> Result<EpochLog> {
        let val = self.validate()?;
        let train_loss = self.epoch_loss / self.epoch_steps.max(1) as f64;
        self.epoch_loss = 0.0;
        self.epoch_steps = 0;
        let monitor = val.map_or(train_loss, |v| v.0);
        if !monitor.is_finite() {
            return Err(CoreError::Numeric(format!("non-finite validation loss at epoch {}", self.state.epoch)));
        }
        self.state.epoch += 1;
        if self.state.best_val.is_none_or(|b| monitor < b) {
            self.state.best_val = Some(monitor);
            self.best = Some(self.checkpoint());
        }
        self.state.scheduler.observe(monitor);
        let log = EpochLog {
            epoch: self.state.epoch,
            step: self.state.step,
            train_loss,
            val_loss: val.map(|v| v.0),
            val_dsc: val.and_then(|v| v.1),
            lr: self.lr(),
        };
        self.epochs.push(log.clone());
        Ok(log)
    }

    /// Runs to the configured number of steps, closing an epoch every
    /// `steps_per_epoch` steps. `until` stops early after that many total
    /// steps.
    pub fn run(&mut self, until: Option<usize>, mut on_epoch: impl FnMut(&EpochLog)) -> Result<()> {
        let end = until.map_or(self.total_steps(), |u| u.min(self.total_steps()));
        let per = self.steps_per_epoch();
        while self.state.step < end {
            self.train_step()?;
            if self.state.step % per == 0 {
                let log = self.end_epoch()?;
                on_epoch(&log);
            }
        }
        Ok(())
    }
}

/// Result of a full stage run.
pub struct TrainOutcome {
    pub last: Checkpoint,
    pub best: Checkpoint,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    pub model: Model,
}

fn finish(t: Trainer) -> TrainOutcome {
    let last = t.checkpoint();
    TrainOutcome { best: t.best.clone().unwrap_or_else(|| last.clone()), last, steps: t.steps, epochs: t.epochs, model: t.model }
}

/// Trains the encoder and neck to reproduce teacher embeddings under L1.
pub fn distill_stage(
    teacher: &TeacherStore,
    model: Model,
    train: &[CaseRecord],
    val: &[CaseRecord],
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    if cfg.stage != Stage::Distill {
        return contract("distill_stage needs stage = distill");
    }
    let mut t = Trainer::new(cfg.clone(), model, train, val, Some(teacher))?;
    t.run(None, on_epoch)?;
    Ok(finish(t))
}

/// Trains every parameter with dice + BCE + IoU MSE.
pub fn finetune_stage(
    model: Model,
    train: &[CaseRecord],
    val: &[CaseRecord],
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    if cfg.stage != Stage::Finetune {
        return contract("finetune_stage needs stage = finetune");
    }
    let mut t = Trainer::new(cfg.clone(), model, train, val, None)?;
    t.run(None, on_epoch)?;
    Ok(finish(t))
}

/// Splits off the last `n` cases for validation.
pub fn split_val(cases: &[CaseRecord], n: usize) -> (&[CaseRecord], &[CaseRecord]) {
    let n = n.min(cases.len().saturating_sub(1));
    cases.split_at(cases.len() - n)
}
