mod common;

use std::collections::{BTreeMap, BTreeSet};

use boxseg_core::dataio::checkpoint::{checkpoint_from_npz, checkpoint_to_npz};
use boxseg_core::dataio::{CaseBox, CaseRecord, ImageLayout, Npz};
use boxseg_core::harness::teacher::{read_teacher_dir, teacher_key, write_teacher_dir};
use boxseg_core::harness::*;
use boxseg_core::model::{Model, ParamStore};
use boxseg_core::{Bbox, CoreError, Result};
use boxseg_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn store_with(name: &str, values: &[f32]) -> ParamStore {
    let mut p = ParamStore::new();
    p.insert(name, Tensor::new(vec![values.len()], values.to_vec()).unwrap(), true);
    p
}

fn grads(name: &str, values: &[f32]) -> BTreeMap<String, Tensor> {
    BTreeMap::from([(name.to_string(), Tensor::new(vec![values.len()], values.to_vec()).unwrap())])
}

// --------------------------------------------------------------- optimizer

#[test]
fn adamw_zero_grad_without_decay_is_a_no_op() {
    let w = [0.5f32, -1.25, 3.0];
    let mut p = store_with("w", &w);
    let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() });
    for _ in 0..3 {
        opt.step(&mut p, &grads("w", &[0.0; 3]), 1e-2);
    }
    assert_eq!(p.tensor("w").unwrap().data(), w);
}

#[test]
fn adamw_first_step_moves_by_lr() {
    // At t = 1 the bias-corrected moments are g and g², so the step is
    // lr·g/(|g| + eps) ≈ lr·sign(g).
    let w = [0.5f32, -1.25, 3.0, 0.0];
    let g = [1e-3f32, -20.0, 0.7, -5e-2];
    let mut p = store_with("w", &w);
    let lr = 1e-3;
    AdamW::new(AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() }).step(&mut p, &grads("w", &g), lr);
    for ((after, before), gi) in p.tensor("w").unwrap().data().iter().zip(w).zip(g) {
        let d = (after - before) as f64;
        assert!((d.abs() / lr - 1.0).abs() < 0.1, "{d}");
        assert_eq!(d.signum(), -(gi as f64).signum());
    }
}

#[test]
fn adamw_decay_only_shrinks_by_lr_wd() {
    let w = [0.5f32, -1.25, 3.0];
    let mut p = store_with("w", &w);
    let (lr, wd) = (1e-2, 0.1);
    AdamW::new(AdamWConfig { weight_decay: wd, ..AdamWConfig::default() }).step(&mut p, &grads("w", &[0.0; 3]), lr);
    for (after, before) in p.tensor("w").unwrap().data().iter().zip(w) {
        let want = before as f64 * (1.0 - lr * wd);
        assert!((*after as f64 - want).abs() < 1e-7);
    }
}

#[test]
fn adamw_skips_frozen_and_unknown() {
    let mut p = ParamStore::new();
    p.insert("frozen", Tensor::new(vec![1], vec![1.0]).unwrap(), false);
    let mut opt = AdamW::new(AdamWConfig::default());
    let mut g = grads("frozen", &[1.0]);
    g.insert("ghost".into(), Tensor::new(vec![1], vec![1.0]).unwrap());
    opt.step(&mut p, &g, 0.1);
    assert_eq!(p.tensor("frozen").unwrap().data(), [1.0]);
    assert!(opt.state.m.is_empty());
}

fn plateau(patience: usize) -> Plateau {
    Plateau::new(PlateauConfig { factor: 0.5, patience, min_delta: 1e-4, lr_min: 1e-6 }, 1e-3)
}

#[test]
fn plateau_keeps_rate_while_improving() {
    let mut s = plateau(2);
    for i in 0..20 {
        assert_eq!(s.observe(1.0 - i as f64 * 0.01), 1e-3);
    }
}

#[test]
fn plateau_halves_after_patience() {
    // Epoch 0 sets the best; epochs 1, 2, 3 fail to improve and the third
    // failure exceeds patience 2.
    let mut s = plateau(2);
    let lrs: Vec<f64> = (0..7).map(|_| s.observe(0.5)).collect();
    assert_eq!(lrs, [1e-3, 1e-3, 1e-3, 5e-4, 5e-4, 5e-4, 2.5e-4]);
}

#[test]
fn plateau_ignores_gains_below_min_delta() {
    let mut s = plateau(0);
    assert_eq!(s.observe(1.0), 1e-3);
    assert_eq!(s.observe(1.0 - 5e-5), 5e-4);
}

#[test]
fn plateau_clamps_at_lr_min() {
    let mut s = plateau(0);
    let mut lr = 0.0;
    for _ in 0..40 {
        lr = s.observe(1.0);
    }
    assert_eq!(lr, 1e-6);
}

// --------------------------------------------------------------- synthetic

#[test]
fn synthetic_cases_are_deterministic() {
    let a = gen_synthetic_case(&mut ChaCha8Rng::seed_from_u64(5));
    let b = gen_synthetic_case(&mut ChaCha8Rng::seed_from_u64(5));
    assert_eq!(a, b);
    assert_eq!(synthetic_dataset(3, 9), synthetic_dataset(3, 9));
    assert_ne!(synthetic_dataset(1, 9), synthetic_dataset(1, 10));
}

#[test]
fn synthetic_area_and_tight_box() {
    let mut r = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..60 {
        let c = gen_synthetic_case(&mut r);
        assert_eq!(c.image.len(), 256 * 256);
        let area = c.gt.iter().filter(|&&v| v != 0).count();
        assert!((655..=26214).contains(&area), "{area}");
        assert_eq!(Some(c.bbox), Bbox::tight(&c.gt, 256, 256));
        assert!(c.image.iter().all(|v| (0.0..=1.0).contains(v)));
        let rec = c.to_case_record("x");
        assert_eq!(rec.gt_mask_for_box(0, 0).unwrap(), c.gt);
    }
}

// ----------------------------------------------------------------- sampling

/// `d` slices of `h × w` noise with a square target on slices 1..=d-2.
fn volume_case(id: &str, d: usize, h: usize, w: usize) -> CaseRecord {
    let mut gts = vec![0u32; d * h * w];
    for s in 1..d - 1 {
        for r in h / 4..h / 2 {
            for c in w / 4..w / 2 {
                gts[(s * h + r) * w + c] = 1;
            }
        }
    }
    let bbox = Bbox::new((w / 4) as f64, (h / 4) as f64, (w / 2) as f64, (h / 2) as f64);
    CaseRecord {
        id: id.into(),
        layout: ImageLayout::Volume,
        shape: vec![d, h, w],
        image: (0..d * h * w).map(|i| (i % 13) as f32 + 1.0).collect(),
        gts: Some(gts),
        boxes: vec![CaseBox { bbox, z_range: Some((1, d - 2)) }],
        spacing: None,
        clipped_boxes: 0,
        extra_keys: Vec::new(),
    }
}

fn small_2d_case(id: &str, seed: u64) -> CaseRecord {
    gen_synthetic_case_sized(&mut ChaCha8Rng::seed_from_u64(seed), 32).to_case_record(id)
}

#[test]
fn sampling_covers_a_mixed_pool() {
    let mut pool: Vec<CaseRecord> = (0..6).map(|i| small_2d_case(&format!("p{i}"), i)).collect();
    pool.extend((0..3).map(|i| volume_case(&format!("v{i}"), 7, 24, 20)));
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut ids = BTreeSet::new();
    let mut slices = BTreeSet::new();
    for _ in 0..10_000 {
        let s = draw_sample(&pool, 32, &mut rng).unwrap();
        ids.insert(pool[s.case_idx].id.clone());
        if let Some(z) = s.slice {
            assert!((1..=5).contains(&z), "unlabelled slice {z}");
            slices.insert(z);
        }
        assert!(s.gt.iter().any(|&v| v != 0));
    }
    assert_eq!(ids.len(), pool.len());
    assert_eq!(slices, (1..=5).collect());
}

#[test]
fn sampling_empty_pool_fails() {
    assert!(draw_sample(&[], 32, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

// ------------------------------------------------------------------ trainer

fn tiny_finetune() -> TrainConfig {
    TrainConfig { batch_size: 2, epochs: 2, steps_per_epoch: Some(3), val_cases: 3, ..TrainConfig::finetune_toy() }
}

#[test]
fn trainer_rejects_bad_inputs() {
    let cfg = tiny_finetune();
    let model: Model = Model::init(cfg.model.clone(), 0).unwrap();
    assert!(matches!(Trainer::new(cfg.clone(), model.clone(), &[], &[], None), Err(CoreError::Contract(_))));
    let cases = synthetic_dataset(2, 1);
    let bad = TrainConfig { lr: 0.0, ..cfg.clone() };
    assert!(Trainer::new(bad, model.clone(), &cases, &[], None).is_err());
    let distill = TrainConfig { stage: Stage::Distill, ..cfg };
    assert!(Trainer::new(distill, model, &cases, &[], None).is_err());
}

#[test]
fn first_step_loss_is_near_chance() {
    let cfg = tiny_finetune();
    let cases = synthetic_dataset(8, 2);
    let mut t = Trainer::new(cfg.clone(), Model::init(cfg.model.clone(), 3).unwrap(), &cases, &[], None).unwrap();
    let log = t.train_step().unwrap();
    // Logits start near zero: BCE ≈ ln 2 and soft dice sits in its middle range.
    assert!((log.loss.bce - std::f64::consts::LN_2).abs() < 0.1, "{:?}", log.loss);
    assert!((0.3..1.0).contains(&log.loss.dice), "{:?}", log.loss);
    assert!(log.loss.iou_mse >= 0.0 && log.loss.total.is_finite());
    assert_eq!(log.step, 0);
    assert_eq!(log.lr, cfg.lr);
}

#[test]
fn batch_norm_running_stats_use_momentum() {
    // With one sample per step, momentum 1 stores the batch statistics
    // themselves; momentum 0.1 must then give 0.9·init + 0.1·batch.
    let cases = synthetic_dataset(4, 4);
    let run = |m: f64| {
        let cfg = TrainConfig { batch_size: 1, bn_momentum: m, ..tiny_finetune() };
        let mut t = Trainer::new(cfg.clone(), Model::init(cfg.model.clone(), 5).unwrap(), &cases, &[], None).unwrap();
        t.train_step().unwrap();
        t.model
    };
    let (full, slow) = (run(1.0), run(0.1));
    let mut checked = 0;
    for (name, p) in slow.params.iter().filter(|(n, _)| n.contains(".bn.running_")) {
        let init = if name.ends_with("running_var") { 1.0 } else { 0.0 };
        let batch = full.params.tensor(name).unwrap().data();
        for (s, b) in p.value.data().iter().zip(batch) {
            assert!((s - (0.9 * init + 0.1 * b)).abs() < 1e-6, "{name}");
        }
        checked += 1;
    }
    assert!(checked >= 10);
}

fn roundtrip(ck: &boxseg_core::dataio::Checkpoint) -> boxseg_core::dataio::Checkpoint {
    let bytes = checkpoint_to_npz(ck).unwrap().to_bytes();
    checkpoint_from_npz(&Npz::from_bytes(&bytes).unwrap(), None).unwrap()
}

#[test]
fn resume_reproduces_the_next_step() {
    let cfg = tiny_finetune();
    let cases = synthetic_dataset(10, 6);
    let (train, val) = split_val(&cases, cfg.val_cases);
    let model: Model = Model::init(cfg.model.clone(), 7).unwrap();
    let mut a = Trainer::new(cfg.clone(), model, train, val, None).unwrap();
    a.run(Some(4), |_| {}).unwrap();
    let saved = roundtrip(&a.checkpoint());
    let next = a.train_step().unwrap();

    let mut b = Trainer::resume(saved, train, val, None).unwrap();
    assert_eq!(b.state.step, 4);
    assert_eq!(b.lr(), a.steps[3].lr);
    let again = b.train_step().unwrap();
    assert_eq!(again, next);
    assert_eq!(b.model.params, a.model.params);
}

#[test]
fn epochs_validate_and_track_best() {
    let cfg = tiny_finetune();
    let cases = synthetic_dataset(10, 8);
    let (train, val) = split_val(&cases, cfg.val_cases);
    assert_eq!(val.len(), 3);
    let mut seen = Vec::new();
    let out = finetune_stage(Model::init(cfg.model.clone(), 9).unwrap(), train, val, &cfg, |e| seen.push(e.clone())).unwrap();
    assert_eq!(seen.len(), 2);
    assert_eq!(out.steps.len(), 6);
    for e in &seen {
        assert!(e.val_loss.unwrap().is_finite());
        assert!((0.0..=1.0).contains(&e.val_dsc.unwrap()));
    }
    let best = seen.iter().map(|e| e.val_loss.unwrap()).fold(f64::INFINITY, f64::min);
    let ts: TrainState = serde_json::from_value(out.best.train_state.clone().unwrap()).unwrap();
    assert_eq!(ts.best_val, Some(best));
    assert!(finetune_stage(out.model, train, val, &TrainConfig { stage: Stage::Distill, ..cfg }, |_| {}).is_err());
}

// ------------------------------------------------------------- distillation

#[test]
fn distillation_touches_the_encoder_only() {
    let cfg = TrainConfig { epochs: 1, steps_per_epoch: Some(3), batch_size: 2, ..TrainConfig::distill_toy() };
    let cases = synthetic_dataset(4, 10);
    let teacher = RandomTeacher::new(cfg.model.embed_dim_out, 11);
    let store = build_teacher_store(&teacher, &cases, cfg.model.img_size).unwrap();
    let model: Model = Model::init(cfg.model.clone(), 12).unwrap();
    let out = distill_stage(&store, model.clone(), &cases, &[], &cfg, |_| {}).unwrap();
    let mut moved = 0;
    for (name, p) in out.model.params.iter() {
        let before = model.params.tensor(name).unwrap();
        if name.starts_with("encoder.") {
            moved += usize::from(p.value.data() != before.data());
        } else {
            assert_eq!(p.value.data(), before.data(), "{name} changed during distillation");
        }
    }
    assert!(moved > 10);
    assert!(out.steps.iter().all(|s| s.loss.total.is_finite() && s.loss.total > 0.0));
}

#[test]
fn distillation_names_the_missing_case() {
    let cfg = TrainConfig { epochs: 1, steps_per_epoch: Some(1), batch_size: 1, ..TrainConfig::distill_toy() };
    let cases = synthetic_dataset(1, 13);
    let store = TeacherStore::new();
    let Err(err) = distill_stage(&store, Model::init(cfg.model.clone(), 0).unwrap(), &cases, &[], &cfg, |_| {}) else {
        panic!("distillation without teacher entries succeeded");
    };
    assert!(matches!(&err, CoreError::Data(m) if m.contains("synth_00000")), "{err}");
}

#[test]
fn teacher_store_covers_slices_and_roundtrips() {
    let teacher = RandomTeacher::new(8, 14);
    let cases = vec![small_2d_case("flat", 1), volume_case("vol", 4, 24, 20)];
    let store = build_teacher_store(&teacher, &cases, 32).unwrap();
    let keys: Vec<&String> = store.keys().collect();
    assert_eq!(keys, ["flat", "vol/0", "vol/1", "vol/2", "vol/3"]);
    assert_eq!(store["flat"].shape(), [8, 8, 8]);
    assert_eq!(teacher_key("vol", Some(2)), "vol/2");
    let dir = tempfile::tempdir().unwrap();
    write_teacher_dir(&store, dir.path()).unwrap();
    assert!(dir.path().join("vol__2.npz").exists());
    assert_eq!(read_teacher_dir(dir.path()).unwrap(), store);
}

#[test]
fn teacher_is_deterministic_and_nontrivial() {
    let img = Tensor::from_fn(vec![3, 32, 32], |i| ((i * 31) % 17) as f32 / 17.0);
    let a = RandomTeacher::new(8, 1).embed(&img).unwrap();
    assert_eq!(a, RandomTeacher::new(8, 1).embed(&img).unwrap());
    assert_ne!(a, RandomTeacher::new(8, 2).embed(&img).unwrap());
    let spread = a.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
    assert!(spread > 0.1 && a.data().iter().all(|v| v.is_finite()));
}

// --------------------------------------------------------------- evaluation

struct Oracle;
impl Segmenter for Oracle {
    fn segment(&self, case: &CaseRecord) -> Result<Vec<Vec<u8>>> {
        (0..case.boxes.len()).map(|i| gt_volume(case, i)).collect()
    }
}

struct Empty;
impl Segmenter for Empty {
    fn segment(&self, case: &CaseRecord) -> Result<Vec<Vec<u8>>> {
        Ok(vec![vec![0; case.height() * case.width() * case.depth()]; case.boxes.len()])
    }
}

use boxseg_core::harness::eval::gt_volume;

#[test]
fn evaluation_oracle_and_empty() {
    let mut cases = synthetic_dataset(3, 15);
    cases.push(volume_case("vol", 5, 24, 20));
    let r = evaluate_dataset(&Oracle, &cases, 2.0).unwrap();
    assert_eq!(r.rows.len(), cases.len());
    assert_eq!((r.mean_dsc, r.mean_nsd), (1.0, 1.0));
    let r = evaluate_dataset(&Empty, &cases, 2.0).unwrap();
    assert_eq!(r.mean_dsc, 0.0);
    assert!(r.rows.iter().all(|row| row.seconds >= 0.0));
    assert!(evaluate_dataset(&Oracle, &[], 2.0).is_err());
    let mut unlabeled = cases[0].clone();
    unlabeled.gts = None;
    assert!(evaluate_dataset(&Oracle, &[unlabeled], 2.0).is_err());
}

#[test]
fn model_segmenter_masks_match_case_geometry() {
    let model: Model = Model::init(boxseg_core::model::ModelConfig::toy(), 16).unwrap();
    let seg = ModelSegmenter::new(&model, boxseg_core::prompts::PromptKinds::BoxPointsScribble, 0);
    let cases = vec![small_2d_case("a", 17), volume_case("v", 4, 24, 20)];
    for c in &cases {
        let masks = seg.segment(c).unwrap();
        assert_eq!(masks.len(), c.boxes.len());
        assert_eq!(masks[0].len(), c.height() * c.width() * c.depth());
        // Slices outside the box's z-range stay empty.
        if c.layout == ImageLayout::Volume {
            let plane = c.height() * c.width();
            assert!(masks[0][..plane].iter().all(|&v| v == 0));
        }
        assert_eq!(masks, seg.segment(c).unwrap());
    }
    let merged = label_map(&[vec![1, 0, 1], vec![0, 1, 1]]);
    assert_eq!(merged, [1, 2, 2]);
}

#[test]
fn prompt_rng_is_order_independent() {
    use rand::Rng;
    let mut a = prompt_rng(1, "case", 2, 3);
    let mut b = prompt_rng(1, "case", 2, 3);
    assert_eq!(a.random::<u64>(), b.random::<u64>());
    let mut c = prompt_rng(1, "case", 3, 2);
    assert_ne!(prompt_rng(1, "case", 2, 3).random::<u64>(), c.random::<u64>());
}
