mod common;

use boxseg_core::harness::{EvalReport, EvalRow};
use boxseg_core::losses::*;
use boxseg_core::metrics::*;
use boxseg_core::CoreError;
use boxseg_tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn half_gt(n: usize) -> Vec<u8> {
    (0..n).map(|i| u8::from(i % 2 == 0)).collect()
}

fn logits_for(gt: &[u8], on: f64, off: f64) -> Tensor<f64> {
    Tensor::new(vec![1, 16, 16], gt.iter().map(|&v| if v != 0 { on } else { off }).collect()).unwrap()
}

fn scalar(v: &boxseg_tensor::Var<f64>) -> f64 {
    v.value().data()[0]
}

#[test]
fn perfect_prediction_has_near_zero_mask_loss() {
    let gt = half_gt(256);
    let g = Graph::<f64>::new();
    let (d, b) = mask_loss(&g, &g.constant(logits_for(&gt, 40.0, -40.0)), &gt).unwrap();
    assert!(scalar(&d) < 1e-4 && scalar(&b) < 1e-4);
}

#[test]
fn disjoint_prediction_has_dice_near_one() {
    let gt = half_gt(256);
    let g = Graph::<f64>::new();
    let (d, _) = mask_loss(&g, &g.constant(logits_for(&gt, -40.0, 40.0)), &gt).unwrap();
    assert!(scalar(&d) > 1.0 - 1e-6);
}

#[test]
fn bce_at_half_probability_is_ln2() {
    let gt = half_gt(256);
    let g = Graph::<f64>::new();
    let (_, b) = mask_loss(&g, &g.constant(Tensor::zeros(vec![1, 16, 16])), &gt).unwrap();
    assert!((scalar(&b) - std::f64::consts::LN_2).abs() < 1e-6);
}

#[test]
fn mask_loss_shape_mismatch_is_a_dimension_error() {
    let g = Graph::<f64>::new();
    let err = mask_loss(&g, &g.constant(Tensor::zeros(vec![1, 4, 4])), &[0u8; 15]).unwrap_err();
    assert!(matches!(err, CoreError::Tensor(boxseg_tensor::TensorError::Dimension { .. })), "{err}");
}

#[test]
fn iou_loss_examples() {
    let g = Graph::<f64>::new();
    let pred = [1u8, 1, 0, 0];
    let gt = [1u8, 0, 0, 0];
    let exact = iou_loss(&g, &g.constant(Tensor::new(vec![1, 1], vec![0.5]).unwrap()), &pred, &gt).unwrap();
    assert!(scalar(&exact).abs() < 1e-15);
    let half = iou_loss(&g, &g.constant(Tensor::new(vec![1, 1], vec![0.5]).unwrap()), &gt, &gt).unwrap();
    assert!((scalar(&half) - 0.25).abs() < 1e-15);
    let empty = iou_loss(&g, &g.constant(Tensor::new(vec![1, 1], vec![0.3]).unwrap()), &[0; 4], &[0; 4]).unwrap();
    assert!((scalar(&empty) - 0.49).abs() < 1e-12);
}

#[test]
fn total_is_the_unit_weighted_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let gt = common::random_mask(&mut rng, 16, 16);
    let g = Graph::<f64>::new();
    let logits = g.constant(Tensor::new(vec![1, 16, 16], (0..256).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap());
    let iou = g.constant(Tensor::new(vec![1, 1], vec![0.7]).unwrap());
    let (t, br) = total_loss(&g, &logits, &gt, &iou).unwrap();
    assert!((br.total - (br.dice + br.bce + br.iou_mse)).abs() < 1e-6);
    assert_eq!(scalar(&t), br.total);
    assert!(br.dice >= 0.0 && br.bce >= 0.0 && br.iou_mse >= 0.0);
    let br2 = LossBreakdown { dice: 0.2, bce: 0.3, iou_mse: 0.1, total: 0.2 + 0.3 + 0.1 };
    assert!((br2.total - 0.6).abs() < 1e-12);
}

#[test]
fn perfect_prediction_total_is_tiny_and_grads_are_finite() {
    let gt = half_gt(256);
    let g = Graph::<f64>::new();
    let logits = g.leaf(logits_for(&gt, 40.0, -40.0), true);
    let iou = g.leaf(Tensor::new(vec![1, 1], vec![1.0]).unwrap(), true);
    let (t, br) = total_loss(&g, &logits, &gt, &iou).unwrap();
    assert!(br.total < 1e-3);
    let grads = g.backward(&t).unwrap();
    assert!(grads.get(&logits).unwrap().data().iter().all(|v| v.is_finite()));
    assert!(grads.get(&iou).unwrap().data().iter().all(|v| v.is_finite()));
}

#[test]
fn mask_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..5 {
        let gt = common::random_mask(&mut rng, 16, 16);
        let x: Vec<f64> = (0..256).map(|_| rng.random_range(-2.0..2.0)).collect();
        let f = |x: &[f64]| {
            let g = Graph::<f64>::no_grad();
            let (d, b) = mask_loss(&g, &g.constant(Tensor::new(vec![1, 16, 16], x.to_vec()).unwrap()), &gt).unwrap();
            scalar(&d) + scalar(&b)
        };
        let g = Graph::<f64>::new();
        let v = g.leaf(Tensor::new(vec![1, 16, 16], x.clone()).unwrap(), true);
        let (d, b) = mask_loss(&g, &v, &gt).unwrap();
        let grads = g.backward(&g.add(&d, &b).unwrap()).unwrap();
        let an = grads.get(&v).unwrap().data().to_vec();
        for _ in 0..20 {
            let i = rng.random_range(0..256);
            let h = 1e-5;
            let (mut p, mut m) = (x.clone(), x.clone());
            p[i] += h;
            m[i] -= h;
            let num = (f(&p) - f(&m)) / (2.0 * h);
            assert!(common::rel_err(an[i], num) < 1e-3, "{i}: {} vs {num}", an[i]);
        }
    }
}

#[test]
fn small_gradient_step_decreases_mask_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let gt = common::random_mask(&mut rng, 16, 16);
        let x: Vec<f64> = (0..256).map(|_| rng.random_range(-3.0..3.0)).collect();
        let g = Graph::<f64>::new();
        let v = g.leaf(Tensor::new(vec![1, 16, 16], x.clone()).unwrap(), true);
        let (d, b) = mask_loss(&g, &v, &gt).unwrap();
        let before = scalar(&d) + scalar(&b);
        let grads = g.backward(&g.add(&d, &b).unwrap()).unwrap();
        let step: Vec<f64> = x.iter().zip(grads.get(&v).unwrap().data()).map(|(a, gr)| a - 1e-2 * gr).collect();
        let g2 = Graph::<f64>::no_grad();
        let (d2, b2) = mask_loss(&g2, &g2.constant(Tensor::new(vec![1, 16, 16], step).unwrap()), &gt).unwrap();
        assert!(scalar(&d2) + scalar(&b2) < before);
    }
}

#[test]
fn distill_loss_examples() {
    let g = Graph::<f64>::new();
    let t = Tensor::new(vec![4, 8, 8], (0..256).map(|i| (i as f64).sin()).collect()).unwrap();
    assert_eq!(scalar(&distill_loss(&g, &g.constant(t.clone()), &t).unwrap()), 0.0);
    let shifted = g.constant(t.map(|v| v + 0.5));
    assert!((scalar(&distill_loss(&g, &shifted, &t).unwrap()) - 0.5).abs() < 1e-12);

    // A larger teacher is resized to the student grid before the L1.
    let big = Tensor::new(vec![4, 32, 32], (0..4096).map(|i| (i as f64 * 0.01).cos()).collect()).unwrap();
    let small = boxseg_tensor::resize_bilinear(&big, 8, 8).unwrap();
    assert!(scalar(&distill_loss(&g, &g.constant(small), &big).unwrap()).abs() < 1e-12);

    let wrong = Tensor::<f64>::zeros(vec![3, 8, 8]);
    assert!(matches!(distill_loss(&g, &g.constant(wrong), &t), Err(CoreError::Contract(_))));
}

#[test]
fn dsc_examples() {
    let a: Vec<u8> = (0..400).map(|i| u8::from(i < 100)).collect();
    assert_eq!(dsc(&a, &a), 1.0);
    let b: Vec<u8> = (0..400).map(|i| u8::from((200..300).contains(&i))).collect();
    assert_eq!(dsc(&a, &b), 0.0);
    let c: Vec<u8> = (0..400).map(|i| u8::from((50..150).contains(&i))).collect();
    assert_eq!(dsc(&a, &c), 0.5);
    assert_eq!(dsc(&[0; 9], &[0; 9]), 1.0);
}

fn square(w: usize, x0: usize, y0: usize, side: usize) -> Vec<u8> {
    let mut m = vec![0u8; w * w];
    for r in y0..y0 + side {
        for c in x0..x0 + side {
            m[r * w + c] = 1;
        }
    }
    m
}

#[test]
fn nsd_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let m = common::random_mask(&mut rng, 32, 32);
    for tol in [0.5, 1.0, 2.0, 7.0] {
        assert_eq!(nsd(&m, &m, 32, 32, tol), 1.0);
    }
    let a = square(128, 5, 5, 1);
    let b = square(128, 105, 5, 1);
    assert_eq!(nsd(&a, &b, 128, 128, 2.0), 0.0);
    let s = square(32, 5, 5, 10);
    let t = square(32, 6, 5, 10);
    assert_eq!(nsd(&s, &t, 32, 32, 2.0), 1.0);
    assert_eq!(nsd(&[0; 16], &[0; 16], 4, 4, 2.0), 1.0);
    assert_eq!(nsd(&square(4, 0, 0, 2), &[0; 16], 4, 4, 2.0), 0.0);
}

#[test]
fn nsd_matches_brute_force_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let (a, b) = (common::random_mask(&mut rng, 32, 32), common::random_mask(&mut rng, 32, 32));
        for tol in [1.0, 2.0, 3.5] {
            assert_eq!(nsd(&a, &b, 32, 32, tol), common::brute_nsd(&a, &b, 32, 32, tol));
        }
    }
}

#[test]
fn edt_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (w, h) = (13, 9);
    let seeds: Vec<bool> = (0..w * h).map(|_| rng.random_bool(0.08)).collect();
    let d = squared_edt(&seeds, w, h);
    for r in 0..h {
        for c in 0..w {
            let best = (0..w * h)
                .filter(|&i| seeds[i])
                .map(|i| ((i % w) as f64 - c as f64).powi(2) + ((i / w) as f64 - r as f64).powi(2))
                .fold(f64::INFINITY, f64::min);
            assert_eq!(d[r * w + c], best);
        }
    }
}

#[test]
fn report_means_and_csv() {
    let rows = vec![
        EvalRow { case_id: "a".into(), dsc: 0.5, nsd: 1.0, seconds: 0.1 },
        EvalRow { case_id: "b".into(), dsc: 1.0, nsd: 0.0, seconds: 0.3 },
    ];
    let r = EvalReport::from_rows(rows, 2.0);
    assert_eq!((r.mean_dsc, r.mean_nsd), (0.75, 0.5));
    assert!((r.mean_seconds - 0.2).abs() < 1e-12);
    let csv = r.to_csv();
    assert!(csv.starts_with("case_id,dsc,nsd,seconds\n"));
    assert_eq!(csv.lines().count(), 3);
    assert_eq!(r.summary_json()["cases"], 2);
}

proptest! {
    #[test]
    fn metrics_are_symmetric_and_bounded(seed in any::<u64>(), tol in 0.5f64..4.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (common::random_mask(&mut rng, 24, 20), common::random_mask(&mut rng, 24, 20));
        let (d1, d2) = (dsc(&a, &b), dsc(&b, &a));
        let (n1, n2) = (nsd(&a, &b, 24, 20, tol), nsd(&b, &a, 24, 20, tol));
        prop_assert_eq!(d1, d2);
        prop_assert_eq!(n1, n2);
        prop_assert!((0.0..=1.0).contains(&d1) && (0.0..=1.0).contains(&n1));
    }

    #[test]
    fn breakdown_components_are_non_negative(seed in any::<u64>(), iou in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = common::random_mask(&mut rng, 8, 8);
        let g = Graph::<f64>::no_grad();
        let logits = g.constant(Tensor::new(vec![1, 8, 8], (0..64).map(|_| rng.random_range(-10.0..10.0)).collect()).unwrap());
        let (_, br) = total_loss(&g, &logits, &gt, &g.constant(Tensor::new(vec![1, 1], vec![iou]).unwrap())).unwrap();
        prop_assert!(br.dice >= 0.0 && br.bce >= 0.0 && br.iou_mse >= 0.0);
        prop_assert!((br.total - br.dice - br.bce - br.iou_mse).abs() < 1e-6);
    }
}
