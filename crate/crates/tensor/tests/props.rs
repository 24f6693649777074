use boxseg_tensor::{permute, roll2d, softmax_last, window_partition, window_reverse, Tensor};
use proptest::prelude::*;

fn field(h: usize, w: usize, c: usize, seed: u32) -> Tensor {
    Tensor::from_fn(vec![h, w, c], |i| ((i as u32).wrapping_mul(2654435761) ^ seed) as f32 / u32::MAX as f32)
}

proptest! {
    #[test]
    fn window_roundtrip(nh in 1usize..5, nw in 1usize..5, win in 1usize..6, c in 1usize..4, seed: u32) {
        let x = field(nh * win, nw * win, c, seed);
        let w = window_partition(&x, win).unwrap();
        let back = window_reverse(&w, win, nh * win, nw * win).unwrap();
        prop_assert_eq!(&back, &x);
        let again = window_partition(&back, win).unwrap();
        prop_assert_eq!(again, w);
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, n in 1usize..40, scale in 0.1f32..50.0, seed: u32) {
        let x = Tensor::from_fn(vec![rows, n], |i| {
            let u = ((i as u32).wrapping_mul(2246822519) ^ seed) as f32 / u32::MAX as f32;
            (u - 0.5) * scale
        });
        let y = softmax_last(&x);
        for row in y.data().chunks(n) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            let s: f32 = row.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-6, "sum {}", s);
        }
    }

    #[test]
    fn roll_inverts(h in 1usize..9, w in 1usize..9, dy in -10isize..10, dx in -10isize..10, seed: u32) {
        let x = field(h, w, 2, seed);
        let r = roll2d(&roll2d(&x, dy, dx).unwrap(), -dy, -dx).unwrap();
        prop_assert_eq!(r, x);
    }

    #[test]
    fn permute_inverts(a in 1usize..5, b in 1usize..5, c in 1usize..5, seed: u32) {
        let x = field(a, b, c, seed);
        let y = permute(&x, &[2, 0, 1]).unwrap();
        prop_assert_eq!(y.shape(), &[c, a, b]);
        prop_assert_eq!(permute(&y, &[1, 2, 0]).unwrap(), x);
    }
}

#[test]
fn window_roundtrip_exhaustive() {
    for h in [4, 8, 16, 32] {
        for w in [4, 8, 16, 32] {
            for win in [2, 4, 8] {
                if h % win != 0 || w % win != 0 {
                    continue;
                }
                let x = field(h, w, 3, (h * 31 + w * 7 + win) as u32);
                let back = window_reverse(&window_partition(&x, win).unwrap(), win, h, w).unwrap();
                assert_eq!(back, x, "H={h} W={w} win={win}");
            }
        }
    }
}
