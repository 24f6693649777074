#![allow(dead_code)]

use boxseg_tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Reduces `out` to a scalar with fixed pseudo-random weights so every
/// output element influences the loss differently.
pub fn weighted_sum(g: &Graph<f64>, out: &Var<f64>) -> Var<f64> {
    let w = g.constant(rand_tensor(out.shape(), 0xfeed));
    let p = g.mul(out, &w).unwrap();
    g.sum_all(&p)
}

/// Central finite-difference check (h = 1e-3) of every input element.
pub fn check_grads(inputs: &[Tensor<f64>], f: impl Fn(&Graph<f64>, &[Var<f64>]) -> Var<f64>) {
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&g, &vars);
    let grads = g.backward(&loss).unwrap();
    let eval = |ts: &[Tensor<f64>]| {
        let g = Graph::no_grad();
        let vs: Vec<_> = ts.iter().map(|t| g.constant(t.clone())).collect();
        f(&g, &vs).value().item().unwrap()
    };
    let h = 1e-3;
    for (k, v) in vars.iter().enumerate() {
        let zero = Tensor::zeros(v.shape().to_vec());
        let analytic = grads.get(v).unwrap_or(&zero);
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-3, "input {k} element {i}: analytic {a} vs numeric {fd} (rel {rel})");
        }
    }
}
