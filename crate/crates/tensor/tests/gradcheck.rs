mod common;

use boxseg_tensor::{Graph, Var};
use common::{check_grads, rand_tensor, weighted_sum};

type G = Graph<f64>;

#[test]
fn matmul_chain() {
    let ins = [rand_tensor(&[3, 4], 1), rand_tensor(&[4, 5], 2), rand_tensor(&[5, 2], 3)];
    check_grads(&ins, |g, v| {
        let ab = g.matmul(&v[0], &v[1]).unwrap();
        let abc = g.matmul(&ab, &v[2]).unwrap();
        weighted_sum(g, &abc)
    });
}

#[test]
fn bmm_all_transposes() {
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = if ta { [2, 4, 3] } else { [2, 3, 4] };
        let b = if tb { [2, 5, 4] } else { [2, 4, 5] };
        check_grads(&[rand_tensor(&a, 4), rand_tensor(&b, 5)], |g, v| {
            weighted_sum(g, &g.bmm(&v[0], &v[1], ta, tb).unwrap())
        });
    }
}

#[test]
fn linear_with_and_without_bias() {
    let ins = [rand_tensor(&[5, 3], 6), rand_tensor(&[4, 3], 7), rand_tensor(&[4], 8)];
    check_grads(&ins, |g, v| weighted_sum(g, &g.linear(&v[0], &v[1], Some(&v[2])).unwrap()));
    check_grads(&ins[..2], |g, v| weighted_sum(g, &g.linear(&v[0], &v[1], None).unwrap()));
}

#[test]
fn elementwise_binary() {
    let a = rand_tensor(&[2, 3], 9);
    let b = rand_tensor(&[2, 3], 10).map(|v| v + 2.0);
    let ops: [fn(&G, &Var<f64>, &Var<f64>) -> Var<f64>; 4] = [
        |g, a, b| g.add(a, b).unwrap(),
        |g, a, b| g.sub(a, b).unwrap(),
        |g, a, b| g.mul(a, b).unwrap(),
        |g, a, b| g.div(a, b).unwrap(),
    ];
    for op in ops {
        check_grads(&[a.clone(), b.clone()], |g, v| weighted_sum(g, &op(g, &v[0], &v[1])));
    }
}

#[test]
fn elementwise_unary() {
    // Keep away from the kink of |x|.
    let x = rand_tensor(&[3, 4], 11).map(|v| if v.abs() < 0.1 { v + 0.3 } else { v } * 3.0);
    let ops: [fn(&G, &Var<f64>) -> Var<f64>; 6] = [
        |g, x| g.add_scalar(x, 0.7),
        |g, x| g.mul_scalar(x, -1.3),
        |g, x| g.sigmoid(x),
        |g, x| g.gelu(x),
        |g, x| g.abs(x),
        |g, x| g.softmax_last(x),
    ];
    for op in ops {
        check_grads(std::slice::from_ref(&x), |g, v| weighted_sum(g, &op(g, &v[0])));
    }
}

#[test]
fn reductions_and_broadcasts() {
    let x = rand_tensor(&[2, 3, 4], 12);
    let b = rand_tensor(&[3, 4], 13);
    check_grads(&[x.clone(), b.clone()], |g, v| weighted_sum(g, &g.add_broadcast(&v[0], &v[1]).unwrap()));
    check_grads(std::slice::from_ref(&b), |g, v| weighted_sum(g, &g.broadcast_to(&v[0], &[2, 2])));
    check_grads(std::slice::from_ref(&x), |g, v| {
        let s = g.sum_all(&v[0]);
        g.mul(&s, &s).unwrap()
    });
    check_grads(std::slice::from_ref(&x), |g, v| {
        let s = g.mean_all(&v[0]);
        g.mul(&s, &s).unwrap()
    });
}

#[test]
fn bce_with_logits() {
    let logits = rand_tensor(&[4, 4], 14).scale(4.0);
    let target = rand_tensor(&[4, 4], 15).map(|v| (v + 1.0) / 2.0);
    check_grads(&[logits, target], |g, v| g.bce_with_logits(&v[0], &v[1]).unwrap());
}

#[test]
fn layer_norm() {
    let ins = [rand_tensor(&[3, 5], 16), rand_tensor(&[5], 17), rand_tensor(&[5], 18)];
    check_grads(&ins, |g, v| weighted_sum(g, &g.layer_norm(&v[0], &v[1], &v[2], 1e-6).unwrap()));
}

#[test]
fn batch_norm() {
    let ins = [rand_tensor(&[6, 3], 19), rand_tensor(&[3], 20), rand_tensor(&[3], 21)];
    check_grads(&ins, |g, v| weighted_sum(g, &g.batch_norm_train(&v[0], &v[1], &v[2], 1e-5).unwrap().0));
    let (mean, var) = ([0.1, -0.2, 0.3], [0.5, 1.5, 2.0]);
    check_grads(&ins, |g, v| {
        weighted_sum(g, &g.batch_norm_eval(&v[0], &v[1], &v[2], &mean, &var, 1e-5).unwrap())
    });
}

#[test]
fn shape_ops() {
    let x = rand_tensor(&[2, 3, 4], 22);
    check_grads(std::slice::from_ref(&x), |g, v| weighted_sum(g, &g.reshape(&v[0], &[6, 4]).unwrap()));
    check_grads(std::slice::from_ref(&x), |g, v| weighted_sum(g, &g.permute(&v[0], &[2, 0, 1]).unwrap()));
    check_grads(std::slice::from_ref(&x), |g, v| weighted_sum(g, &g.slice(&v[0], 1, 1, 2).unwrap()));
    let y = rand_tensor(&[2, 5, 4], 23);
    check_grads(&[x.clone(), y], |g, v| weighted_sum(g, &g.concat(&[&v[0], &v[1], &v[0]], 1).unwrap()));
    let m = rand_tensor(&[3, 4], 24);
    check_grads(&[m], |g, v| weighted_sum(g, &g.transpose(&v[0]).unwrap()));
}

#[test]
fn conv2d_variants() {
    for (k, stride, pad, hw) in [(3, 1, 1, 5), (3, 2, 1, 6), (1, 1, 0, 4), (2, 2, 0, 4), (3, 2, 0, 7)] {
        let ins = [rand_tensor(&[2, hw, hw], 25), rand_tensor(&[3, 2, k, k], 26), rand_tensor(&[3], 27)];
        check_grads(&ins, |g, v| weighted_sum(g, &g.conv2d(&v[0], &v[1], Some(&v[2]), stride, pad).unwrap()));
        check_grads(&ins[..2], |g, v| weighted_sum(g, &g.conv2d(&v[0], &v[1], None, stride, pad).unwrap()));
    }
}

#[test]
fn depthwise_conv() {
    let ins = [rand_tensor(&[5, 4, 3], 28), rand_tensor(&[3, 3, 3], 29), rand_tensor(&[3], 30)];
    check_grads(&ins, |g, v| weighted_sum(g, &g.depthwise_conv_hwc(&v[0], &v[1], &v[2], 1).unwrap()));
}

#[test]
fn conv_transpose() {
    let ins = [rand_tensor(&[3, 2, 3], 31), rand_tensor(&[3, 2, 2, 2], 32), rand_tensor(&[2], 33)];
    check_grads(&ins, |g, v| weighted_sum(g, &g.conv_transpose2x2(&v[0], &v[1], &v[2]).unwrap()));
}

#[test]
fn resampling() {
    let x = rand_tensor(&[2, 4, 6], 34);
    for (ho, wo) in [(8, 12), (2, 3), (5, 7), (16, 4)] {
        check_grads(std::slice::from_ref(&x), |g, v| weighted_sum(g, &g.resize_bilinear(&v[0], ho, wo).unwrap()));
    }
    check_grads(std::slice::from_ref(&x), |g, v| weighted_sum(g, &g.avg_pool(&v[0], 2).unwrap()));
}

#[test]
fn window_ops() {
    let x = rand_tensor(&[4, 6, 2], 35);
    check_grads(std::slice::from_ref(&x), |g, v| weighted_sum(g, &g.window_partition(&v[0], 2).unwrap()));
    let w = rand_tensor(&[6, 2, 2, 2], 36);
    check_grads(&[w], |g, v| weighted_sum(g, &g.window_reverse(&v[0], 2, 4, 6).unwrap()));
    check_grads(std::slice::from_ref(&x), |g, v| weighted_sum(g, &g.roll2d(&v[0], -1, 2).unwrap()));
    check_grads(std::slice::from_ref(&x), |g, v| weighted_sum(g, &g.pad_hwc(&v[0], 5, 8).unwrap()));
    check_grads(std::slice::from_ref(&x), |g, v| weighted_sum(g, &g.crop_hwc(&v[0], 3, 5).unwrap()));
    check_grads(std::slice::from_ref(&x), |g, v| weighted_sum(g, &g.space_to_depth_hwc(&v[0], 2).unwrap()));
}

#[test]
fn gather_and_mask() {
    let table = rand_tensor(&[5, 3], 37);
    check_grads(&[table], |g, v| weighted_sum(g, &g.gather_rows(&v[0], &[4, 0, 4, 2, 1, 1]).unwrap()));
    let logits = rand_tensor(&[2, 3, 4, 4], 38);
    let mask = rand_tensor(&[2, 4, 4], 39);
    check_grads(&[logits], |g, v| weighted_sum(g, &g.add_window_mask(&v[0], &mask).unwrap()));
}

#[test]
fn composite_conv_layer_norm_softmax() {
    let ins = [
        rand_tensor(&[2, 5, 5], 40),
        rand_tensor(&[4, 2, 3, 3], 41),
        rand_tensor(&[4], 42),
        rand_tensor(&[4], 43),
    ];
    check_grads(&ins, |g, v| {
        let y = g.conv2d(&v[0], &v[1], None, 1, 1).unwrap();
        let y = g.permute(&y, &[1, 2, 0]).unwrap();
        let y = g.layer_norm(&y, &v[2], &v[3], 1e-6).unwrap();
        let y = g.softmax_last(&y);
        weighted_sum(g, &y)
    });
}

#[test]
fn reused_leaf_accumulates() {
    let x = rand_tensor(&[3], 44);
    check_grads(&[x.clone()], |g, v| {
        let y = g.mul(&v[0], &v[0]).unwrap();
        let z = g.add(&y, &v[0]).unwrap();
        weighted_sum(g, &z)
    });
    let g = Graph::<f64>::new();
    let xv = g.leaf(x.clone(), true);
    let sq = g.mul(&xv, &xv).unwrap();
    let loss = g.sum_all(&sq);
    let grads = g.backward(&loss).unwrap();
    assert_eq!(grads.get(&xv).unwrap(), &x.scale(2.0));
}
