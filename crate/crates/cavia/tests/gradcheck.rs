//! Finite-difference verification of every differentiable operation, first
//! and second order. Analytic gradients must match central differences
//! (step 1e-5) to a relative error of 1e-6 over 100 randomized trials per op,
//! and second-order quantities to 1e-4.

mod common;

use common::{assert_close_slices, central_diff, random_values, random_values_away_from, FD_STEP};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cavia::autodiff::{grad, loss_mse, loss_softmax_xent, Graph, Tensor, TensorData};

const TRIALS: usize = 100;
const FIRST_ORDER_TOL: f64 = 1e-6;

/// Check d(scalar pipeline)/d(inputs) against central differences, where the
/// pipeline is rebuilt from plain values for every probe.
fn check_pipeline(
    name: &str,
    shapes: &[Vec<usize>],
    inputs: &[Vec<f64>],
    build: impl Fn(&Graph, &[Tensor]) -> Tensor,
) {
    let flat: Vec<f64> = inputs.concat();
    let eval = |flat_vals: &[f64]| -> f64 {
        let g = Graph::new();
        let mut offset = 0;
        let tensors: Vec<Tensor> = shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                let vals = flat_vals[offset..offset + n].to_vec();
                offset += n;
                g.leaf(&TensorData::new(s.clone(), vals).unwrap(), true)
            })
            .collect();
        build(&g, &tensors).value()
    };
    let numeric = central_diff(eval, &flat, FD_STEP);

    let g = Graph::new();
    let mut offset = 0;
    let tensors: Vec<Tensor> = shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let vals = flat[offset..offset + n].to_vec();
            offset += n;
            g.leaf(&TensorData::new(s.clone(), vals).unwrap(), true)
        })
        .collect();
    let out = build(&g, &tensors);
    let refs: Vec<&Tensor> = tensors.iter().collect();
    let grads = grad(&out, &refs, false).unwrap();
    let analytic: Vec<f64> = tensors.iter().flat_map(|t| grads.gradient(t).values()).collect();
    assert_close_slices(&analytic, &numeric, FIRST_ORDER_TOL, name);
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..TRIALS {
        let (m, k, n) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4));
        let a = random_values(&mut rng, m * k);
        let b = random_values(&mut rng, k * n);
        check_pipeline(
            "matmul",
            &[vec![m, k], vec![k, n]],
            &[a, b],
            |_, t| t[0].matmul(&t[1]).unwrap().sum(None).unwrap(),
        );
    }
}

#[test]
fn matmul_gradient_is_ones_times_b_transposed() {
    // d sum(A B) / dA = 1 B^T, checked analytically and against FD.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random_values(&mut rng, 6);
    let b = random_values(&mut rng, 12);
    let g = Graph::new();
    let ta = g.leaf(&TensorData::matrix(2, 3, a.clone()).unwrap(), true);
    let tb = g.leaf(&TensorData::matrix(3, 4, b.clone()).unwrap(), true);
    let out = ta.matmul(&tb).unwrap().sum(None).unwrap();
    let grads = grad(&out, &[&ta], false).unwrap();
    let ga = grads.gradient(&ta).values();
    // ones(2x4) @ B^T: row r of dA is the row sums of B.
    let mut expect = vec![0.0; 6];
    for r in 0..2 {
        for c in 0..3 {
            expect[r * 3 + c] = (0..4).map(|j| b[c * 4 + j]).sum();
        }
    }
    assert_close_slices(&ga, &expect, 1e-12, "matmul-vs-ones-bt");

    let numeric = central_diff(
        |vals| {
            let g = Graph::new();
            let ta = g.leaf(&TensorData::matrix(2, 3, vals.to_vec()).unwrap(), true);
            let tb = g.constant(&TensorData::matrix(3, 4, b.clone()).unwrap());
            ta.matmul(&tb).unwrap().sum(None).unwrap().value()
        },
        &a,
        FD_STEP,
    );
    assert_close_slices(&ga, &numeric, FIRST_ORDER_TOL, "matmul-vs-fd");
}

#[test]
fn elementwise_binary_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..TRIALS {
        let (m, f) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let a = random_values(&mut rng, m * f);
        match trial % 3 {
            // Equal shapes.
            0 => {
                let b = random_values(&mut rng, m * f);
                for op in 0..3 {
                    check_pipeline(
                        "binary-equal",
                        &[vec![m, f], vec![m, f]],
                        &[a.clone(), b.clone()],
                        move |_, t| {
                            let r = match op {
                                0 => t[0].add(&t[1]).unwrap(),
                                1 => t[0].sub(&t[1]).unwrap(),
                                _ => t[0].mul(&t[1]).unwrap(),
                            };
                            r.sum(None).unwrap()
                        },
                    );
                }
            }
            // Bias vector broadcast over the last axis.
            1 => {
                let b = random_values(&mut rng, f);
                for op in 0..3 {
                    check_pipeline(
                        "binary-bias",
                        &[vec![m, f], vec![f]],
                        &[a.clone(), b.clone()],
                        move |_, t| {
                            let r = match op {
                                0 => t[0].add(&t[1]).unwrap(),
                                1 => t[0].sub(&t[1]).unwrap(),
                                _ => t[0].mul(&t[1]).unwrap(),
                            };
                            r.mean(None).unwrap()
                        },
                    );
                }
            }
            // Scalar broadcast.
            _ => {
                let b = random_values(&mut rng, 1);
                check_pipeline(
                    "binary-scalar",
                    &[vec![m, f], vec![]],
                    &[a.clone(), b],
                    |_, t| t[0].mul(&t[1]).unwrap().sum(None).unwrap(),
                );
            }
        }
    }
}

#[test]
fn unary_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for trial in 0..TRIALS {
        let n = rng.gen_range(1..6);
        match trial % 6 {
            0 => {
                let x = random_values(&mut rng, n);
                check_pipeline("square", &[vec![n]], &[x], |_, t| {
                    t[0].square().unwrap().sum(None).unwrap()
                });
            }
            1 => {
                // Keep probes away from the relu kink.
                let x = random_values_away_from(&mut rng, n, 0.05);
                check_pipeline("relu", &[vec![n]], &[x], |_, t| {
                    t[0].relu().unwrap().sum(None).unwrap()
                });
            }
            2 => {
                let x = random_values(&mut rng, n);
                check_pipeline("tanh", &[vec![n]], &[x], |_, t| {
                    t[0].tanh().unwrap().sum(None).unwrap()
                });
            }
            3 => {
                let x = random_values(&mut rng, n);
                check_pipeline("exp", &[vec![n]], &[x], |_, t| {
                    t[0].exp().unwrap().sum(None).unwrap()
                });
            }
            4 => {
                // log needs positive inputs with some margin.
                let x: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..2.0)).collect();
                check_pipeline("log", &[vec![n]], &[x], |_, t| {
                    t[0].log().unwrap().sum(None).unwrap()
                });
            }
            _ => {
                let x = random_values_away_from(&mut rng, n, 0.2);
                check_pipeline("recip", &[vec![n]], &[x], |_, t| {
                    t[0].recip().unwrap().sum(None).unwrap()
                });
            }
        }
    }
}

#[test]
fn affine_scale_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..TRIALS {
        let n = rng.gen_range(1..6);
        let x = random_values(&mut rng, n);
        let c: f64 = rng.gen_range(-2.0..2.0);
        let d: f64 = rng.gen_range(-2.0..2.0);
        check_pipeline("affine", &[vec![n]], &[x], move |_, t| {
            t[0].affine(c, d).unwrap().square().unwrap().sum(None).unwrap()
        });
    }
}

#[test]
fn shape_ops_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for trial in 0..TRIALS {
        let m = rng.gen_range(1..4);
        let p = rng.gen_range(1..4);
        let q = rng.gen_range(1..4);
        let a = random_values(&mut rng, m * p);
        match trial % 4 {
            0 => {
                let b = random_values(&mut rng, m * q);
                check_pipeline(
                    "concat",
                    &[vec![m, p], vec![m, q]],
                    &[a.clone(), b],
                    |_, t| {
                        t[0].concat_last(&t[1]).unwrap().square().unwrap().sum(None).unwrap()
                    },
                );
            }
            1 => {
                let b = random_values(&mut rng, q);
                check_pipeline(
                    "concat-broadcast",
                    &[vec![m, p], vec![q]],
                    &[a.clone(), b],
                    |_, t| {
                        t[0].concat_last(&t[1]).unwrap().square().unwrap().sum(None).unwrap()
                    },
                );
            }
            2 => {
                let start = rng.gen_range(0..p);
                let len = rng.gen_range(1..=p - start);
                check_pipeline("slice", &[vec![m, p]], &[a.clone()], move |_, t| {
                    t[0].slice_last(start, len).unwrap().square().unwrap().sum(None).unwrap()
                });
            }
            _ => {
                check_pipeline("transpose", &[vec![m, p]], &[a.clone()], |_, t| {
                    t[0].transpose().unwrap().square().unwrap().mean(None).unwrap()
                });
            }
        }
    }
}

#[test]
fn reductions_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..TRIALS {
        let m = rng.gen_range(1..4);
        let f = rng.gen_range(1..4);
        let a = random_values(&mut rng, m * f);
        let axis = match trial % 3 {
            0 => None,
            1 => Some(0),
            _ => Some(1),
        };
        let mean_not_sum = trial % 2 == 0;
        check_pipeline("reduce", &[vec![m, f]], &[a], move |_, t| {
            let r = if mean_not_sum {
                t[0].mean(axis).unwrap()
            } else {
                t[0].sum(axis).unwrap()
            };
            r.square().unwrap().sum(None).unwrap()
        });
    }
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for trial in 0..TRIALS {
        let m = rng.gen_range(1..4);
        let d = rng.gen_range(1..4);
        if trial % 2 == 0 {
            let pred = random_values(&mut rng, m * d);
            let target = random_values(&mut rng, m * d);
            check_pipeline("mse", &[vec![m, d], vec![m, d]], &[pred, target], |_, t| {
                loss_mse(&t[0], &t[1]).unwrap()
            });
        } else {
            let classes = rng.gen_range(2..5);
            let logits = random_values(&mut rng, m * classes);
            let labels: Vec<usize> = (0..m).map(|_| rng.gen_range(0..classes)).collect();
            check_pipeline("xent", &[vec![m, classes]], &[logits], move |_, t| {
                loss_softmax_xent(&t[0], &labels).unwrap()
            });
        }
    }
}

#[test]
fn softmax_xent_gradient_on_random_3x4() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let logits = random_values(&mut rng, 12);
    let labels = vec![2usize, 0, 3];
    check_pipeline("xent-3x4", &[vec![3, 4]], &[logits], move |_, t| {
        loss_softmax_xent(&t[0], &labels).unwrap()
    });
}

#[test]
fn second_derivative_of_x_tanh_x() {
    // f(x) = x tanh x. Compare the AD second derivative against a central
    // difference of the AD first derivative at x = 0.5.
    let first = |x: f64| -> f64 {
        let g = Graph::new();
        let t = g.leaf(&TensorData::scalar(x), true);
        let y = t.mul(&t.tanh().unwrap()).unwrap();
        grad(&y, &[&t], false).unwrap().gradient(&t).value()
    };
    let numeric = (first(0.5 + FD_STEP) - first(0.5 - FD_STEP)) / (2.0 * FD_STEP);

    let g = Graph::new();
    let t = g.leaf(&TensorData::scalar(0.5), true);
    let y = t.mul(&t.tanh().unwrap()).unwrap();
    let gx = grad(&y, &[&t], true).unwrap();
    let second = grad(gx.gradient(&t), &[&t], false).unwrap().gradient(&t).value();

    let err = common::rel_err(second, numeric);
    assert!(err < 1e-5, "second derivative {second} vs fd {numeric} (rel {err:.2e})");
}

#[test]
fn second_order_through_inner_gradient_step_on_mlp() {
    // Two-layer tanh MLP with loss L(theta, phi). The quantity
    // grad_theta[ L evaluated at phi - alpha * grad_phi L ] must match a
    // finite difference of the post-update loss in theta.
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (din, hid, k, m) = (2usize, 10usize, 3usize, 4usize);
    let w1 = random_values(&mut rng, (din + k) * hid);
    let b1 = random_values(&mut rng, hid);
    let w2 = random_values(&mut rng, hid);
    let x = random_values(&mut rng, m * din);
    let y = random_values(&mut rng, m);
    let alpha = 0.4;

    let post_update_loss = |w1v: &[f64], b1v: &[f64], w2v: &[f64]| -> f64 {
        let g = Graph::new();
        let w1t = g.leaf(&TensorData::matrix(din + k, hid, w1v.to_vec()).unwrap(), true);
        let b1t = g.leaf(&TensorData::vector(b1v.to_vec()), true);
        let w2t = g.leaf(&TensorData::matrix(hid, 1, w2v.to_vec()).unwrap(), true);
        let phi = g.leaf(&TensorData::zeros(vec![k]), true);
        let xt = g.constant(&TensorData::matrix(m, din, x.clone()).unwrap());
        let yt = g.constant(&TensorData::matrix(m, 1, y.clone()).unwrap());
        let fwd = |phi_t: &Tensor| {
            let h = xt.concat_last(phi_t).unwrap();
            let z = h.matmul(&w1t).unwrap().add(&b1t).unwrap().tanh().unwrap();
            z.matmul(&w2t).unwrap()
        };
        let inner = loss_mse(&fwd(&phi), &yt).unwrap();
        let g_phi = grad(&inner, &[&phi], true).unwrap();
        let phi_new = phi.sub(&g_phi.gradient(&phi).scale(alpha).unwrap()).unwrap();
        loss_mse(&fwd(&phi_new), &yt).unwrap().value()
    };

    // Analytic meta-gradient.
    let g = Graph::new();
    let w1t = g.leaf(&TensorData::matrix(din + k, hid, w1.clone()).unwrap(), true);
    let b1t = g.leaf(&TensorData::vector(b1.clone()), true);
    let w2t = g.leaf(&TensorData::matrix(hid, 1, w2.clone()).unwrap(), true);
    let phi = g.leaf(&TensorData::zeros(vec![k]), true);
    let xt = g.constant(&TensorData::matrix(m, din, x.clone()).unwrap());
    let yt = g.constant(&TensorData::matrix(m, 1, y.clone()).unwrap());
    let fwd = |phi_t: &cavia::autodiff::Tensor| {
        let h = xt.concat_last(phi_t).unwrap();
        let z = h.matmul(&w1t).unwrap().add(&b1t).unwrap().tanh().unwrap();
        z.matmul(&w2t).unwrap()
    };
    let inner = loss_mse(&fwd(&phi), &yt).unwrap();
    let g_phi = grad(&inner, &[&phi], true).unwrap();
    let phi_new = phi.sub(&g_phi.gradient(&phi).scale(alpha).unwrap()).unwrap();
    let outer = loss_mse(&fwd(&phi_new), &yt).unwrap();
    let meta = grad(&outer, &[&w1t, &b1t, &w2t], false).unwrap();

    let analytic: Vec<f64> = [&w1t, &b1t, &w2t]
        .iter()
        .flat_map(|t| meta.gradient(t).values())
        .collect();

    let flat: Vec<f64> = [w1.clone(), b1.clone(), w2.clone()].concat();
    let numeric = central_diff(
        |vals| {
            let (w1v, rest) = vals.split_at(w1.len());
            let (b1v, w2v) = rest.split_at(b1.len());
            post_update_loss(w1v, b1v, w2v)
        },
        &flat,
        FD_STEP,
    );
    assert_close_slices(&analytic, &numeric, 1e-4, "mlp-second-order");
}
