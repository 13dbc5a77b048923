//! Meta-gradient correctness: the outer-loop gradient (which differentiates
//! through the inner adaptation) is verified against a finite-difference
//! oracle that perturbs parameters, reruns the full inner adaptation and
//! differences the post-adaptation losses.

mod common;

use common::{assert_close_slices, central_diff, FD_STEP};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cavia::autodiff::TensorData;
use cavia::metasup::{adapt_and_eval, meta_gradient, LossKind, MetaAlgorithm, MetaConfig, SupervisedTask};
use cavia::models::{Activation, Architecture, ContextModel};
use cavia::tasks::sample_sine_task;

fn sine_tasks(seed: u64, count: usize) -> Vec<SupervisedTask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| sample_sine_task(&mut rng, 6, 8)).collect()
}

fn config(algorithm: MetaAlgorithm, inner_lr: f64, first_order: bool) -> MetaConfig {
    MetaConfig {
        algorithm,
        context_dim: 3,
        inner_lr,
        inner_steps: 1,
        meta_batch: 4,
        first_order,
        loss: LossKind::Mse,
        seed: 0,
    }
}

/// 2 x 10-unit tanh MLP over the sine family (tanh keeps the
/// finite-difference oracle smooth).
fn test_model(context_dim: usize, seed: u64) -> ContextModel {
    let mut arch = Architecture::mlp(1, vec![10, 10], 1, context_dim);
    arch.activation = Activation::Tanh;
    ContextModel::init(arch, seed).unwrap()
}

fn flatten(model: &ContextModel, grads: &indexmap::IndexMap<String, TensorData>) -> Vec<f64> {
    model.theta.keys().flat_map(|k| grads[k].values.clone()).collect()
}

/// Finite-difference oracle over the full meta-objective: perturb one theta
/// component, rerun inner adaptation on every task, average the
/// post-adaptation test losses.
fn fd_meta_gradient(model: &ContextModel, tasks: &[SupervisedTask], cfg: &MetaConfig) -> Vec<f64> {
    let flat: Vec<f64> = model.theta.values().flat_map(|t| t.values.clone()).collect();
    let objective = |vals: &[f64]| -> f64 {
        let mut m = model.clone();
        let mut offset = 0;
        for t in m.theta.values_mut() {
            let n = t.values.len();
            t.values.copy_from_slice(&vals[offset..offset + n]);
            offset += n;
        }
        let mut total = 0.0;
        for task in tasks {
            let evals = adapt_and_eval(&m, task, cfg.loss, cfg.inner_lr, cfg.inner_steps).unwrap();
            total += evals[cfg.inner_steps].loss;
        }
        total / tasks.len() as f64
    };
    central_diff(objective, &flat, FD_STEP)
}

#[test]
fn second_order_meta_gradient_matches_finite_differences() {
    let model = test_model(3, 21);
    let tasks = sine_tasks(100, 4);
    let cfg = config(MetaAlgorithm::Cavia, 0.7, false);
    let analytic = flatten(&model, &meta_gradient(&model, &tasks, &cfg).unwrap());
    let numeric = fd_meta_gradient(&model, &tasks, &cfg);
    assert_close_slices(&analytic, &numeric, 1e-4, "cavia-meta-gradient");
}

#[test]
fn maml_meta_gradient_matches_finite_differences() {
    let mut arch = Architecture::mlp(1, vec![10, 10], 1, 0);
    arch.activation = Activation::Tanh;
    let model = ContextModel::init(arch, 22).unwrap();
    let tasks = sine_tasks(101, 3);
    let mut cfg = config(MetaAlgorithm::Maml, 0.05, false);
    cfg.context_dim = 0;
    let analytic = flatten(&model, &meta_gradient(&model, &tasks, &cfg).unwrap());

    // The oracle reruns the full theta adaptation per perturbation.
    let flat: Vec<f64> = model.theta.values().flat_map(|t| t.values.clone()).collect();
    let numeric = central_diff(
        |vals| {
            let mut m = model.clone();
            let mut offset = 0;
            for t in m.theta.values_mut() {
                let n = t.values.len();
                t.values.copy_from_slice(&vals[offset..offset + n]);
                offset += n;
            }
            use cavia::autodiff::{loss_mse, Graph};
            use cavia::metasup::maml_inner_adapt;
            let mut total = 0.0;
            for task in &tasks {
                let graph = Graph::new();
                let mut bound = m.bind(&graph);
                let train_x = graph.constant(&task.train_x);
                maml_inner_adapt(&mut bound, &train_x, &task.train_y, LossKind::Mse, 0.05, 1, false)
                    .unwrap();
                let test_x = graph.constant(&task.test_x);
                let pred = bound.forward(&test_x).unwrap();
                let target = graph.constant(&task.test_y);
                total += loss_mse(&pred, &target).unwrap().value();
            }
            total / tasks.len() as f64
        },
        &flat,
        FD_STEP,
    );
    assert_close_slices(&analytic, &numeric, 1e-4, "maml-meta-gradient");
}

#[test]
fn first_order_matches_hand_derived_expressions() {
    // Linear model f(x) = th * x + tp * phi + b with one train and one test
    // datum; the first-order meta-gradient drops every d(phi_1)/d(theta) term.
    let (th, tp, b) = (1.3, 0.8, 0.2);
    let (xt, yt) = (0.9, 0.4);
    let (xs, ys) = (-0.7, 0.1);
    let alpha = 0.25;

    let arch = Architecture::mlp(1, vec![], 1, 1);
    let mut model = ContextModel::init(arch, 0).unwrap();
    model.theta["w1"] = TensorData::matrix(2, 1, vec![th, tp]).unwrap();
    model.theta["b1"] = TensorData::vector(vec![b]);
    let task = SupervisedTask {
        train_x: TensorData::matrix(1, 1, vec![xt]).unwrap(),
        train_y: TensorData::matrix(1, 1, vec![yt]).unwrap(),
        test_x: TensorData::matrix(1, 1, vec![xs]).unwrap(),
        test_y: TensorData::matrix(1, 1, vec![ys]).unwrap(),
        descriptor: vec![],
    };
    let mut cfg = config(MetaAlgorithm::Cavia, alpha, false);
    cfg.context_dim = 1;

    // Hand derivation.
    let et = th * xt + b - yt;
    let phi1 = -2.0 * alpha * tp * et;
    let es = th * xs + tp * phi1 + b - ys;
    let dphi_dth = -2.0 * alpha * tp * xt;
    let dphi_dtp = -2.0 * alpha * et;
    let dphi_db = -2.0 * alpha * tp;
    let full = [
        2.0 * es * (xs + tp * dphi_dth),
        2.0 * es * (phi1 + tp * dphi_dtp),
        2.0 * es * (1.0 + tp * dphi_db),
    ];
    let first = [2.0 * es * xs, 2.0 * es * phi1, 2.0 * es];

    let second_order = meta_gradient(&model, std::slice::from_ref(&task), &cfg).unwrap();
    let got_full = [
        second_order["w1"].values[0],
        second_order["w1"].values[1],
        second_order["b1"].values[0],
    ];
    assert_close_slices(&got_full, &full, 1e-10, "hand-second-order");

    cfg.first_order = true;
    let first_order = meta_gradient(&model, &[task], &cfg).unwrap();
    let got_first = [
        first_order["w1"].values[0],
        first_order["w1"].values[1],
        first_order["b1"].values[0],
    ];
    assert_close_slices(&got_first, &first, 1e-10, "hand-first-order");
}

#[test]
fn first_and_second_order_differ_on_a_nonlinear_instance() {
    let model = test_model(3, 23);
    let tasks = sine_tasks(102, 3);
    let second = flatten(&model, &meta_gradient(&model, &tasks, &config(MetaAlgorithm::Cavia, 0.7, false)).unwrap());
    let first = flatten(&model, &meta_gradient(&model, &tasks, &config(MetaAlgorithm::Cavia, 0.7, true)).unwrap());
    let diff: f64 = second.iter().zip(&first).map(|(a, b)| (a - b).abs()).sum();
    assert!(diff > 1e-6, "expected the variants to differ, total diff {diff:.3e}");
}

#[test]
fn zero_inner_lr_reduces_to_multitask_gradient_for_both_variants() {
    // With alpha = 0 the adapted context stays at zero, so the meta-gradient
    // is the plain gradient of the test loss at phi = 0 and the first-order
    // variant coincides with the second-order one.
    let model = test_model(3, 24);
    let tasks = sine_tasks(103, 3);
    let second = flatten(&model, &meta_gradient(&model, &tasks, &config(MetaAlgorithm::Cavia, 0.0, false)).unwrap());
    let first = flatten(&model, &meta_gradient(&model, &tasks, &config(MetaAlgorithm::Cavia, 0.0, true)).unwrap());
    assert_close_slices(&second, &first, 1e-12, "alpha-zero-variants");

    // Plain multitask gradient of the test loss at phi = 0.
    use cavia::autodiff::{grad, loss_mse, Graph};
    use cavia::metasup::pairwise_mean;
    let graph = Graph::new();
    let mut bound = model.bind(&graph);
    let mut losses = Vec::new();
    for task in &tasks {
        bound.reset_context();
        let test_x = graph.constant(&task.test_x);
        let pred = bound.forward(&test_x).unwrap();
        let target = graph.constant(&task.test_y);
        losses.push(loss_mse(&pred, &target).unwrap());
    }
    let mean = pairwise_mean(&losses).unwrap();
    let leaves: Vec<&cavia::autodiff::Tensor> = bound.theta_leaves().values().collect();
    let grads = grad(&mean, &leaves, false).unwrap();
    let plain: Vec<f64> = bound
        .theta_leaves()
        .values()
        .flat_map(|t| grads.gradient(t).values())
        .collect();
    assert_close_slices(&second, &plain, 1e-12, "alpha-zero-multitask");
}

#[test]
fn meta_gradient_is_invariant_to_task_order() {
    let model = test_model(3, 25);
    let mut tasks = sine_tasks(104, 8);
    let cfg = config(MetaAlgorithm::Cavia, 0.7, false);
    let base = flatten(&model, &meta_gradient(&model, &tasks, &cfg).unwrap());
    tasks.reverse();
    let permuted = flatten(&model, &meta_gradient(&model, &tasks, &cfg).unwrap());
    tasks.swap(0, 3);
    let permuted2 = flatten(&model, &meta_gradient(&model, &tasks, &cfg).unwrap());
    for (a, b) in base.iter().zip(&permuted).chain(base.iter().zip(&permuted2)) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}
