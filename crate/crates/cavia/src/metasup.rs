//! Supervised meta-learning loops.
//!
//! Two algorithms over the same model family: context adaptation (inner loop
//! updates only the context vector, outer loop meta-trains `theta` through
//! the inner update) and the full-adaptation baseline (inner loop updates
//! every `theta` tensor). Both support a first-order variant that detaches
//! the inner gradient.

use indexmap::IndexMap;

use crate::autodiff::{grad, loss_mse, loss_softmax_xent, Graph, Tensor, TensorData};
use crate::error::{CaviaError, Result};
use crate::models::{BoundModel, ContextModel};
use crate::optim::AdamState;

/// Abort threshold for the outer loss.
pub const MAX_META_LOSS: f64 = 1e6;

/// One sampled task: train/test datasets plus the generating parameters.
/// The descriptor is for analysis only and never enters a loss.
#[derive(Debug, Clone)]
pub struct SupervisedTask {
    pub train_x: TensorData,
    pub train_y: TensorData,
    pub test_x: TensorData,
    pub test_y: TensorData,
    pub descriptor: Vec<f64>,
}

impl SupervisedTask {
    pub fn train_len(&self) -> usize {
        self.train_x.shape[0]
    }

    pub fn test_len(&self) -> usize {
        self.test_x.shape[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetaAlgorithm {
    Cavia,
    Maml,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    SoftmaxXent,
}

/// Hyperparameters of one meta-training run.
#[derive(Debug, Clone)]
pub struct MetaConfig {
    pub algorithm: MetaAlgorithm,
    pub context_dim: usize,
    pub inner_lr: f64,
    pub inner_steps: usize,
    pub meta_batch: usize,
    pub first_order: bool,
    pub loss: LossKind,
    pub seed: u64,
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inner_lr <= 0.0 {
            return Err(CaviaError::Config("inner_lr must be positive".into()));
        }
        if self.meta_batch == 0 || self.inner_steps == 0 {
            return Err(CaviaError::Config("meta_batch and inner_steps must be >= 1".into()));
        }
        if self.algorithm == MetaAlgorithm::Cavia && self.context_dim == 0 {
            return Err(CaviaError::Config(
                "context adaptation needs context_dim >= 1 (use the full-adaptation baseline for 0)"
                    .into(),
            ));
        }
        Ok(())
    }
}

fn task_loss(model: &BoundModel, x: &Tensor, y: &TensorData, kind: LossKind) -> Result<Tensor> {
    let pred = model.forward(x)?;
    match kind {
        LossKind::Mse => {
            let target = model.graph().constant(y);
            loss_mse(&pred, &target)
        }
        LossKind::SoftmaxXent => {
            let labels: Vec<usize> = y.values.iter().map(|&v| v as usize).collect();
            loss_softmax_xent(&pred, &labels)
        }
    }
}

/// Per-step training losses observed during an inner adaptation.
#[derive(Debug, Clone)]
pub struct InnerReport {
    pub step_losses: Vec<f64>,
}

/// Gradient steps on the context vector only; `theta` is untouched. With
/// `track_meta_graph` the updates stay attached to the graph so the outer
/// gradient can flow through them.
pub fn inner_adapt(
    model: &mut BoundModel,
    train_x: &Tensor,
    train_y: &TensorData,
    loss_kind: LossKind,
    inner_lr: f64,
    steps: usize,
    track_meta_graph: bool,
) -> Result<InnerReport> {
    let mut step_losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let loss = task_loss(model, train_x, train_y, loss_kind).map_err(|e| diverged(step, e))?;
        let loss_val = loss.value();
        if !loss_val.is_finite() {
            return Err(CaviaError::Divergence {
                iteration: step,
                detail: "non-finite inner loss".into(),
            });
        }
        step_losses.push(loss_val);
        let phi = model.phi().clone();
        let grads = grad(&loss, &[&phi], track_meta_graph).map_err(|e| diverged(step, e))?;
        let update = grads.gradient(&phi).scale(inner_lr).map_err(|e| diverged(step, e))?;
        model.set_phi(phi.sub(&update).map_err(|e| diverged(step, e))?);
    }
    Ok(InnerReport { step_losses })
}

/// Gradient steps on every `theta` tensor (full-adaptation baseline); the
/// adapted copies replace the model's current handles, the leaves stay put.
pub fn maml_inner_adapt(
    model: &mut BoundModel,
    train_x: &Tensor,
    train_y: &TensorData,
    loss_kind: LossKind,
    inner_lr: f64,
    steps: usize,
    track_meta_graph: bool,
) -> Result<InnerReport> {
    let mut step_losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let loss = task_loss(model, train_x, train_y, loss_kind).map_err(|e| diverged(step, e))?;
        let loss_val = loss.value();
        if !loss_val.is_finite() {
            return Err(CaviaError::Divergence {
                iteration: step,
                detail: "non-finite inner loss".into(),
            });
        }
        step_losses.push(loss_val);
        let current: Vec<(String, Tensor)> = model
            .theta()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let refs: Vec<&Tensor> = current.iter().map(|(_, t)| t).collect();
        let grads = grad(&loss, &refs, track_meta_graph).map_err(|e| diverged(step, e))?;
        for (name, t) in &current {
            let update = grads.gradient(t).scale(inner_lr).map_err(|e| diverged(step, e))?;
            let adapted = t.sub(&update).map_err(|e| diverged(step, e))?;
            model.set_theta(name, adapted);
        }
    }
    Ok(InnerReport { step_losses })
}

fn diverged(step: usize, e: CaviaError) -> CaviaError {
    match e {
        CaviaError::NonFinite { op } => CaviaError::Divergence {
            iteration: step,
            detail: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// Balanced pairwise mean of scalar tensors, so the accumulated value is
/// insensitive to term order at the 1e-10 level.
pub fn pairwise_mean(terms: &[Tensor]) -> Result<Tensor> {
    fn sum(terms: &[Tensor]) -> Result<Tensor> {
        match terms.len() {
            1 => Ok(terms[0].clone()),
            n => {
                let (left, right) = terms.split_at(n / 2);
                sum(left)?.add(&sum(right)?)
            }
        }
    }
    if terms.is_empty() {
        return Err(CaviaError::Contract("mean over zero tasks".into()));
    }
    sum(terms)?.scale(1.0 / terms.len() as f64)
}

#[derive(Debug, Clone)]
pub struct StepDiagnostics {
    /// Mean training loss at the unadapted context, across the batch.
    pub pre_adapt_loss: f64,
    /// Mean post-adaptation test loss, across the batch (the outer loss).
    pub post_adapt_loss: f64,
    pub meta_grad_norm: f64,
}

/// One outer-loop update: adapt each task, average the post-adaptation test
/// losses, differentiate with respect to the original parameters and take one
/// Adam step. The model's context comes back reset.
pub fn meta_train_step(
    model: &mut ContextModel,
    tasks: &[SupervisedTask],
    cfg: &MetaConfig,
    adam: &mut AdamState,
) -> Result<StepDiagnostics> {
    let (grad_values, pre, post) = meta_gradient_inner(model, tasks, cfg)?;
    let meta_grad_norm = grad_values
        .values()
        .map(|g| g.values.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    adam.step(&mut model.theta, &grad_values)?;
    model.reset_context();
    Ok(StepDiagnostics {
        pre_adapt_loss: pre,
        post_adapt_loss: post,
        meta_grad_norm,
    })
}

/// Raw meta-gradient (no optimizer step); also used by tests to compare
/// against finite-difference oracles.
pub fn meta_gradient(
    model: &ContextModel,
    tasks: &[SupervisedTask],
    cfg: &MetaConfig,
) -> Result<IndexMap<String, TensorData>> {
    Ok(meta_gradient_inner(model, tasks, cfg)?.0)
}

fn meta_gradient_inner(
    model: &ContextModel,
    tasks: &[SupervisedTask],
    cfg: &MetaConfig,
) -> Result<(IndexMap<String, TensorData>, f64, f64)> {
    if tasks.is_empty() {
        return Err(CaviaError::Contract("meta step needs at least one task".into()));
    }
    let graph = Graph::new();
    let mut bound = model.bind(&graph);
    let track = !cfg.first_order;

    let mut test_losses = Vec::with_capacity(tasks.len());
    let mut pre_losses = Vec::with_capacity(tasks.len());
    for (task_idx, task) in tasks.iter().enumerate() {
        let with_task = |e: CaviaError| match e {
            CaviaError::Divergence { iteration, detail } => CaviaError::Divergence {
                iteration,
                detail: format!("task {task_idx}: {detail}"),
            },
            other => other,
        };
        bound.reset_context();
        bound.reset_theta();
        let train_x = graph.constant(&task.train_x);
        let report = match cfg.algorithm {
            MetaAlgorithm::Cavia => inner_adapt(
                &mut bound,
                &train_x,
                &task.train_y,
                cfg.loss,
                cfg.inner_lr,
                cfg.inner_steps,
                track,
            ),
            MetaAlgorithm::Maml => maml_inner_adapt(
                &mut bound,
                &train_x,
                &task.train_y,
                cfg.loss,
                cfg.inner_lr,
                cfg.inner_steps,
                track,
            ),
        }
        .map_err(with_task)?;
        pre_losses.push(report.step_losses[0]);

        let test_x = graph.constant(&task.test_x);
        let loss =
            task_loss(&bound, &test_x, &task.test_y, cfg.loss).map_err(|e| with_task(diverged(0, e)))?;
        test_losses.push(loss);
    }

    let meta_loss = pairwise_mean(&test_losses)?;
    let meta_loss_val = meta_loss.value();
    if !meta_loss_val.is_finite() || meta_loss_val > MAX_META_LOSS {
        return Err(CaviaError::Divergence {
            iteration: 0,
            detail: format!("meta loss {meta_loss_val:e}"),
        });
    }

    let leaves: Vec<(String, Tensor)> = bound
        .theta_leaves()
        .iter()
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let refs: Vec<&Tensor> = leaves.iter().map(|(_, t)| t).collect();
    let grads = grad(&meta_loss, &refs, false)?;
    let grad_values: IndexMap<String, TensorData> = leaves
        .iter()
        .map(|(name, t)| (name.clone(), grads.gradient(t).data()))
        .collect();
    Ok((grad_values, crate::util::mean(&pre_losses), meta_loss_val))
}

/// Test loss (and accuracy, for classification) after each adaptation step.
#[derive(Debug, Clone, Copy)]
pub struct StepEval {
    pub loss: f64,
    pub accuracy: Option<f64>,
}

/// Adaptation-time evaluation with `theta` frozen: returns the test metric
/// after 0, 1, ..., `max_steps` context updates on the task's training set.
pub fn adapt_and_eval(
    model: &ContextModel,
    task: &SupervisedTask,
    loss_kind: LossKind,
    inner_lr: f64,
    max_steps: usize,
) -> Result<Vec<StepEval>> {
    let graph = Graph::new();
    let mut bound = model.bind(&graph);
    bound.reset_context();
    let train_x = graph.constant(&task.train_x);
    let test_x = graph.constant(&task.test_x);
    let mut evals = Vec::with_capacity(max_steps + 1);
    for step in 0..=max_steps {
        if step > 0 {
            inner_adapt(&mut bound, &train_x, &task.train_y, loss_kind, inner_lr, 1, false)
                .map_err(|e| diverged(step, e))?;
        }
        let pred = bound.forward(&test_x)?;
        let (loss, accuracy) = match loss_kind {
            LossKind::Mse => {
                let target = graph.constant(&task.test_y);
                (loss_mse(&pred, &target)?.value(), None)
            }
            LossKind::SoftmaxXent => {
                let labels: Vec<usize> = task.test_y.values.iter().map(|&v| v as usize).collect();
                let loss = loss_softmax_xent(&pred, &labels)?.value();
                (loss, Some(accuracy_of(&pred.data(), &labels)))
            }
        };
        evals.push(StepEval { loss, accuracy });
    }
    Ok(evals)
}

/// Full-adaptation evaluation: every `theta` tensor is updated at test time
/// (the baseline's protocol). Returns the test metric after 0..=`max_steps`
/// updates.
pub fn maml_adapt_and_eval(
    model: &ContextModel,
    task: &SupervisedTask,
    loss_kind: LossKind,
    inner_lr: f64,
    max_steps: usize,
) -> Result<Vec<StepEval>> {
    let graph = Graph::new();
    let mut bound = model.bind(&graph);
    let train_x = graph.constant(&task.train_x);
    let test_x = graph.constant(&task.test_x);
    let mut evals = Vec::with_capacity(max_steps + 1);
    for step in 0..=max_steps {
        if step > 0 {
            maml_inner_adapt(&mut bound, &train_x, &task.train_y, loss_kind, inner_lr, 1, false)
                .map_err(|e| diverged(step, e))?;
        }
        let pred = bound.forward(&test_x)?;
        let (loss, accuracy) = match loss_kind {
            LossKind::Mse => {
                let target = graph.constant(&task.test_y);
                (loss_mse(&pred, &target)?.value(), None)
            }
            LossKind::SoftmaxXent => {
                let labels: Vec<usize> = task.test_y.values.iter().map(|&v| v as usize).collect();
                let loss = loss_softmax_xent(&pred, &labels)?.value();
                (loss, Some(accuracy_of(&pred.data(), &labels)))
            }
        };
        evals.push(StepEval { loss, accuracy });
    }
    Ok(evals)
}

fn accuracy_of(logits: &TensorData, labels: &[usize]) -> f64 {
    let classes = logits.shape[1];
    let mut correct = 0usize;
    for (r, &label) in labels.iter().enumerate() {
        let row = &logits.values[r * classes..(r + 1) * classes];
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        if argmax == label {
            correct += 1;
        }
    }
    correct as f64 / labels.len() as f64
}

/// Mean context-gradient norm at the unadapted context over a task set
/// (the quantity that compensates for the inner learning rate).
pub fn mean_context_grad_norm(
    model: &ContextModel,
    tasks: &[SupervisedTask],
    loss_kind: LossKind,
) -> Result<f64> {
    let mut norms = Vec::with_capacity(tasks.len());
    for task in tasks {
        let graph = Graph::new();
        let mut bound = model.bind(&graph);
        bound.reset_context();
        let train_x = graph.constant(&task.train_x);
        let loss = task_loss(&bound, &train_x, &task.train_y, loss_kind)?;
        let phi = bound.phi().clone();
        let grads = grad(&loss, &[&phi], false)?;
        norms.push(grads.gradient(&phi).data().l2_norm());
    }
    Ok(crate::util::mean(&norms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Architecture;
    use crate::optim::AdamHyper;

    /// f(x) = th * x + tp * phi with th = tp = 1; one datum (x=1, y=2).
    fn scalar_task_model() -> (ContextModel, SupervisedTask) {
        let arch = Architecture::mlp(1, vec![], 1, 1);
        let mut model = ContextModel::init(arch, 0).unwrap();
        model.theta["w1"] = TensorData::matrix(2, 1, vec![1.0, 1.0]).unwrap();
        let task = SupervisedTask {
            train_x: TensorData::matrix(1, 1, vec![1.0]).unwrap(),
            train_y: TensorData::matrix(1, 1, vec![2.0]).unwrap(),
            test_x: TensorData::matrix(1, 1, vec![1.0]).unwrap(),
            test_y: TensorData::matrix(1, 1, vec![2.0]).unwrap(),
            descriptor: vec![],
        };
        (model, task)
    }

    fn cfg(algorithm: MetaAlgorithm) -> MetaConfig {
        MetaConfig {
            algorithm,
            context_dim: 1,
            inner_lr: 0.1,
            inner_steps: 1,
            meta_batch: 1,
            first_order: false,
            loss: LossKind::Mse,
            seed: 0,
        }
    }

    #[test]
    fn zero_inner_lr_leaves_context_at_zero() {
        let (model, task) = scalar_task_model();
        let graph = Graph::new();
        let mut bound = model.bind(&graph);
        bound.reset_context();
        let train_x = graph.constant(&task.train_x);
        inner_adapt(&mut bound, &train_x, &task.train_y, LossKind::Mse, 0.0, 3, false).unwrap();
        assert_eq!(bound.phi().values(), vec![0.0]);
    }

    #[test]
    fn hand_computed_single_step() {
        // loss = (phi + 1 - 2)^2, grad_phi at 0 = -2, phi1 = 0.2.
        let (model, task) = scalar_task_model();
        let graph = Graph::new();
        let mut bound = model.bind(&graph);
        bound.reset_context();
        let train_x = graph.constant(&task.train_x);
        let report =
            inner_adapt(&mut bound, &train_x, &task.train_y, LossKind::Mse, 0.1, 1, false).unwrap();
        assert!((bound.phi().values()[0] - 0.2).abs() < 1e-12);
        assert!((report.step_losses[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_two_steps() {
        // Step 2: pred = 1.2, grad = 2(1.2-2) = -1.6, phi2 = 0.2 + 0.16 = 0.36.
        let (model, task) = scalar_task_model();
        let graph = Graph::new();
        let mut bound = model.bind(&graph);
        bound.reset_context();
        let train_x = graph.constant(&task.train_x);
        inner_adapt(&mut bound, &train_x, &task.train_y, LossKind::Mse, 0.1, 2, false).unwrap();
        assert!((bound.phi().values()[0] - 0.36).abs() < 1e-12);
    }

    #[test]
    fn maml_zero_lr_and_hand_computed_step() {
        // f(x) = theta * x, datum (1, 0), alpha = 0.25, theta = 1 -> 0.5.
        let arch = Architecture::mlp(1, vec![], 1, 0);
        let mut model = ContextModel::init(arch, 0).unwrap();
        model.theta["w1"] = TensorData::matrix(1, 1, vec![1.0]).unwrap();
        let task = SupervisedTask {
            train_x: TensorData::matrix(1, 1, vec![1.0]).unwrap(),
            train_y: TensorData::matrix(1, 1, vec![0.0]).unwrap(),
            test_x: TensorData::matrix(1, 1, vec![1.0]).unwrap(),
            test_y: TensorData::matrix(1, 1, vec![0.0]).unwrap(),
            descriptor: vec![],
        };
        let graph = Graph::new();
        let mut bound = model.bind(&graph);
        let train_x = graph.constant(&task.train_x);
        maml_inner_adapt(&mut bound, &train_x, &task.train_y, LossKind::Mse, 0.0, 1, false).unwrap();
        assert_eq!(bound.theta()["w1"].values(), vec![1.0]);

        bound.reset_theta();
        maml_inner_adapt(&mut bound, &train_x, &task.train_y, LossKind::Mse, 0.25, 1, false).unwrap();
        assert!((bound.theta()["w1"].values()[0] - 0.5).abs() < 1e-12);
        // Leaves are untouched.
        assert_eq!(bound.theta_leaves()["w1"].values(), vec![1.0]);
    }

    #[test]
    fn identical_tasks_average_to_single_task_gradient() {
        let (model, task) = scalar_task_model();
        let one =
            meta_gradient(&model, std::slice::from_ref(&task), &cfg(MetaAlgorithm::Cavia)).unwrap();
        let many = meta_gradient(&model, &vec![task.clone(); 4], &cfg(MetaAlgorithm::Cavia)).unwrap();
        for (k, g) in &one {
            for (a, b) in g.values.iter().zip(&many[k].values) {
                assert!((a - b).abs() < 1e-12, "{k}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn theta_untouched_by_inner_adapt_and_phi_reset_after_outer_step() {
        let (mut model, task) = scalar_task_model();
        let mut adam = AdamState::new(AdamHyper::default(), &model.theta);
        model.phi = vec![0.7];
        meta_train_step(&mut model, &[task], &cfg(MetaAlgorithm::Cavia), &mut adam).unwrap();
        assert_eq!(model.phi, vec![0.0]);
    }

    #[test]
    fn divergence_error_carries_task_index() {
        let (mut model, task) = scalar_task_model();
        // A huge weight makes the inner loss overflow when squared.
        model.theta["w1"] = TensorData::matrix(2, 1, vec![1e200, 0.0]).unwrap();
        let mut adam = AdamState::new(AdamHyper::default(), &model.theta);
        let err =
            meta_train_step(&mut model, &[task], &cfg(MetaAlgorithm::Cavia), &mut adam).unwrap_err();
        match err {
            CaviaError::Divergence { detail, .. } => assert!(detail.contains("task 0"), "{detail}"),
            other => panic!("expected divergence, got {other}"),
        }
    }

    #[test]
    fn descriptor_never_enters_losses() {
        let (model, mut task) = scalar_task_model();
        task.descriptor = vec![123.0, -5.0];
        let with =
            meta_gradient(&model, std::slice::from_ref(&task), &cfg(MetaAlgorithm::Cavia)).unwrap();
        task.descriptor = vec![0.0, 0.0];
        let without = meta_gradient(&model, &[task], &cfg(MetaAlgorithm::Cavia)).unwrap();
        assert_eq!(with, without);
    }

    #[test]
    fn adapt_and_eval_step_zero_is_unadapted_loss_and_deterministic() {
        let (model, task) = scalar_task_model();
        let evals = adapt_and_eval(&model, &task, LossKind::Mse, 0.1, 3).unwrap();
        assert!((evals[0].loss - 1.0).abs() < 1e-12);
        let again = adapt_and_eval(&model, &task, LossKind::Mse, 0.1, 3).unwrap();
        for (a, b) in evals.iter().zip(&again) {
            assert_eq!(a.loss, b.loss);
        }
    }
}
