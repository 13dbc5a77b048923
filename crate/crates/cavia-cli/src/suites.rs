//! Wiring from a [`RunConfig`] to models, task samplers and algorithm
//! configurations for each suite.

use cavia::metarl::{GaussianPolicy, RlConfig};
use cavia::metasup::{LossKind, MetaAlgorithm, MetaConfig, SupervisedTask};
use cavia::models::{Architecture, ContextModel, ContextRole};
use cavia::tasks::{
    CompletionSampler, FewShotConfig, FewShotSampler, PixelOrder, SineTaskSampler, Split,
};
use cavia::{CaviaError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{RunConfig, Suite};

/// Sub-stream salts so training, validation and evaluation never share RNG
/// state.
const VAL_SALT: u64 = 0x7661_6c69;
const EVAL_SALT: u64 = 0x6576_616c;
/// Class pools are part of the suite definition, not of a particular run.
const POOL_SEED: u64 = 2024;

pub fn train_rng(cfg: &RunConfig) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(cfg.seed)
}

pub fn val_rng(cfg: &RunConfig) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(cfg.seed ^ VAL_SALT)
}

pub fn eval_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ EVAL_SALT)
}

pub fn loss_kind(suite: Suite) -> LossKind {
    match suite {
        Suite::Fewshot => LossKind::SoftmaxXent,
        _ => LossKind::Mse,
    }
}

fn io_dims(cfg: &RunConfig) -> (usize, usize) {
    match cfg.suite {
        Suite::Sine => (1, 1),
        Suite::Completion => (2, 3),
        Suite::Fewshot => (cfg.fs_dim, cfg.n_way),
        Suite::Nav2d => (2, 2),
    }
}

fn context_role(cfg: &RunConfig) -> ContextRole {
    match cfg.algorithm {
        MetaAlgorithm::Cavia => ContextRole::InnerContext,
        // The baseline gets the same number of extra inputs, wired
        // identically but meta-learned with the rest of the parameters.
        MetaAlgorithm::Maml => ContextRole::ThetaInputBias,
    }
}

pub fn supervised_arch(cfg: &RunConfig) -> Architecture {
    let (input_dim, output_dim) = io_dims(cfg);
    let mut arch = Architecture::mlp(input_dim, cfg.hidden.clone(), output_dim, cfg.context_dim);
    arch.context_role = context_role(cfg);
    arch
}

pub fn build_supervised_model(cfg: &RunConfig) -> Result<ContextModel> {
    ContextModel::init(supervised_arch(cfg), cfg.seed)
}

pub fn build_policy(cfg: &RunConfig) -> Result<GaussianPolicy> {
    let mut arch = Architecture::mlp(2, cfg.hidden.clone(), 2, cfg.context_dim);
    arch.context_role = context_role(cfg);
    let mut net = ContextModel::init(arch, cfg.seed)?;
    net.theta.insert(
        "log_std".into(),
        cavia::autodiff::TensorData::vector(vec![0.0, 0.0]),
    );
    GaussianPolicy::from_model(net)
}

pub fn meta_config(cfg: &RunConfig) -> MetaConfig {
    MetaConfig {
        algorithm: cfg.algorithm,
        context_dim: cfg.context_dim,
        inner_lr: cfg.inner_lr,
        inner_steps: cfg.inner_steps,
        meta_batch: cfg.meta_batch,
        first_order: cfg.first_order,
        loss: loss_kind(cfg.suite),
        seed: cfg.seed,
    }
}

pub fn rl_config(cfg: &RunConfig) -> RlConfig {
    RlConfig {
        algorithm: cfg.algorithm,
        inner_lr: cfg.inner_lr,
        gamma: cfg.discount,
        first_order: cfg.first_order,
        m_train: cfg.rl_m_train,
        m_test: cfg.rl_m_test,
    }
}

pub fn fewshot_sampler(cfg: &RunConfig) -> FewShotSampler {
    FewShotSampler::new(FewShotConfig {
        n_way: cfg.n_way,
        k_shot: cfg.k_shot,
        query: cfg.query,
        dim: cfg.fs_dim,
        train_classes: cfg.fs_train_classes,
        val_classes: cfg.fs_val_classes,
        test_classes: cfg.fs_test_classes,
        mean_range: cfg.fs_mean_range,
        cluster_std: cfg.fs_cluster_std,
        pool_seed: POOL_SEED,
    })
}

/// A batch of training tasks for the supervised suites.
pub fn sample_train_batch(cfg: &RunConfig, rng: &mut ChaCha8Rng) -> Result<Vec<SupervisedTask>> {
    let n = cfg.meta_batch;
    match cfg.suite {
        Suite::Sine => {
            let sampler = SineTaskSampler::with_sizes(cfg.m_train, cfg.train_m_test);
            Ok((0..n).map(|_| sampler.sample(rng)).collect())
        }
        Suite::Completion => (0..n)
            .map(|_| {
                let budget = cfg.shots[rng.gen_range(0..cfg.shots.len())];
                CompletionSampler::new(cfg.grid, budget, PixelOrder::Random).sample(rng)
            })
            .collect(),
        Suite::Fewshot => {
            let sampler = fewshot_sampler(cfg);
            (0..n)
                .map(|_| Ok(sampler.sample_episode(rng, Split::MetaTrain)?.to_task()))
                .collect()
        }
        Suite::Nav2d => Err(CaviaError::Contract(
            "nav2d uses goal batches, not supervised tasks".into(),
        )),
    }
}

/// Fixed validation task set (sampled once per run from the salted stream).
pub fn sample_val_tasks(cfg: &RunConfig) -> Result<Vec<SupervisedTask>> {
    let mut rng = val_rng(cfg);
    let n = cfg.val_tasks;
    match cfg.suite {
        Suite::Sine => {
            let sampler = SineTaskSampler::with_sizes(cfg.m_train, cfg.eval_m_test);
            Ok((0..n).map(|_| sampler.sample(&mut rng)).collect())
        }
        Suite::Completion => (0..n)
            .map(|_| {
                let budget = cfg.shots[rng.gen_range(0..cfg.shots.len())];
                CompletionSampler::new(cfg.grid, budget, PixelOrder::Random).sample(&mut rng)
            })
            .collect(),
        Suite::Fewshot => {
            let sampler = fewshot_sampler(cfg);
            (0..n)
                .map(|_| Ok(sampler.sample_episode(&mut rng, Split::MetaVal)?.to_task()))
                .collect()
        }
        Suite::Nav2d => Err(CaviaError::Contract("nav2d validates on goals".into())),
    }
}

/// Evaluation task groups: `(group label, tasks)`. Sine and few-shot emit a
/// single unlabeled group; completion crosses selection mode with the pixel
/// budgets.
pub fn sample_eval_groups(
    cfg: &RunConfig,
    seed: u64,
    num_tasks: usize,
) -> Result<Vec<(String, Vec<SupervisedTask>)>> {
    let mut rng = eval_rng(seed);
    match cfg.suite {
        Suite::Sine => {
            let sampler = SineTaskSampler::with_sizes(cfg.m_train, cfg.eval_m_test);
            Ok(vec![(String::new(), (0..num_tasks).map(|_| sampler.sample(&mut rng)).collect())])
        }
        Suite::Completion => {
            let mut groups = Vec::new();
            for (mode, label) in [(PixelOrder::Random, "random"), (PixelOrder::Ordered, "ordered")] {
                for &k in &cfg.shots {
                    let sampler = CompletionSampler::new(cfg.grid, k, mode);
                    let tasks: Result<Vec<_>> =
                        (0..num_tasks).map(|_| sampler.sample(&mut rng)).collect();
                    groups.push((format!("{label}/k={k}"), tasks?));
                }
            }
            Ok(groups)
        }
        Suite::Fewshot => {
            let sampler = fewshot_sampler(cfg);
            let tasks: Result<Vec<_>> = (0..num_tasks)
                .map(|_| Ok(sampler.sample_episode(&mut rng, Split::MetaTest)?.to_task()))
                .collect();
            Ok(vec![(String::new(), tasks?)])
        }
        Suite::Nav2d => Err(CaviaError::Contract("nav2d evaluates on goals".into())),
    }
}

pub fn sample_goals(rng: &mut ChaCha8Rng, count: usize) -> Vec<[f64; 2]> {
    (0..count).map(|_| cavia::metarl::sample_goal(rng)).collect()
}
