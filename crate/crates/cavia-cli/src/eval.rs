//! The `eval` command: per-task, per-step metrics with mean and 95%
//! confidence intervals.

use std::path::{Path, PathBuf};

use cavia::checkpoint::TrainingCheckpoint;
use cavia::metarl::{collect_episodes, rl_adapt_and_eval, GaussianPolicy, RlEvalConfig};
use cavia::metasup::{adapt_and_eval, maml_adapt_and_eval, LossKind, MetaAlgorithm};
use cavia::models::ContextModel;
use cavia::tasks::dump_tasks_csv;
use cavia::util::{ci95, mean};
use cavia::{CaviaError, Result};

use crate::config::{RunConfig, Suite};
use crate::output::CsvWriter;
use crate::suites;

#[derive(Debug, Clone)]
pub struct EvalRow {
    pub task_id: usize,
    pub group: String,
    pub step: usize,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct SummaryRow {
    pub group: String,
    pub step: usize,
    pub mean: f64,
    pub ci95: f64,
    pub n: usize,
}

pub struct EvalOutputs {
    pub rows: Vec<EvalRow>,
    pub summary: Vec<SummaryRow>,
}

impl EvalOutputs {
    pub fn summary_at(&self, group: &str, step: usize) -> Option<&SummaryRow> {
        self.summary.iter().find(|s| s.group == group && s.step == step)
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub num_tasks: usize,
    pub steps: usize,
    pub seed: u64,
    pub inner_lr: Option<f64>,
    pub dump_tasks: Option<PathBuf>,
    pub dump_trajectories: bool,
}

/// Algorithm recorded in the checkpoint, falling back to the run config.
fn checkpoint_algorithm(tc: &TrainingCheckpoint, cfg: &RunConfig) -> MetaAlgorithm {
    match tc.meta.get("algorithm") {
        Some(&v) if v == 1.0 => MetaAlgorithm::Maml,
        Some(_) => MetaAlgorithm::Cavia,
        None => cfg.algorithm,
    }
}

fn validate_dims(model: &ContextModel, cfg: &RunConfig) -> Result<()> {
    let (din, dout) = match cfg.suite {
        Suite::Sine => (1, 1),
        Suite::Completion => (2, 3),
        Suite::Fewshot => (cfg.fs_dim, cfg.n_way),
        Suite::Nav2d => (2, 2),
    };
    if model.arch.input_dim != din || model.arch.output_dim != dout {
        return Err(CaviaError::Load(format!(
            "checkpoint model is {}x{} but suite {} expects {}x{}",
            model.arch.input_dim,
            model.arch.output_dim,
            cfg.suite.name(),
            din,
            dout
        )));
    }
    Ok(())
}

pub fn summarize(rows: &[EvalRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, usize)> = Vec::new();
    for r in rows {
        let key = (r.group.clone(), r.step);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(group, step)| {
            let values: Vec<f64> = rows
                .iter()
                .filter(|r| r.group == group && r.step == step)
                .map(|r| r.value)
                .collect();
            SummaryRow {
                group,
                step,
                mean: mean(&values),
                ci95: ci95(&values),
                n: values.len(),
            }
        })
        .collect()
}

pub fn run_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    out_dir: &Path,
    opts: &EvalOptions,
) -> Result<EvalOutputs> {
    std::fs::create_dir_all(out_dir)?;
    let tc = TrainingCheckpoint::load(checkpoint)?;
    validate_dims(&tc.model, cfg)?;
    let algorithm = checkpoint_algorithm(&tc, cfg);
    let inner_lr = opts.inner_lr.or_else(|| tc.meta.get("inner_lr").copied()).unwrap_or(cfg.inner_lr);

    let rows = match cfg.suite {
        Suite::Nav2d => eval_nav(cfg, &tc, algorithm, inner_lr, opts, out_dir)?,
        _ => eval_supervised(cfg, &tc, algorithm, inner_lr, opts)?,
    };
    let summary = summarize(&rows);

    let hash = cfg.manifest_hash();
    let mut w = CsvWriter::create(&out_dir.join("eval.csv"), &hash, "task_id,group,step,value")?;
    for r in &rows {
        w.row(&[r.task_id.into(), r.group.as_str().into(), r.step.into(), r.value.into()])?;
    }
    w.finish()?;
    let mut w = CsvWriter::create(
        &out_dir.join("eval_summary.csv"),
        &hash,
        "group,step,mean,ci95,n",
    )?;
    for s in &summary {
        w.row(&[s.group.as_str().into(), s.step.into(), s.mean.into(), s.ci95.into(), s.n.into()])?;
    }
    w.finish()?;
    Ok(EvalOutputs { rows, summary })
}

fn eval_supervised(
    cfg: &RunConfig,
    tc: &TrainingCheckpoint,
    algorithm: MetaAlgorithm,
    inner_lr: f64,
    opts: &EvalOptions,
) -> Result<Vec<EvalRow>> {
    let kind = suites::loss_kind(cfg.suite);
    let groups = suites::sample_eval_groups(cfg, opts.seed, opts.num_tasks)?;
    if let Some(path) = &opts.dump_tasks {
        let all: Vec<_> = groups.iter().flat_map(|(_, tasks)| tasks.clone()).collect();
        let file = std::fs::File::create(path)?;
        dump_tasks_csv(&all, std::io::BufWriter::new(file))?;
    }
    let mut rows = Vec::new();
    for (group, tasks) in &groups {
        for (task_id, task) in tasks.iter().enumerate() {
            let evals = match algorithm {
                MetaAlgorithm::Cavia => adapt_and_eval(&tc.model, task, kind, inner_lr, opts.steps)?,
                MetaAlgorithm::Maml => {
                    maml_adapt_and_eval(&tc.model, task, kind, inner_lr, opts.steps)?
                }
            };
            for (step, eval) in evals.iter().enumerate() {
                match kind {
                    LossKind::Mse => rows.push(EvalRow {
                        task_id,
                        group: group.clone(),
                        step,
                        value: eval.loss,
                    }),
                    LossKind::SoftmaxXent => {
                        let prefix = if group.is_empty() { String::new() } else { format!("{group}/") };
                        rows.push(EvalRow {
                            task_id,
                            group: format!("{prefix}xent"),
                            step,
                            value: eval.loss,
                        });
                        rows.push(EvalRow {
                            task_id,
                            group: format!("{prefix}accuracy"),
                            step,
                            value: eval.accuracy.expect("classification eval has accuracy"),
                        });
                    }
                }
            }
        }
    }
    Ok(rows)
}

fn eval_nav(
    cfg: &RunConfig,
    tc: &TrainingCheckpoint,
    algorithm: MetaAlgorithm,
    inner_lr: f64,
    opts: &EvalOptions,
    out_dir: &Path,
) -> Result<Vec<EvalRow>> {
    let policy = GaussianPolicy::from_model(tc.model.clone())?;
    let mut rng = suites::eval_rng(opts.seed);
    let goals = suites::sample_goals(&mut rng, opts.num_tasks);
    let eval_cfg = RlEvalConfig {
        algorithm,
        inner_lr,
        gamma: cfg.discount,
        adapt_interactions: cfg.rl_adapt_interactions,
        eval_episodes: cfg.rl_eval_episodes,
        lr_halving: algorithm == MetaAlgorithm::Maml,
    };
    let per_goal = rl_adapt_and_eval(&policy, &goals, opts.steps, &eval_cfg, &mut rng)?;
    if opts.dump_trajectories {
        dump_nav_trajectories(cfg, &policy, &goals, inner_lr, out_dir, opts.seed)?;
    }
    Ok(per_goal
        .iter()
        .enumerate()
        .flat_map(|(task_id, returns)| {
            returns.iter().enumerate().map(move |(step, &value)| EvalRow {
                task_id,
                group: String::new(),
                step,
                value,
            })
        })
        .collect())
}

/// Example rollouts before and after one context update, for plotting.
fn dump_nav_trajectories(
    cfg: &RunConfig,
    policy: &GaussianPolicy,
    goals: &[[f64; 2]],
    inner_lr: f64,
    out_dir: &Path,
    seed: u64,
) -> Result<()> {
    use cavia::autodiff::{Graph, TensorData};
    use cavia::metarl::{collect_rollout, rl_inner_adapt, write_trajectories_csv};

    let mut rng = suites::eval_rng(seed ^ 0x7472_616a);
    let count = goals.len().min(5);
    let mut pre = Vec::new();
    let mut post = Vec::new();
    for &goal in goals.iter().take(count) {
        let zero = vec![0.0; policy.net.arch.context_dim];
        pre.push(collect_episodes(policy, &zero, goal, 2, &mut rng)?);

        let traj = collect_rollout(policy, &zero, goal, cfg.rl_adapt_interactions, &mut rng)?;
        let graph = Graph::new();
        let mut bound = policy.bind(&graph);
        bound.net.set_phi(graph.leaf(&TensorData::vector(zero.clone()), true));
        rl_inner_adapt(&mut bound, &traj, inner_lr, cfg.discount, false)?;
        let phi = bound.net.phi().values();
        post.push(collect_episodes(policy, &phi, goal, 2, &mut rng)?);
    }
    let pre_refs: Vec<_> = pre.iter().enumerate().map(|(i, t)| (i, t)).collect();
    let post_refs: Vec<_> = post.iter().enumerate().map(|(i, t)| (i, t)).collect();
    let f = std::fs::File::create(out_dir.join("trajectories_pre.csv"))?;
    write_trajectories_csv(&pre_refs, std::io::BufWriter::new(f))?;
    let f = std::fs::File::create(out_dir.join("trajectories_post.csv"))?;
    write_trajectories_csv(&post_refs, std::io::BufWriter::new(f))?;
    Ok(())
}
