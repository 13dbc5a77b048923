//! The `train` command: meta-training with periodic checkpoints, validation
//! snapshots and per-iteration diagnostics.

use std::path::{Path, PathBuf};
use std::time::Instant;

use cavia::checkpoint::TrainingCheckpoint;
use cavia::metarl::{rl_adapt_and_eval, rl_meta_step, GaussianPolicy, RlEvalConfig};
use cavia::metasup::{
    adapt_and_eval, maml_adapt_and_eval, meta_train_step, MetaAlgorithm, SupervisedTask,
};
use cavia::models::ContextModel;
use cavia::optim::{AdamHyper, AdamState};
use cavia::util::mean;
use cavia::{CaviaError, Result};
use indexmap::IndexMap;

use crate::config::{RunConfig, Suite, ARTIFACT_VERSION};
use crate::output::CsvWriter;
use crate::suites;

pub struct TrainOutputs {
    pub out_dir: PathBuf,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
}

fn checkpoint_meta(cfg: &RunConfig, iteration: usize) -> IndexMap<String, f64> {
    let mut meta = IndexMap::new();
    meta.insert("iteration".to_string(), iteration as f64);
    meta.insert("inner_lr".to_string(), cfg.inner_lr);
    meta.insert("inner_steps".to_string(), cfg.inner_steps as f64);
    meta.insert(
        "algorithm".to_string(),
        match cfg.algorithm {
            MetaAlgorithm::Cavia => 0.0,
            MetaAlgorithm::Maml => 1.0,
        },
    );
    meta.insert("first_order".to_string(), cfg.first_order as u8 as f64);
    meta.insert(
        "suite".to_string(),
        match cfg.suite {
            Suite::Sine => 0.0,
            Suite::Completion => 1.0,
            Suite::Fewshot => 2.0,
            Suite::Nav2d => 3.0,
        },
    );
    meta.insert("seed".to_string(), cfg.seed as f64);
    meta
}

pub fn write_manifest(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let mut text = String::new();
    text.push_str(&format!("# run manifest ({ARTIFACT_VERSION})\n"));
    text.push_str(&format!("manifest_hash = {}\n", cfg.manifest_hash()));
    text.push_str(&format!(
        "started_unix = {}\n",
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0)
    ));
    text.push_str(&format!("out_dir = {}\n", out_dir.display()));
    text.push_str("# deterministic configuration (hash input) follows\n");
    text.push_str(&cfg.manifest_body());
    std::fs::write(out_dir.join("manifest.txt"), text)?;
    Ok(())
}

fn write_failure_record(out_dir: &Path, err: &CaviaError) {
    let _ = std::fs::write(out_dir.join("failure.txt"), format!("{err}\n"));
}

pub fn run_train(cfg: &RunConfig, out_dir: &Path) -> Result<TrainOutputs> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    write_manifest(cfg, out_dir)?;
    match cfg.suite {
        Suite::Nav2d => train_rl(cfg, out_dir),
        _ => train_supervised(cfg, out_dir),
    }
    .inspect_err(|e| write_failure_record(out_dir, e))
}

fn save(
    model: &ContextModel,
    adam: &AdamState,
    cfg: &RunConfig,
    iteration: usize,
    path: &Path,
) -> Result<()> {
    TrainingCheckpoint {
        model: model.clone(),
        adam: Some(adam.clone()),
        meta: checkpoint_meta(cfg, iteration),
    }
    .save(path)
}

/// Validation metric at the trained adaptation depth (lower is better).
fn validation_loss(model: &ContextModel, cfg: &RunConfig, tasks: &[SupervisedTask]) -> Result<f64> {
    let kind = suites::loss_kind(cfg.suite);
    let mut losses = Vec::with_capacity(tasks.len());
    for task in tasks {
        let evals = match cfg.algorithm {
            MetaAlgorithm::Cavia => adapt_and_eval(model, task, kind, cfg.inner_lr, cfg.inner_steps)?,
            MetaAlgorithm::Maml => {
                maml_adapt_and_eval(model, task, kind, cfg.inner_lr, cfg.inner_steps)?
            }
        };
        losses.push(evals[cfg.inner_steps].loss);
    }
    Ok(mean(&losses))
}

fn train_supervised(cfg: &RunConfig, out_dir: &Path) -> Result<TrainOutputs> {
    let mut model = suites::build_supervised_model(cfg)?;
    let mut adam = AdamState::new(AdamHyper::with_lr(cfg.outer_lr), &model.theta);
    let mcfg = suites::meta_config(cfg);
    mcfg.validate()?;
    let val_tasks = suites::sample_val_tasks(cfg)?;
    let mut rng = suites::train_rng(cfg);

    let hash = cfg.manifest_hash();
    let mut diag = CsvWriter::create(
        &out_dir.join("training.csv"),
        &hash,
        "iteration,pre_adapt_loss,post_adapt_loss,meta_grad_norm,wall_time_s",
    )?;
    let best_path = out_dir.join("ckpt_best.txt");
    let final_path = out_dir.join("ckpt_final.txt");
    let started = Instant::now();
    let mut best_val = f64::INFINITY;
    let mut best_saved = false;

    for iter in 0..cfg.iterations {
        let tasks = suites::sample_train_batch(cfg, &mut rng)?;
        let step = meta_train_step(&mut model, &tasks, &mcfg, &mut adam).map_err(|e| match e {
            CaviaError::Divergence { detail, .. } => {
                CaviaError::Divergence { iteration: iter, detail }
            }
            other => other,
        })?;
        diag.row(&[
            iter.into(),
            step.pre_adapt_loss.into(),
            step.post_adapt_loss.into(),
            step.meta_grad_norm.into(),
            started.elapsed().as_secs_f64().into(),
        ])?;

        let done = iter + 1;
        if cfg.val_every > 0 && done % cfg.val_every == 0 {
            let val = validation_loss(&model, cfg, &val_tasks)?;
            if val < best_val {
                best_val = val;
                save(&model, &adam, cfg, done, &best_path)?;
                best_saved = true;
            }
        }
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            save(&model, &adam, cfg, done, &out_dir.join(format!("ckpt_iter_{done:06}.txt")))?;
        }
    }
    diag.finish()?;
    save(&model, &adam, cfg, cfg.iterations, &final_path)?;
    if !best_saved {
        std::fs::copy(&final_path, &best_path)?;
    }
    Ok(TrainOutputs {
        out_dir: out_dir.to_path_buf(),
        final_checkpoint: final_path,
        best_checkpoint: best_path,
    })
}

fn save_policy(
    policy: &GaussianPolicy,
    adam: &AdamState,
    cfg: &RunConfig,
    iteration: usize,
    path: &Path,
) -> Result<()> {
    save(&policy.net, adam, cfg, iteration, path)
}

fn train_rl(cfg: &RunConfig, out_dir: &Path) -> Result<TrainOutputs> {
    let mut policy = suites::build_policy(cfg)?;
    let mut adam = AdamState::new(AdamHyper::with_lr(cfg.outer_lr), &policy.net.theta);
    let rlcfg = suites::rl_config(cfg);
    let val_goals = suites::sample_goals(&mut suites::val_rng(cfg), cfg.val_tasks);
    let mut rng = suites::train_rng(cfg);

    let hash = cfg.manifest_hash();
    let mut diag = CsvWriter::create(
        &out_dir.join("training.csv"),
        &hash,
        "iteration,pre_update_return,post_update_return,meta_grad_norm,wall_time_s",
    )?;
    let best_path = out_dir.join("ckpt_best.txt");
    let final_path = out_dir.join("ckpt_final.txt");
    let started = Instant::now();
    let mut best_val = f64::NEG_INFINITY;
    let mut best_saved = false;

    for iter in 0..cfg.iterations {
        let goals = suites::sample_goals(&mut rng, cfg.meta_batch);
        let step = rl_meta_step(&mut policy, &goals, &rlcfg, &mut adam, &mut rng).map_err(
            |e| match e {
                CaviaError::Divergence { detail, .. } => {
                    CaviaError::Divergence { iteration: iter, detail }
                }
                other => other,
            },
        )?;
        diag.row(&[
            iter.into(),
            step.pre_update_return.into(),
            step.post_update_return.into(),
            step.meta_grad_norm.into(),
            started.elapsed().as_secs_f64().into(),
        ])?;

        let done = iter + 1;
        if cfg.val_every > 0 && done % cfg.val_every == 0 {
            // Fresh stream with a fixed seed: validation noise is identical
            // across snapshots, so scores are comparable.
            let mut vrng = suites::val_rng(cfg);
            let returns = rl_adapt_and_eval(
                &policy,
                &val_goals,
                1,
                &RlEvalConfig {
                    algorithm: cfg.algorithm,
                    inner_lr: cfg.inner_lr,
                    gamma: cfg.discount,
                    adapt_interactions: cfg.rl_adapt_interactions,
                    eval_episodes: 4,
                    lr_halving: cfg.algorithm == MetaAlgorithm::Maml,
                },
                &mut vrng,
            )?;
            let val = mean(&returns.iter().map(|r| r[1]).collect::<Vec<_>>());
            if val > best_val {
                best_val = val;
                save_policy(&policy, &adam, cfg, done, &best_path)?;
                best_saved = true;
            }
        }
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            save_policy(&policy, &adam, cfg, done, &out_dir.join(format!("ckpt_iter_{done:06}.txt")))?;
        }
    }
    diag.finish()?;
    save_policy(&policy, &adam, cfg, cfg.iterations, &final_path)?;
    if !best_saved {
        std::fs::copy(&final_path, &best_path)?;
    }
    Ok(TrainOutputs {
        out_dir: out_dir.to_path_buf(),
        final_checkpoint: final_path,
        best_checkpoint: best_path,
    })
}
