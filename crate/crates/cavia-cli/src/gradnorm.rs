//! The `gradnorm` command: mean context-gradient norm before the first
//! update, one row per checkpoint's trained inner learning rate.

use std::path::{Path, PathBuf};

use cavia::checkpoint::TrainingCheckpoint;
use cavia::metasup::mean_context_grad_norm;
use cavia::models::ContextRole;
use cavia::{CaviaError, Result};

use crate::config::RunConfig;
use crate::output::CsvWriter;
use crate::suites;

pub struct GradnormOptions {
    pub num_tasks: usize,
    pub seed: u64,
    /// Learning rates that must be covered by the given checkpoints.
    pub required_lrs: Vec<f64>,
}

pub struct GradnormOutputs {
    /// (inner_lr, mean context-gradient norm), ascending in learning rate.
    pub rows: Vec<(f64, f64)>,
}

pub fn run_gradnorm(
    cfg: &RunConfig,
    checkpoints: &[PathBuf],
    out_dir: &Path,
    opts: &GradnormOptions,
) -> Result<GradnormOutputs> {
    std::fs::create_dir_all(out_dir)?;
    if checkpoints.is_empty() {
        return Err(CaviaError::Config("gradnorm needs at least one checkpoint".into()));
    }
    let kind = suites::loss_kind(cfg.suite);
    let mut rows = Vec::with_capacity(checkpoints.len());
    for path in checkpoints {
        let tc = TrainingCheckpoint::load(path)?;
        if tc.model.arch.context_role != ContextRole::InnerContext {
            return Err(CaviaError::Config(format!(
                "{}: context-gradient norms need a model with context parameters",
                path.display()
            )));
        }
        let lr = *tc.meta.get("inner_lr").ok_or_else(|| {
            CaviaError::Config(format!("{}: checkpoint lacks an inner_lr record", path.display()))
        })?;
        // Same task set for every checkpoint.
        let groups = suites::sample_eval_groups(cfg, opts.seed, opts.num_tasks)?;
        let tasks = &groups[0].1;
        rows.push((lr, mean_context_grad_norm(&tc.model, tasks, kind)?));
    }
    for &required in &opts.required_lrs {
        if !rows.iter().any(|(lr, _)| (lr - required).abs() < 1e-12) {
            return Err(CaviaError::Config(format!(
                "no checkpoint provided for inner_lr {required}"
            )));
        }
    }
    rows.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

    let mut w = CsvWriter::create(
        &out_dir.join("gradnorm.csv"),
        &cfg.manifest_hash(),
        "inner_lr,mean_context_grad_norm",
    )?;
    for &(lr, norm) in &rows {
        w.row(&[lr.into(), norm.into()])?;
    }
    w.finish()?;
    Ok(GradnormOutputs { rows })
}
