//! The `sweep` command: train and evaluate one run per (value, seed) cell of
//! a swept parameter, aggregating post-adaptation metrics. Failed cells are
//! recorded and skipped, not fatal.

use std::path::Path;

use cavia::{CaviaError, Result};

use crate::config::{parse_kv_text, RunConfig};
use crate::eval::{run_eval, EvalOptions};
use crate::output::CsvWriter;
use crate::train::run_train;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweptParameter {
    InnerLr,
    ContextDim,
    HiddenWidth,
}

impl SweptParameter {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "inner_lr" => Ok(Self::InnerLr),
            "context_dim" | "num_context_params" => Ok(Self::ContextDim),
            "hidden_width" => Ok(Self::HiddenWidth),
            other => Err(CaviaError::Config(format!("unknown swept parameter {other:?}"))),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::InnerLr => "inner_lr",
            Self::ContextDim => "context_dim",
            Self::HiddenWidth => "hidden_width",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub parameter: SweptParameter,
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl SweepSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let mut parameter = None;
        let mut values = Vec::new();
        let mut seeds = Vec::new();
        for (k, v) in parse_kv_text(text)? {
            match k.as_str() {
                "parameter" => parameter = Some(SweptParameter::parse(&v)?),
                "values" => {
                    values = v
                        .split(',')
                        .map(|t| {
                            t.trim()
                                .parse::<f64>()
                                .map_err(|_| CaviaError::Config(format!("bad sweep value {t:?}")))
                        })
                        .collect::<Result<_>>()?
                }
                "seeds" => {
                    seeds = v
                        .split(',')
                        .map(|t| {
                            t.trim()
                                .parse::<u64>()
                                .map_err(|_| CaviaError::Config(format!("bad sweep seed {t:?}")))
                        })
                        .collect::<Result<_>>()?
                }
                other => {
                    return Err(CaviaError::Config(format!("unknown sweep key {other:?}")))
                }
            }
        }
        let parameter =
            parameter.ok_or_else(|| CaviaError::Config("sweep file needs a parameter".into()))?;
        if values.is_empty() {
            return Err(CaviaError::Config("sweep needs a nonempty value list".into()));
        }
        if seeds.is_empty() {
            seeds.push(1);
        }
        Ok(Self { parameter, values, seeds })
    }

    fn apply(&self, cfg: &mut RunConfig, value: f64, seed: u64) -> Result<()> {
        match self.parameter {
            SweptParameter::InnerLr => cfg.inner_lr = value,
            SweptParameter::ContextDim => cfg.context_dim = value as usize,
            SweptParameter::HiddenWidth => {
                let width = value as usize;
                cfg.hidden = vec![width; cfg.hidden.len()];
            }
        }
        cfg.seed = seed;
        cfg.validate()
    }
}

#[derive(Debug, Clone)]
pub struct SweepCell {
    pub value: f64,
    pub seed: u64,
    pub status: String,
    pub mean: Option<f64>,
    pub ci95: Option<f64>,
}

pub struct SweepOutputs {
    pub cells: Vec<SweepCell>,
}

/// Post-adaptation metric of one evaluated cell: the mean at the trained
/// adaptation depth, averaged over groups when the suite has several.
fn cell_metric(outputs: &crate::eval::EvalOutputs, step: usize) -> Option<(f64, f64)> {
    let at_step: Vec<_> = outputs.summary.iter().filter(|s| s.step == step).collect();
    if at_step.is_empty() {
        return None;
    }
    let mean = at_step.iter().map(|s| s.mean).sum::<f64>() / at_step.len() as f64;
    let ci = at_step.iter().map(|s| s.ci95).sum::<f64>() / at_step.len() as f64;
    Some((mean, ci))
}

pub fn run_sweep(spec: &SweepSpec, base: &RunConfig, out_dir: &Path) -> Result<SweepOutputs> {
    std::fs::create_dir_all(out_dir)?;
    let mut cells = Vec::new();
    for &value in &spec.values {
        for &seed in &spec.seeds {
            let mut cfg = base.clone();
            if let Err(e) = spec.apply(&mut cfg, value, seed) {
                cells.push(SweepCell {
                    value,
                    seed,
                    status: format!("config-error: {e}"),
                    mean: None,
                    ci95: None,
                });
                continue;
            }
            let cell_dir = out_dir
                .join("cells")
                .join(format!("{}={value}", spec.parameter.name()))
                .join(format!("seed={seed}"));
            let cell = match run_cell(&cfg, &cell_dir) {
                Ok((mean, ci)) => SweepCell {
                    value,
                    seed,
                    status: "ok".into(),
                    mean: Some(mean),
                    ci95: Some(ci),
                },
                Err(CaviaError::Divergence { iteration, .. }) => SweepCell {
                    value,
                    seed,
                    status: format!("diverged@{iteration}"),
                    mean: None,
                    ci95: None,
                },
                Err(other) => return Err(other),
            };
            cells.push(cell);
        }
    }

    let mut w = CsvWriter::create(
        &out_dir.join("sweep.csv"),
        &base.manifest_hash(),
        &format!("{},seed,status,mean,ci95", spec.parameter.name()),
    )?;
    for c in &cells {
        w.row(&[
            c.value.into(),
            (c.seed as usize).into(),
            c.status.as_str().into(),
            c.mean.unwrap_or(f64::NAN).into(),
            c.ci95.unwrap_or(f64::NAN).into(),
        ])?;
    }
    w.finish()?;
    Ok(SweepOutputs { cells })
}

fn run_cell(cfg: &RunConfig, cell_dir: &Path) -> Result<(f64, f64)> {
    let outputs = run_train(cfg, cell_dir)?;
    let eval = run_eval(
        cfg,
        &outputs.best_checkpoint,
        &cell_dir.join("eval"),
        &EvalOptions {
            num_tasks: cfg.eval_tasks,
            steps: cfg.eval_steps.max(cfg.inner_steps),
            seed: cfg.seed,
            inner_lr: None,
            dump_tasks: None,
            dump_trajectories: false,
        },
    )?;
    cell_metric(&eval, cfg.inner_steps)
        .ok_or_else(|| CaviaError::Contract("evaluation produced no summary rows".into()))
}
