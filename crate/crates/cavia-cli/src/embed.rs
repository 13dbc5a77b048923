//! The `embed` command: adapt the context vector on fresh tasks, dump it next
//! to the task descriptor and fit a linear readout from context to
//! descriptor features.

use std::path::Path;

use cavia::analysis::linear_readout_r2;
use cavia::autodiff::{Graph, TensorData};
use cavia::checkpoint::TrainingCheckpoint;
use cavia::metarl::{collect_rollout, rl_inner_adapt, GaussianPolicy};
use cavia::metasup::inner_adapt;
use cavia::models::ContextRole;
use cavia::{CaviaError, Result};

use crate::config::{RunConfig, Suite};
use crate::output::CsvWriter;
use crate::suites;

pub struct EmbedOptions {
    pub num_tasks: usize,
    pub adapt_steps: usize,
    pub seed: u64,
    pub inner_lr: Option<f64>,
}

pub struct EmbedOutputs {
    /// (feature name, R^2 of the linear readout).
    pub readout: Vec<(String, f64)>,
    pub rows: usize,
}

pub fn run_embed(
    cfg: &RunConfig,
    checkpoint: &Path,
    out_dir: &Path,
    opts: &EmbedOptions,
) -> Result<EmbedOutputs> {
    std::fs::create_dir_all(out_dir)?;
    let tc = TrainingCheckpoint::load(checkpoint)?;
    if tc.model.arch.context_role != ContextRole::InnerContext || tc.model.arch.context_dim == 0 {
        return Err(CaviaError::Config(
            "embedding analysis needs a model with adaptable context parameters".into(),
        ));
    }
    let inner_lr = opts.inner_lr.or_else(|| tc.meta.get("inner_lr").copied()).unwrap_or(cfg.inner_lr);

    // (descriptor features, adapted context) per task.
    let (feature_names, descriptors, phis): (Vec<String>, Vec<Vec<f64>>, Vec<Vec<f64>>) =
        match cfg.suite {
            Suite::Sine => {
                let kind = suites::loss_kind(cfg.suite);
                let groups = suites::sample_eval_groups(cfg, opts.seed, opts.num_tasks)?;
                let tasks = &groups[0].1;
                let mut descriptors = Vec::with_capacity(tasks.len());
                let mut phis = Vec::with_capacity(tasks.len());
                for task in tasks {
                    let graph = Graph::new();
                    let mut bound = tc.model.bind(&graph);
                    bound.reset_context();
                    let train_x = graph.constant(&task.train_x);
                    inner_adapt(
                        &mut bound,
                        &train_x,
                        &task.train_y,
                        kind,
                        inner_lr,
                        opts.adapt_steps,
                        false,
                    )?;
                    descriptors.push(task.descriptor.clone());
                    phis.push(bound.phi().values());
                }
                (
                    vec!["amplitude".into(), "phase".into()],
                    descriptors,
                    phis,
                )
            }
            Suite::Nav2d => {
                let policy = GaussianPolicy::from_model(tc.model.clone())?;
                let mut rng = suites::eval_rng(opts.seed);
                let goals = suites::sample_goals(&mut rng, opts.num_tasks);
                let mut descriptors = Vec::with_capacity(goals.len());
                let mut phis = Vec::with_capacity(goals.len());
                for &goal in &goals {
                    let mut phi = vec![0.0; policy.net.arch.context_dim];
                    for _ in 0..opts.adapt_steps {
                        let traj =
                            collect_rollout(&policy, &phi, goal, cfg.rl_adapt_interactions, &mut rng)?;
                        let graph = Graph::new();
                        let mut bound = policy.bind(&graph);
                        bound.net.set_phi(graph.leaf(&TensorData::vector(phi.clone()), true));
                        rl_inner_adapt(&mut bound, &traj, inner_lr, cfg.discount, false)?;
                        phi = bound.net.phi().values();
                    }
                    descriptors.push(goal.to_vec());
                    phis.push(phi);
                }
                (vec!["goal_x".into(), "goal_y".into()], descriptors, phis)
            }
            other => {
                return Err(CaviaError::Config(format!(
                    "embedding analysis is defined for the sine and nav2d suites, not {}",
                    other.name()
                )))
            }
        };

    let hash = cfg.manifest_hash();
    let context_dim = phis.first().map(Vec::len).unwrap_or(0);
    let mut header = String::from("task_id");
    for name in &feature_names {
        header.push_str(&format!(",{name}"));
    }
    for k in 0..context_dim {
        header.push_str(&format!(",phi{k}"));
    }
    let mut w = CsvWriter::create(&out_dir.join("embedding.csv"), &hash, &header)?;
    for (task_id, (desc, phi)) in descriptors.iter().zip(&phis).enumerate() {
        let mut fields: Vec<crate::output::CsvField> = vec![task_id.into()];
        fields.extend(desc.iter().map(|&v| crate::output::CsvField::Float(v)));
        fields.extend(phi.iter().map(|&v| crate::output::CsvField::Float(v)));
        w.row(&fields)?;
    }
    w.finish()?;

    // Readout targets: amplitude plus the periodic embedding of phase for
    // sine, the goal coordinates for navigation.
    let targets: Vec<(String, Vec<f64>)> = match cfg.suite {
        Suite::Sine => vec![
            ("amplitude".into(), descriptors.iter().map(|d| d[0]).collect()),
            ("sin_phase".into(), descriptors.iter().map(|d| d[1].sin()).collect()),
            ("cos_phase".into(), descriptors.iter().map(|d| d[1].cos()).collect()),
        ],
        _ => vec![
            ("goal_x".into(), descriptors.iter().map(|d| d[0]).collect()),
            ("goal_y".into(), descriptors.iter().map(|d| d[1]).collect()),
        ],
    };
    let mut readout = Vec::with_capacity(targets.len());
    for (name, target) in targets {
        let r2 = linear_readout_r2(&phis, &target)?;
        readout.push((name, r2));
    }

    let mut w = CsvWriter::create(&out_dir.join("embedding_summary.csv"), &hash, "feature,r2")?;
    for (name, r2) in &readout {
        w.row(&[name.as_str().into(), (*r2).into()])?;
    }
    w.finish()?;
    Ok(EmbedOutputs { readout, rows: descriptors.len() })
}
