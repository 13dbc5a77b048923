use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cavia::CaviaError;
use cavia_cli::config::{resolve_config, Overrides};
use cavia_cli::embed::{run_embed, EmbedOptions};
use cavia_cli::eval::{run_eval, EvalOptions};
use cavia_cli::gradnorm::{run_gradnorm, GradnormOptions};
use cavia_cli::sweep::{run_sweep, SweepSpec};
use cavia_cli::train::run_train;

const EXIT_CONFIG: u8 = 2;
const EXIT_LOAD: u8 = 3;
const EXIT_DIVERGENCE: u8 = 4;

#[derive(Parser)]
#[command(name = "cavia", about = "Meta-learning experiments: context adaptation vs full adaptation", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct CommonFlags {
    /// Plain-text `key = value` configuration file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Task suite: sine | completion | fewshot | nav2d.
    #[arg(long)]
    suite: Option<String>,
    /// Algorithm: cavia | maml.
    #[arg(long)]
    algorithm: Option<String>,
    /// Drop the dependence of adapted parameters on theta in the meta-gradient.
    #[arg(long, default_value_t = false)]
    first_order: bool,
    /// Number of context parameters (extra inputs for the baseline).
    #[arg(long)]
    context_dim: Option<usize>,
    /// Inner-loop learning rate.
    #[arg(long)]
    inner_lr: Option<f64>,
    /// Inner-loop gradient steps during training.
    #[arg(long)]
    inner_steps: Option<usize>,
    /// Tasks per meta-update.
    #[arg(long)]
    meta_batch: Option<usize>,
    /// Run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl CommonFlags {
    fn overrides(&self) -> Overrides {
        Overrides {
            suite: self.suite.clone(),
            algorithm: self.algorithm.clone(),
            first_order: self.first_order,
            context_dim: self.context_dim,
            inner_lr: self.inner_lr,
            inner_steps: self.inner_steps,
            meta_batch: self.meta_batch,
            seed: self.seed,
            iterations: None,
            extra: Vec::new(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train a model, writing checkpoints and per-iteration diagnostics.
    Train {
        #[command(flatten)]
        common: CommonFlags,
        /// Outer-loop iteration count (suite default if omitted).
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Evaluate a checkpoint: per-task per-step metrics with 95% CIs.
    Eval {
        #[command(flatten)]
        common: CommonFlags,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of evaluation tasks.
        #[arg(long, default_value_t = 1000)]
        num_tasks: usize,
        /// Adaptation steps to evaluate (0..=steps reported).
        #[arg(long, default_value_t = 10)]
        steps: usize,
        /// Write the evaluation task set as a CSV exchange file.
        #[arg(long)]
        dump_tasks: Option<PathBuf>,
        /// For nav2d: write example pre/post-adaptation trajectories.
        #[arg(long, default_value_t = false)]
        dump_trajectories: bool,
    },
    /// Train and evaluate one run per swept value and seed.
    Sweep {
        #[command(flatten)]
        common: CommonFlags,
        /// Sweep spec file: parameter = ..., values = ..., seeds = ...
        #[arg(long)]
        sweep: PathBuf,
    },
    /// Adapt the context on fresh tasks and fit a linear descriptor readout.
    Embed {
        #[command(flatten)]
        common: CommonFlags,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1000)]
        num_tasks: usize,
        #[arg(long, default_value_t = 5)]
        adapt_steps: usize,
    },
    /// Mean context-gradient norms for checkpoints trained at different
    /// inner learning rates.
    Gradnorm {
        #[command(flatten)]
        common: CommonFlags,
        /// Checkpoint paths (repeat the flag), one per trained learning rate.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long, default_value_t = 200)]
        num_tasks: usize,
        /// Learning rates that must be covered, comma separated.
        #[arg(long, value_delimiter = ',')]
        inner_lrs: Vec<f64>,
    },
}

fn exit_code_for(err: &CaviaError) -> u8 {
    match err {
        CaviaError::Config(_) => EXIT_CONFIG,
        CaviaError::Load(_) => EXIT_LOAD,
        CaviaError::Divergence { .. } => EXIT_DIVERGENCE,
        _ => 1,
    }
}

fn run() -> Result<(), CaviaError> {
    match Cli::parse().command {
        Command::Train { common, iterations } => {
            let mut over = common.overrides();
            over.iterations = iterations;
            let cfg = resolve_config(common.config.as_deref(), &over)?;
            let outputs = run_train(&cfg, &common.out)?;
            println!(
                "trained {} iterations; final checkpoint {}",
                cfg.iterations,
                outputs.final_checkpoint.display()
            );
            Ok(())
        }
        Command::Eval { common, checkpoint, num_tasks, steps, dump_tasks, dump_trajectories } => {
            let cfg = resolve_config(common.config.as_deref(), &common.overrides())?;
            let opts = EvalOptions {
                num_tasks,
                steps,
                seed: cfg.seed,
                inner_lr: common.inner_lr,
                dump_tasks,
                dump_trajectories,
            };
            let outputs = run_eval(&cfg, &checkpoint, &common.out, &opts)?;
            for s in &outputs.summary {
                println!(
                    "group={} step={} mean={:.6} ci95={:.6} n={}",
                    if s.group.is_empty() { "-" } else { &s.group },
                    s.step,
                    s.mean,
                    s.ci95,
                    s.n
                );
            }
            Ok(())
        }
        Command::Sweep { common, sweep } => {
            let cfg = resolve_config(common.config.as_deref(), &common.overrides())?;
            let text = std::fs::read_to_string(&sweep)
                .map_err(|e| CaviaError::Config(format!("{}: {e}", sweep.display())))?;
            let spec = SweepSpec::parse(&text)?;
            let outputs = run_sweep(&spec, &cfg, &common.out)?;
            for c in &outputs.cells {
                println!(
                    "value={} seed={} status={} mean={}",
                    c.value,
                    c.seed,
                    c.status,
                    c.mean.map(|m| format!("{m:.6}")).unwrap_or_else(|| "-".into())
                );
            }
            Ok(())
        }
        Command::Embed { common, checkpoint, num_tasks, adapt_steps } => {
            let cfg = resolve_config(common.config.as_deref(), &common.overrides())?;
            let opts = EmbedOptions {
                num_tasks,
                adapt_steps,
                seed: cfg.seed,
                inner_lr: common.inner_lr,
            };
            let outputs = run_embed(&cfg, &checkpoint, &common.out, &opts)?;
            for (feature, r2) in &outputs.readout {
                println!("{feature}: r2={r2:.4}");
            }
            Ok(())
        }
        Command::Gradnorm { common, checkpoints, num_tasks, inner_lrs } => {
            let cfg = resolve_config(common.config.as_deref(), &common.overrides())?;
            let opts = GradnormOptions { num_tasks, seed: cfg.seed, required_lrs: inner_lrs };
            let outputs = run_gradnorm(&cfg, &checkpoints, &common.out, &opts)?;
            for (lr, norm) in &outputs.rows {
                println!("inner_lr={lr} mean_grad_norm={norm:.6}");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
