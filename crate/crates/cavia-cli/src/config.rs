//! Run configuration: per-suite defaults, `key = value` config files, flag
//! overrides and the run manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use cavia::metasup::MetaAlgorithm;
use cavia::{CaviaError, Result};
use sha2::{Digest, Sha256};

pub const ARTIFACT_VERSION: &str = concat!("cavia-", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Sine,
    Completion,
    Fewshot,
    Nav2d,
}

impl Suite {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sine" => Ok(Self::Sine),
            "completion" => Ok(Self::Completion),
            "fewshot" => Ok(Self::Fewshot),
            "nav2d" => Ok(Self::Nav2d),
            other => Err(CaviaError::Config(format!("unknown suite {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Sine => "sine",
            Self::Completion => "completion",
            Self::Fewshot => "fewshot",
            Self::Nav2d => "nav2d",
        }
    }
}

pub fn parse_algorithm(s: &str) -> Result<MetaAlgorithm> {
    match s {
        "cavia" => Ok(MetaAlgorithm::Cavia),
        "maml" => Ok(MetaAlgorithm::Maml),
        other => Err(CaviaError::Config(format!("unknown algorithm {other:?}"))),
    }
}

pub fn algorithm_name(a: MetaAlgorithm) -> &'static str {
    match a {
        MetaAlgorithm::Cavia => "cavia",
        MetaAlgorithm::Maml => "maml",
    }
}

/// Full configuration of one run. Every field is a manifest key.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub suite: Suite,
    pub algorithm: MetaAlgorithm,
    pub first_order: bool,
    pub context_dim: usize,
    pub inner_lr: f64,
    pub inner_steps: usize,
    pub meta_batch: usize,
    pub outer_lr: f64,
    pub iterations: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub checkpoint_every: usize,
    pub val_every: usize,
    pub val_tasks: usize,
    pub eval_tasks: usize,
    pub eval_steps: usize,

    // sine regression
    pub m_train: usize,
    pub train_m_test: usize,
    pub eval_m_test: usize,

    // image completion
    pub grid: usize,
    pub shots: Vec<usize>,

    // few-shot classification
    pub n_way: usize,
    pub k_shot: usize,
    pub query: usize,
    pub fs_dim: usize,
    pub fs_train_classes: usize,
    pub fs_val_classes: usize,
    pub fs_test_classes: usize,
    pub fs_cluster_std: f64,
    pub fs_mean_range: f64,

    // 2-D navigation
    pub rl_m_train: usize,
    pub rl_m_test: usize,
    pub rl_eval_episodes: usize,
    pub rl_adapt_interactions: usize,
    pub discount: f64,
}

impl RunConfig {
    pub fn defaults(suite: Suite, algorithm: MetaAlgorithm) -> Self {
        let maml = algorithm == MetaAlgorithm::Maml;
        let mut cfg = Self {
            suite,
            algorithm,
            first_order: false,
            context_dim: 5,
            inner_lr: 1.0,
            inner_steps: 1,
            meta_batch: 25,
            outer_lr: 1e-3,
            iterations: 20_000,
            seed: 1,
            hidden: vec![40, 40],
            checkpoint_every: 5_000,
            val_every: 500,
            val_tasks: 100,
            eval_tasks: 1_000,
            eval_steps: 10,
            m_train: 10,
            train_m_test: 10,
            eval_m_test: 100,
            grid: 32,
            shots: vec![10, 100, 1000],
            n_way: 5,
            k_shot: 1,
            query: 15,
            fs_dim: 20,
            fs_train_classes: 64,
            fs_val_classes: 12,
            fs_test_classes: 24,
            fs_cluster_std: 2.0,
            fs_mean_range: 3.0,
            rl_m_train: 200,
            rl_m_test: 200,
            rl_eval_episodes: 20,
            rl_adapt_interactions: 200,
            discount: 0.99,
        };
        match suite {
            Suite::Sine => {
                if maml {
                    cfg.inner_lr = 0.01;
                }
            }
            Suite::Completion => {
                cfg.hidden = vec![32, 32];
                cfg.context_dim = 8;
                cfg.inner_steps = 2;
                cfg.meta_batch = 4;
                cfg.iterations = 1_500;
                cfg.eval_tasks = 50;
                cfg.eval_steps = 5;
                cfg.val_every = 250;
                cfg.val_tasks = 8;
                cfg.checkpoint_every = 500;
                if maml {
                    cfg.inner_lr = 0.1;
                }
            }
            Suite::Fewshot => {
                cfg.hidden = vec![64, 64];
                cfg.context_dim = 8;
                cfg.inner_steps = 2;
                cfg.meta_batch = 4;
                cfg.iterations = 2_000;
                cfg.eval_tasks = 1_000;
                cfg.eval_steps = 4;
                cfg.val_every = 250;
                cfg.val_tasks = 100;
                cfg.checkpoint_every = 500;
                if maml {
                    cfg.inner_lr = 0.1;
                }
            }
            Suite::Nav2d => {
                cfg.hidden = vec![100, 100];
                cfg.context_dim = 5;
                cfg.meta_batch = 20;
                cfg.iterations = 500;
                cfg.eval_tasks = 40;
                cfg.eval_steps = 3;
                cfg.val_every = 25;
                cfg.val_tasks = 8;
                cfg.checkpoint_every = 100;
                if maml {
                    cfg.inner_lr = 0.1;
                }
            }
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.algorithm == MetaAlgorithm::Cavia && self.context_dim == 0 {
            return Err(CaviaError::Config(
                "algorithm=cavia requires context_dim >= 1".into(),
            ));
        }
        if self.inner_lr <= 0.0 {
            return Err(CaviaError::Config("inner_lr must be positive".into()));
        }
        if self.meta_batch == 0 || self.inner_steps == 0 {
            return Err(CaviaError::Config("meta_batch and inner_steps must be >= 1".into()));
        }
        if self.hidden.is_empty() {
            return Err(CaviaError::Config("hidden must name at least one layer width".into()));
        }
        Ok(())
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let parse_usize = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| CaviaError::Config(format!("bad integer for {key}: {v:?}")))
        };
        let parse_f64 = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| CaviaError::Config(format!("bad float for {key}: {v:?}")))
        };
        let parse_list = |v: &str| -> Result<Vec<usize>> {
            v.split(',')
                .map(|t| {
                    t.trim()
                        .parse::<usize>()
                        .map_err(|_| CaviaError::Config(format!("bad list entry for {key}: {t:?}")))
                })
                .collect()
        };
        match key {
            "suite" => self.suite = Suite::parse(value)?,
            "algorithm" => self.algorithm = parse_algorithm(value)?,
            "first_order" => {
                self.first_order = value
                    .parse::<bool>()
                    .map_err(|_| CaviaError::Config(format!("bad bool for {key}: {value:?}")))?
            }
            "context_dim" => self.context_dim = parse_usize(value)?,
            "inner_lr" => self.inner_lr = parse_f64(value)?,
            "inner_steps" => self.inner_steps = parse_usize(value)?,
            "meta_batch" => self.meta_batch = parse_usize(value)?,
            "outer_lr" => self.outer_lr = parse_f64(value)?,
            "iterations" => self.iterations = parse_usize(value)?,
            "seed" => {
                self.seed = value
                    .parse::<u64>()
                    .map_err(|_| CaviaError::Config(format!("bad seed: {value:?}")))?
            }
            "hidden" => self.hidden = parse_list(value)?,
            "checkpoint_every" => self.checkpoint_every = parse_usize(value)?,
            "val_every" => self.val_every = parse_usize(value)?,
            "val_tasks" => self.val_tasks = parse_usize(value)?,
            "eval_tasks" => self.eval_tasks = parse_usize(value)?,
            "eval_steps" => self.eval_steps = parse_usize(value)?,
            "m_train" => self.m_train = parse_usize(value)?,
            "train_m_test" => self.train_m_test = parse_usize(value)?,
            "eval_m_test" => self.eval_m_test = parse_usize(value)?,
            "grid" => self.grid = parse_usize(value)?,
            "shots" => self.shots = parse_list(value)?,
            "n_way" => self.n_way = parse_usize(value)?,
            "k_shot" => self.k_shot = parse_usize(value)?,
            "query" => self.query = parse_usize(value)?,
            "fs_dim" => self.fs_dim = parse_usize(value)?,
            "fs_train_classes" => self.fs_train_classes = parse_usize(value)?,
            "fs_val_classes" => self.fs_val_classes = parse_usize(value)?,
            "fs_test_classes" => self.fs_test_classes = parse_usize(value)?,
            "fs_cluster_std" => self.fs_cluster_std = parse_f64(value)?,
            "fs_mean_range" => self.fs_mean_range = parse_f64(value)?,
            "rl_m_train" => self.rl_m_train = parse_usize(value)?,
            "rl_m_test" => self.rl_m_test = parse_usize(value)?,
            "rl_eval_episodes" => self.rl_eval_episodes = parse_usize(value)?,
            "rl_adapt_interactions" => self.rl_adapt_interactions = parse_usize(value)?,
            "discount" => self.discount = parse_f64(value)?,
            other => {
                return Err(CaviaError::Config(format!("unknown configuration key {other:?}")))
            }
        }
        Ok(())
    }

    /// Canonical `key = value` listing: the manifest body and hash input.
    pub fn manifest_body(&self) -> String {
        let mut kv = BTreeMap::new();
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        kv.insert("version", ARTIFACT_VERSION.to_string());
        kv.insert("suite", self.suite.name().to_string());
        kv.insert("algorithm", algorithm_name(self.algorithm).to_string());
        kv.insert("first_order", self.first_order.to_string());
        kv.insert("context_dim", self.context_dim.to_string());
        kv.insert("inner_lr", self.inner_lr.to_string());
        kv.insert("inner_steps", self.inner_steps.to_string());
        kv.insert("meta_batch", self.meta_batch.to_string());
        kv.insert("outer_lr", self.outer_lr.to_string());
        kv.insert("iterations", self.iterations.to_string());
        kv.insert("seed", self.seed.to_string());
        kv.insert("hidden", list(&self.hidden));
        kv.insert("checkpoint_every", self.checkpoint_every.to_string());
        kv.insert("val_every", self.val_every.to_string());
        kv.insert("val_tasks", self.val_tasks.to_string());
        kv.insert("eval_tasks", self.eval_tasks.to_string());
        kv.insert("eval_steps", self.eval_steps.to_string());
        kv.insert("m_train", self.m_train.to_string());
        kv.insert("train_m_test", self.train_m_test.to_string());
        kv.insert("eval_m_test", self.eval_m_test.to_string());
        kv.insert("grid", self.grid.to_string());
        kv.insert("shots", list(&self.shots));
        kv.insert("n_way", self.n_way.to_string());
        kv.insert("k_shot", self.k_shot.to_string());
        kv.insert("query", self.query.to_string());
        kv.insert("fs_dim", self.fs_dim.to_string());
        kv.insert("fs_train_classes", self.fs_train_classes.to_string());
        kv.insert("fs_val_classes", self.fs_val_classes.to_string());
        kv.insert("fs_test_classes", self.fs_test_classes.to_string());
        kv.insert("fs_cluster_std", self.fs_cluster_std.to_string());
        kv.insert("fs_mean_range", self.fs_mean_range.to_string());
        kv.insert("rl_m_train", self.rl_m_train.to_string());
        kv.insert("rl_m_test", self.rl_m_test.to_string());
        kv.insert("rl_eval_episodes", self.rl_eval_episodes.to_string());
        kv.insert("rl_adapt_interactions", self.rl_adapt_interactions.to_string());
        kv.insert("discount", self.discount.to_string());
        let mut out = String::new();
        for (k, v) in kv {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Hash over the deterministic manifest body (timestamps excluded, so
    /// reruns of the same configuration share a hash).
    pub fn manifest_hash(&self) -> String {
        let digest = Sha256::digest(self.manifest_body().as_bytes());
        hex::encode(&digest[..8])
    }
}

/// `key = value` lines; blank lines and `#` comments allowed.
pub fn parse_kv_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CaviaError::Config(format!("line {}: expected key = value, got {raw:?}", lineno + 1))
        })?;
        pairs.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(pairs)
}

/// Overrides applied on top of the config file, in flag position.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub suite: Option<String>,
    pub algorithm: Option<String>,
    pub first_order: bool,
    pub context_dim: Option<usize>,
    pub inner_lr: Option<f64>,
    pub inner_steps: Option<usize>,
    pub meta_batch: Option<usize>,
    pub seed: Option<u64>,
    pub iterations: Option<usize>,
    pub extra: Vec<(String, String)>,
}

/// Resolve a full configuration from an optional file plus flag overrides.
/// Defaults depend on (suite, algorithm), so those two are resolved first.
pub fn resolve_config(file: Option<&Path>, over: &Overrides) -> Result<RunConfig> {
    let file_pairs = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CaviaError::Config(format!("{}: {e}", path.display())))?;
            parse_kv_text(&text)?
        }
        None => Vec::new(),
    };
    let mut suite = None;
    let mut algorithm = None;
    for (k, v) in &file_pairs {
        match k.as_str() {
            "suite" => suite = Some(Suite::parse(v)?),
            "algorithm" => algorithm = Some(parse_algorithm(v)?),
            _ => {}
        }
    }
    if let Some(s) = &over.suite {
        suite = Some(Suite::parse(s)?);
    }
    if let Some(a) = &over.algorithm {
        algorithm = Some(parse_algorithm(a)?);
    }
    let suite = suite.ok_or_else(|| CaviaError::Config("no suite given (flag or config file)".into()))?;
    let algorithm = algorithm.unwrap_or(MetaAlgorithm::Cavia);

    let mut cfg = RunConfig::defaults(suite, algorithm);
    for (k, v) in &file_pairs {
        cfg.set(k, v)?;
    }
    for (k, v) in &over.extra {
        cfg.set(k, v)?;
    }
    if over.first_order {
        cfg.first_order = true;
    }
    if let Some(v) = over.context_dim {
        cfg.context_dim = v;
    }
    if let Some(v) = over.inner_lr {
        cfg.inner_lr = v;
    }
    if let Some(v) = over.inner_steps {
        cfg.inner_steps = v;
    }
    if let Some(v) = over.meta_batch {
        cfg.meta_batch = v;
    }
    if let Some(v) = over.seed {
        cfg.seed = v;
    }
    if let Some(v) = over.iterations {
        cfg.iterations = v;
    }
    // Re-assert the flag-resolved pair in case the file also named them.
    cfg.suite = suite;
    cfg.algorithm = algorithm;
    cfg.validate()?;
    Ok(cfg)
}
