//! Task-distribution generators for the supervised suites.
//!
//! All sampling is a pure function of the caller's RNG state, so a seeded
//! generator reproduces identical task streams bit-exactly.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::TensorData;
use crate::error::{CaviaError, Result};
use crate::metasup::SupervisedTask;
use crate::util::{format_g17, parse_f64};

// ---- sine regression ----

/// Amplitude/phase family y = A sin(x - p) over x in [-5, 5].
#[derive(Debug, Clone)]
pub struct SineTaskSampler {
    pub amplitude_range: (f64, f64),
    pub phase_range: (f64, f64),
    pub x_range: (f64, f64),
    pub m_train: usize,
    pub m_test: usize,
}

impl Default for SineTaskSampler {
    fn default() -> Self {
        Self {
            amplitude_range: (0.1, 0.5),
            phase_range: (0.0, PI),
            x_range: (-5.0, 5.0),
            m_train: 10,
            m_test: 100,
        }
    }
}

impl SineTaskSampler {
    pub fn with_sizes(m_train: usize, m_test: usize) -> Self {
        Self { m_train, m_test, ..Self::default() }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> SupervisedTask {
        let amplitude = rng.gen_range(self.amplitude_range.0..self.amplitude_range.1);
        let phase = rng.gen_range(self.phase_range.0..self.phase_range.1);
        let mut draw = |m: usize| {
            let mut xs = Vec::with_capacity(m);
            let mut ys = Vec::with_capacity(m);
            for _ in 0..m {
                let x = rng.gen_range(self.x_range.0..self.x_range.1);
                xs.push(x);
                ys.push(amplitude * (x - phase).sin());
            }
            (
                TensorData { shape: vec![m, 1], values: xs },
                TensorData { shape: vec![m, 1], values: ys },
            )
        };
        let (train_x, train_y) = draw(self.m_train);
        let (test_x, test_y) = draw(self.m_test);
        SupervisedTask {
            train_x,
            train_y,
            test_x,
            test_y,
            descriptor: vec![amplitude, phase],
        }
    }
}

/// Convenience wrapper with the default ranges.
pub fn sample_sine_task(rng: &mut ChaCha8Rng, m_train: usize, m_test: usize) -> SupervisedTask {
    SineTaskSampler::with_sizes(m_train, m_test).sample(rng)
}

// ---- image completion ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelOrder {
    Random,
    Ordered,
}

#[derive(Debug, Clone, Copy)]
enum FieldKind {
    Radial { cx: f64, cy: f64 },
    Wave { dx: f64, dy: f64 },
}

#[derive(Debug, Clone, Copy)]
struct ColorField {
    kind: FieldKind,
    freq: f64,
    phase: f64,
    weights: [f64; 3],
}

/// Deterministic smooth texture f: [0,1]^2 -> [0,1]^3 built from a seeded
/// mixture of 3-6 radial and directional sinusoidal color fields.
#[derive(Debug, Clone)]
pub struct ImageFunction {
    fields: Vec<ColorField>,
}

impl ImageFunction {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let count = rng.gen_range(3..=6);
        let fields = (0..count)
            .map(|_| {
                let kind = if rng.gen_bool(0.5) {
                    FieldKind::Radial { cx: rng.gen_range(0.0..1.0), cy: rng.gen_range(0.0..1.0) }
                } else {
                    let angle = rng.gen_range(0.0..2.0 * PI);
                    FieldKind::Wave { dx: angle.cos(), dy: angle.sin() }
                };
                ColorField {
                    kind,
                    freq: rng.gen_range(0.5..3.0),
                    phase: rng.gen_range(0.0..2.0 * PI),
                    weights: [
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    ],
                }
            })
            .collect();
        Self { fields }
    }

    pub fn eval(&self, u: f64, v: f64) -> [f64; 3] {
        let norm = 1.0 / (self.fields.len() as f64).sqrt();
        let mut color = [0.5_f64; 3];
        for field in &self.fields {
            let basis = match field.kind {
                FieldKind::Radial { cx, cy } => {
                    let r = ((u - cx).powi(2) + (v - cy).powi(2)).sqrt();
                    (2.0 * PI * field.freq * r + field.phase).cos()
                }
                FieldKind::Wave { dx, dy } => {
                    (2.0 * PI * field.freq * (dx * u + dy * v) + field.phase).sin()
                }
            };
            for (c, w) in color.iter_mut().zip(field.weights) {
                *c += 0.5 * norm * w * basis;
            }
        }
        color.map(|c| c.clamp(0.0, 1.0))
    }
}

/// Coordinate-to-color completion tasks on a `grid x grid` image: the train
/// set is a pixel budget of (coordinate, color) pairs, the test set is every
/// pixel of the image (training pixels included).
#[derive(Debug, Clone)]
pub struct CompletionSampler {
    pub grid: usize,
    pub budget: usize,
    pub order: PixelOrder,
}

impl CompletionSampler {
    pub fn new(grid: usize, budget: usize, order: PixelOrder) -> Self {
        Self { grid, budget, order }
    }

    /// Center coordinate of pixel (row, col) in [0,1]^2.
    fn coord(&self, row: usize, col: usize) -> (f64, f64) {
        let g = self.grid as f64;
        ((row as f64 + 0.5) / g, (col as f64 + 0.5) / g)
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Result<SupervisedTask> {
        let total = self.grid * self.grid;
        if self.budget > total {
            return Err(CaviaError::Domain(format!(
                "pixel budget {} exceeds {}x{} grid",
                self.budget, self.grid, self.grid
            )));
        }
        let image_seed: u64 = rng.gen();
        let image = ImageFunction::from_seed(image_seed);

        // Row-major pixel indices, either the leading prefix or a draw
        // without replacement.
        let train_idx: Vec<usize> = match self.order {
            PixelOrder::Ordered => (0..self.budget).collect(),
            PixelOrder::Random => {
                let mut all: Vec<usize> = (0..total).collect();
                all.partial_shuffle(rng, self.budget).0.to_vec()
            }
        };

        let emit = |indices: &mut dyn Iterator<Item = usize>| {
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            let mut count = 0usize;
            for idx in indices {
                let (row, col) = (idx / self.grid, idx % self.grid);
                let (u, v) = self.coord(row, col);
                let color = image.eval(u, v);
                xs.extend_from_slice(&[u, v]);
                ys.extend_from_slice(&color);
                count += 1;
            }
            (
                TensorData { shape: vec![count, 2], values: xs },
                TensorData { shape: vec![count, 3], values: ys },
            )
        };
        let (train_x, train_y) = emit(&mut train_idx.iter().copied());
        let (test_x, test_y) = emit(&mut (0..total));
        Ok(SupervisedTask {
            train_x,
            train_y,
            test_x,
            test_y,
            descriptor: vec![image_seed as f64, self.budget as f64],
        })
    }
}

// ---- few-shot classification ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    MetaTrain,
    MetaVal,
    MetaTest,
}

/// Synthetic class generators: seeded Gaussian clusters with means drawn
/// uniformly in a cube, split into disjoint meta-train/val/test pools.
#[derive(Debug, Clone)]
pub struct FewShotConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub query: usize,
    pub dim: usize,
    pub train_classes: usize,
    pub val_classes: usize,
    pub test_classes: usize,
    pub mean_range: f64,
    pub cluster_std: f64,
    pub pool_seed: u64,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 1,
            query: 15,
            dim: 20,
            train_classes: 64,
            val_classes: 12,
            test_classes: 24,
            mean_range: 3.0,
            cluster_std: 2.0,
            pool_seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FewShotEpisode {
    pub n_way: usize,
    pub k_shot: usize,
    pub support_x: TensorData,
    pub support_y: TensorData,
    pub query_x: TensorData,
    pub query_y: TensorData,
    /// Global pool id of the class assigned to each label 0..N-1.
    pub class_of_label: Vec<usize>,
}

impl FewShotEpisode {
    pub fn to_task(&self) -> SupervisedTask {
        SupervisedTask {
            train_x: self.support_x.clone(),
            train_y: self.support_y.clone(),
            test_x: self.query_x.clone(),
            test_y: self.query_y.clone(),
            descriptor: self.class_of_label.iter().map(|&c| c as f64).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FewShotSampler {
    pub config: FewShotConfig,
    class_means: Vec<Vec<f64>>,
}

impl FewShotSampler {
    pub fn new(config: FewShotConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.pool_seed);
        let total = config.train_classes + config.val_classes + config.test_classes;
        let class_means = (0..total)
            .map(|_| {
                (0..config.dim)
                    .map(|_| rng.gen_range(-config.mean_range..config.mean_range))
                    .collect()
            })
            .collect();
        Self { config, class_means }
    }

    /// Global class-id range of a split; ranges are disjoint by construction.
    pub fn split_range(&self, split: Split) -> std::ops::Range<usize> {
        let c = &self.config;
        match split {
            Split::MetaTrain => 0..c.train_classes,
            Split::MetaVal => c.train_classes..c.train_classes + c.val_classes,
            Split::MetaTest => {
                c.train_classes + c.val_classes
                    ..c.train_classes + c.val_classes + c.test_classes
            }
        }
    }

    pub fn sample_episode(&self, rng: &mut ChaCha8Rng, split: Split) -> Result<FewShotEpisode> {
        let c = &self.config;
        let range = self.split_range(split);
        if range.len() < c.n_way {
            return Err(CaviaError::Config(format!(
                "split has {} classes, episode needs {}",
                range.len(),
                c.n_way
            )));
        }
        let mut pool: Vec<usize> = range.collect();
        let chosen = pool.partial_shuffle(rng, c.n_way).0.to_vec();
        // Fresh label permutation: class identity is only inferable from the
        // support set.
        let mut labels: Vec<usize> = (0..c.n_way).collect();
        labels.shuffle(rng);
        let mut class_of_label = vec![0usize; c.n_way];
        for (slot, &class) in chosen.iter().enumerate() {
            class_of_label[labels[slot]] = class;
        }

        let normal = Normal::new(0.0, c.cluster_std).expect("valid std");
        let mut draw_set = |per_class: usize| {
            let rows = c.n_way * per_class;
            let mut xs = Vec::with_capacity(rows * c.dim);
            let mut ys = Vec::with_capacity(rows);
            for (slot, &class) in chosen.iter().enumerate() {
                let mean = &self.class_means[class];
                for _ in 0..per_class {
                    xs.extend(mean.iter().map(|&m| m + normal.sample(rng)));
                    ys.push(labels[slot] as f64);
                }
            }
            (
                TensorData { shape: vec![rows, c.dim], values: xs },
                TensorData { shape: vec![rows, 1], values: ys },
            )
        };
        let (support_x, support_y) = draw_set(c.k_shot);
        let (query_x, query_y) = draw_set(c.query);
        Ok(FewShotEpisode {
            n_way: c.n_way,
            k_shot: c.k_shot,
            support_x,
            support_y,
            query_x,
            query_y,
            class_of_label,
        })
    }
}

// ---- CSV exchange for evaluation task sets ----

/// One row per datapoint: `task_id,split,input...,target...`.
pub fn dump_tasks_csv(tasks: &[SupervisedTask], mut w: impl Write) -> Result<()> {
    let (din, dout) = match tasks.first() {
        Some(t) => (t.train_x.shape[1], t.train_y.shape[1]),
        None => return Err(CaviaError::Contract("no tasks to dump".into())),
    };
    let mut header = String::from("task_id,split");
    for i in 0..din {
        header.push_str(&format!(",x{i}"));
    }
    for i in 0..dout {
        header.push_str(&format!(",y{i}"));
    }
    writeln!(w, "{header}")?;
    for (id, task) in tasks.iter().enumerate() {
        let mut write_set = |split: &str, x: &TensorData, y: &TensorData| -> Result<()> {
            for r in 0..x.shape[0] {
                let mut row = format!("{id},{split}");
                for v in &x.values[r * din..(r + 1) * din] {
                    row.push(',');
                    row.push_str(&format_g17(*v));
                }
                for v in &y.values[r * dout..(r + 1) * dout] {
                    row.push(',');
                    row.push_str(&format_g17(*v));
                }
                writeln!(w, "{row}")?;
            }
            Ok(())
        };
        write_set("train", &task.train_x, &task.train_y)?;
        write_set("test", &task.test_x, &task.test_y)?;
    }
    Ok(())
}

/// Inverse of [`dump_tasks_csv`]. Descriptors are not part of the exchange
/// format and come back empty; they never affect losses.
pub fn load_tasks_csv(r: impl BufRead) -> Result<Vec<SupervisedTask>> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| CaviaError::Load("empty task csv".into()))??;
    let cols: Vec<&str> = header.split(',').collect();
    let din = cols.iter().filter(|c| c.starts_with('x')).count();
    let dout = cols.iter().filter(|c| c.starts_with('y')).count();
    if din == 0 || dout == 0 || cols.len() != 2 + din + dout {
        return Err(CaviaError::Load(format!("bad task csv header: {header}")));
    }

    struct Builder {
        train: (Vec<f64>, Vec<f64>),
        test: (Vec<f64>, Vec<f64>),
    }
    let mut builders: Vec<Builder> = Vec::new();
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(CaviaError::Load(format!("bad task csv row: {line}")));
        }
        let id: usize = fields[0]
            .parse()
            .map_err(|_| CaviaError::Load(format!("bad task id: {}", fields[0])))?;
        while builders.len() <= id {
            builders.push(Builder { train: (vec![], vec![]), test: (vec![], vec![]) });
        }
        let target = match fields[1] {
            "train" => &mut builders[id].train,
            "test" => &mut builders[id].test,
            other => return Err(CaviaError::Load(format!("bad split tag: {other}"))),
        };
        for f in &fields[2..2 + din] {
            target.0.push(parse_f64(f)?);
        }
        for f in &fields[2 + din..] {
            target.1.push(parse_f64(f)?);
        }
    }
    builders
        .into_iter()
        .map(|b| {
            let m_train = b.train.0.len() / din;
            let m_test = b.test.0.len() / din;
            Ok(SupervisedTask {
                train_x: TensorData::new(vec![m_train, din], b.train.0)?,
                train_y: TensorData::new(vec![m_train, dout], b.train.1)?,
                test_x: TensorData::new(vec![m_test, din], b.test.0)?,
                test_y: TensorData::new(vec![m_test, dout], b.test.1)?,
                descriptor: vec![],
            })
        })
        .collect()
}
