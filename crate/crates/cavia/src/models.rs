//! Context-conditioned fully connected models.
//!
//! A [`ContextModel`] partitions its parameters into the shared set `theta`
//! (meta-learned, persisted as plain values) and a low-dimensional context
//! vector `phi` that is reset to zero before each task and adapted in the
//! inner loop. Conditioning is either concatenation of `phi` to the network
//! input or a feature-wise affine transform (`gamma ⊙ h + beta`) generated
//! from `phi` at one hidden layer.

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Tensor, TensorData};
use crate::error::{CaviaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Conditioning {
    /// Concatenate the context vector to the input of the first layer.
    ConcatAtInput,
    /// Feature-wise affine modulation of the given hidden layer (1-based).
    FilmAtLayer(usize),
}

/// Where the conditioning vector lives: adapted per task (context mode) or
/// inside `theta` as meta-learned extra input biases (the full-adaptation
/// baseline gets the same wiring but updates them like any other weight).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContextRole {
    InnerContext,
    ThetaInputBias,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub context_dim: usize,
    pub conditioning: Conditioning,
    pub activation: Activation,
    pub context_role: ContextRole,
}

impl Architecture {
    /// Input-concatenated MLP, the default used by every suite.
    pub fn mlp(input_dim: usize, hidden: Vec<usize>, output_dim: usize, context_dim: usize) -> Self {
        Self {
            input_dim,
            hidden,
            output_dim,
            context_dim,
            conditioning: Conditioning::ConcatAtInput,
            activation: Activation::Relu,
            context_role: ContextRole::InnerContext,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(CaviaError::Config("model needs nonzero input/output widths".into()));
        }
        if let Conditioning::FilmAtLayer(l) = self.conditioning {
            if l == 0 || l > self.hidden.len() {
                return Err(CaviaError::Config(format!(
                    "FiLM layer {l} out of range for {} hidden layers",
                    self.hidden.len()
                )));
            }
            if self.context_dim == 0 {
                return Err(CaviaError::Config("FiLM conditioning needs context_dim >= 1".into()));
            }
        }
        Ok(())
    }

    fn num_layers(&self) -> usize {
        self.hidden.len() + 1
    }

    /// (fan_in, fan_out) of each linear layer, 1-based indexing elsewhere.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let concat = matches!(self.conditioning, Conditioning::ConcatAtInput);
        let first_in = self.input_dim + if concat { self.context_dim } else { 0 };
        let mut widths = Vec::with_capacity(self.num_layers() + 1);
        widths.push(first_in);
        widths.extend_from_slice(&self.hidden);
        widths.push(self.output_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    fn film_features(&self) -> Option<usize> {
        match self.conditioning {
            Conditioning::FilmAtLayer(l) => Some(self.hidden[l - 1]),
            Conditioning::ConcatAtInput => None,
        }
    }
}

/// Partitioned parameter set: shared `theta` tensors plus the context vector.
#[derive(Debug, Clone)]
pub struct ContextModel {
    pub arch: Architecture,
    pub theta: IndexMap<String, TensorData>,
    pub phi: Vec<f64>,
}

impl ContextModel {
    /// He-style fan-in initialization: weights from N(0, 2/fan_in), biases
    /// zero. The FiLM generator bias starts as [1,...,1, 0,...,0] so that at
    /// `phi = 0` the modulation is the identity. Deterministic given `seed`.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = IndexMap::new();
        for (l, (fan_in, fan_out)) in arch.layer_dims().iter().enumerate() {
            let n = l + 1;
            theta.insert(format!("w{n}"), he_normal(&mut rng, *fan_in, *fan_out));
            theta.insert(format!("b{n}"), TensorData::zeros(vec![*fan_out]));
        }
        if let Some(f) = arch.film_features() {
            theta.insert("film_w".into(), he_normal(&mut rng, arch.context_dim, 2 * f));
            let mut bias = vec![1.0; f];
            bias.extend(vec![0.0; f]);
            theta.insert("film_b".into(), TensorData::vector(bias));
        }
        if arch.context_role == ContextRole::ThetaInputBias && arch.context_dim > 0 {
            theta.insert("ctx".into(), TensorData::zeros(vec![arch.context_dim]));
        }
        let phi = vec![0.0; arch.context_dim];
        Ok(Self { arch, theta, phi })
    }

    /// Set every context component back to exactly zero; `theta` untouched.
    pub fn reset_context(&mut self) {
        self.phi.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Lift parameters into `graph` as differentiable leaves.
    pub fn bind(&self, graph: &Graph) -> BoundModel {
        let theta: IndexMap<String, Tensor> = self
            .theta
            .iter()
            .map(|(name, data)| (name.clone(), graph.leaf(data, true)))
            .collect();
        let phi = graph.leaf(&TensorData::vector(self.phi.clone()), true);
        BoundModel {
            arch: self.arch.clone(),
            graph: graph.clone(),
            theta_current: theta.clone(),
            theta_leaves: theta,
            phi,
        }
    }

    /// Value-only forward pass for one input row (no graph recording).
    pub fn forward_values(&self, phi: &[f64], x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.arch.input_dim, "input width mismatch");
        let ctx: &[f64] = match self.arch.context_role {
            ContextRole::InnerContext => phi,
            ContextRole::ThetaInputBias => &self.theta["ctx"].values,
        };
        let concat = matches!(self.arch.conditioning, Conditioning::ConcatAtInput);
        let mut h: Vec<f64> = if concat && self.arch.context_dim > 0 {
            x.iter().chain(ctx.iter()).copied().collect()
        } else {
            x.to_vec()
        };
        let layers = self.arch.num_layers();
        for l in 1..=layers {
            let w = &self.theta[&format!("w{l}")];
            let b = &self.theta[&format!("b{l}")];
            let fan_out = w.shape[1];
            let mut z = vec![0.0; fan_out];
            for (i, &hv) in h.iter().enumerate() {
                let row = &w.values[i * fan_out..(i + 1) * fan_out];
                for (zv, &wv) in z.iter_mut().zip(row) {
                    *zv += hv * wv;
                }
            }
            for (zv, &bv) in z.iter_mut().zip(&b.values) {
                *zv += bv;
            }
            if self.arch.conditioning == Conditioning::FilmAtLayer(l) {
                let (gamma, beta) = self.film_values(ctx);
                for (j, zv) in z.iter_mut().enumerate() {
                    *zv = gamma[j] * *zv + beta[j];
                }
            }
            if l < layers {
                z.iter_mut().for_each(|v| *v = activate(self.arch.activation, *v));
            }
            h = z;
        }
        h
    }

    /// Batch value-only forward over the rows of `x`.
    pub fn forward_values_batch(&self, phi: &[f64], x: &TensorData) -> TensorData {
        let d = self.arch.input_dim;
        let rows = x.values.len() / d;
        let mut out = Vec::with_capacity(rows * self.arch.output_dim);
        for r in 0..rows {
            out.extend(self.forward_values(phi, &x.values[r * d..(r + 1) * d]));
        }
        TensorData {
            shape: vec![rows, self.arch.output_dim],
            values: out,
        }
    }

    fn film_values(&self, ctx: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let w = &self.theta["film_w"];
        let b = &self.theta["film_b"];
        let two_f = w.shape[1];
        let f = two_f / 2;
        let mut gb = b.values.clone();
        for (k, &cv) in ctx.iter().enumerate() {
            let row = &w.values[k * two_f..(k + 1) * two_f];
            for (g, &wv) in gb.iter_mut().zip(row) {
                *g += cv * wv;
            }
        }
        let beta = gb.split_off(f);
        (gb, beta)
    }

    /// Witness for the equivalence between a learned context offset and a
    /// first-layer bias shift: returns the outputs of (A) this model with
    /// `phi = c` and (B) the model with `phi = 0` and first-layer bias
    /// replaced by `b + cᵀ·w_ctx`, both evaluated on `x`. The two agree
    /// exactly up to floating-point association.
    pub fn shift_equivalence_witness(
        &self,
        c: &[f64],
        x: &TensorData,
    ) -> Result<(TensorData, TensorData)> {
        if self.arch.conditioning != Conditioning::ConcatAtInput {
            return Err(CaviaError::Contract(
                "shift equivalence witness requires input-concatenation conditioning".into(),
            ));
        }
        if c.len() != self.arch.context_dim {
            return Err(CaviaError::Dimension {
                op: "shift_equivalence_witness",
                lhs: vec![self.arch.context_dim],
                rhs: vec![c.len()],
            });
        }
        let out_a = self.forward_values_batch(c, x);

        let mut shifted = self.clone();
        let w1 = &self.theta["w1"];
        let fan_out = w1.shape[1];
        let ctx_rows_start = self.arch.input_dim;
        let b1 = shifted.theta.get_mut("b1").expect("first-layer bias");
        for (k, &cv) in c.iter().enumerate() {
            let row = &w1.values[(ctx_rows_start + k) * fan_out..(ctx_rows_start + k + 1) * fan_out];
            for (bv, &wv) in b1.values.iter_mut().zip(row) {
                *bv += cv * wv;
            }
        }
        let zero = vec![0.0; c.len()];
        let out_b = shifted.forward_values_batch(&zero, x);
        Ok((out_a, out_b))
    }

    pub fn theta_l2_norm(&self) -> f64 {
        self.theta
            .values()
            .map(|t| t.values.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

fn he_normal(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> TensorData {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("valid std");
    let values = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
    TensorData {
        shape: vec![fan_in, fan_out],
        values,
    }
}

fn activate(a: Activation, v: f64) -> f64 {
    match a {
        Activation::Relu => {
            if v > 0.0 {
                v
            } else {
                0.0
            }
        }
        Activation::Tanh => v.tanh(),
    }
}

/// A model lifted into a graph for one adaptation episode. Holds the original
/// parameter leaves plus the current (possibly adapted) handles.
pub struct BoundModel {
    arch: Architecture,
    graph: Graph,
    theta_leaves: IndexMap<String, Tensor>,
    theta_current: IndexMap<String, Tensor>,
    phi: Tensor,
}

impl BoundModel {
    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    /// Original parameter leaves (targets of the outer-loop gradient).
    pub fn theta_leaves(&self) -> &IndexMap<String, Tensor> {
        &self.theta_leaves
    }

    /// Current parameter handles (equal to the leaves unless adapted).
    pub fn theta(&self) -> &IndexMap<String, Tensor> {
        &self.theta_current
    }

    pub fn set_theta(&mut self, name: &str, t: Tensor) {
        self.theta_current[name] = t;
    }

    /// Restore all parameter handles to the original leaves.
    pub fn reset_theta(&mut self) {
        self.theta_current = self.theta_leaves.clone();
    }

    pub fn phi(&self) -> &Tensor {
        &self.phi
    }

    pub fn set_phi(&mut self, phi: Tensor) {
        self.phi = phi;
    }

    /// Fresh all-zero context leaf; severs any graph linkage from a previous
    /// adaptation. Idempotent; `theta` untouched.
    pub fn reset_context(&mut self) {
        self.phi = self
            .graph
            .leaf(&TensorData::zeros(vec![self.arch.context_dim]), true);
    }

    fn context_tensor(&self) -> Tensor {
        match self.arch.context_role {
            ContextRole::InnerContext => self.phi.clone(),
            ContextRole::ThetaInputBias => self.theta_current["ctx"].clone(),
        }
    }

    /// Differentiable forward pass over a batch `x` of shape `[M x input_dim]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.arch.input_dim {
            return Err(CaviaError::Dimension {
                op: "forward",
                lhs: shape,
                rhs: vec![self.arch.input_dim],
            });
        }
        let ctx = self.context_tensor();
        let concat = matches!(self.arch.conditioning, Conditioning::ConcatAtInput);
        let mut h = if concat && self.arch.context_dim > 0 {
            x.concat_last(&ctx)?
        } else {
            x.clone()
        };
        let layers = self.arch.num_layers();
        for l in 1..=layers {
            let w = &self.theta_current[&format!("w{l}")];
            let b = &self.theta_current[&format!("b{l}")];
            let mut z = h.matmul(w)?.add(b)?;
            if self.arch.conditioning == Conditioning::FilmAtLayer(l) {
                let (gamma, beta) = self.film_tensors(&ctx)?;
                z = z.mul(&gamma)?.add(&beta)?;
            }
            h = if l < layers {
                match self.arch.activation {
                    Activation::Relu => z.relu()?,
                    Activation::Tanh => z.tanh()?,
                }
            } else {
                z
            };
        }
        Ok(h)
    }

    /// `[gamma, beta]` from the context generator, as bias vectors.
    fn film_tensors(&self, ctx: &Tensor) -> Result<(Tensor, Tensor)> {
        let w = &self.theta_current["film_w"];
        let b = &self.theta_current["film_b"];
        let two_f = w.shape()[1];
        let f = two_f / 2;
        let k = ctx.shape()[0];
        let gb = ctx.reshape(vec![1, k])?.matmul(w)?.add(b)?;
        let gamma = gb.slice_last(0, f)?.reshape(vec![f])?;
        let beta = gb.slice_last(f, f)?.reshape(vec![f])?;
        Ok((gamma, beta))
    }

    /// Copy the current parameter and context values back out of the graph.
    pub fn snapshot(&self) -> ContextModel {
        let theta = self
            .theta_current
            .iter()
            .map(|(name, t)| (name.clone(), t.data()))
            .collect();
        ContextModel {
            arch: self.arch.clone(),
            theta,
            phi: self.phi.values(),
        }
    }
}
