//! Adam optimizer over named parameter collections.

use indexmap::IndexMap;

use crate::autodiff::TensorData;
use crate::error::{CaviaError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// First/second moment estimates with bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub hyper: AdamHyper,
    step: u64,
    m: IndexMap<String, TensorData>,
    v: IndexMap<String, TensorData>,
}

impl AdamState {
    pub fn new(hyper: AdamHyper, params: &IndexMap<String, TensorData>) -> Self {
        let m = params
            .iter()
            .map(|(k, t)| (k.clone(), TensorData::zeros(t.shape.clone())))
            .collect::<IndexMap<_, _>>();
        let v = m.clone();
        Self { hyper, step: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One descent step on `params` given gradients of the minimization
    /// objective (callers maximizing an objective negate their gradients).
    pub fn step(
        &mut self,
        params: &mut IndexMap<String, TensorData>,
        grads: &IndexMap<String, TensorData>,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let h = self.hyper;
        let corr1 = 1.0 - h.beta1.powi(t);
        let corr2 = 1.0 - h.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).ok_or_else(|| {
                CaviaError::Contract(format!("missing gradient for parameter {name:?}"))
            })?;
            if g.shape != p.shape {
                return Err(CaviaError::Dimension {
                    op: "adam_step",
                    lhs: p.shape.clone(),
                    rhs: g.shape.clone(),
                });
            }
            let m = &mut self.m[name].values;
            let v = &mut self.v[name].values;
            for i in 0..p.values.len() {
                let gi = g.values[i];
                m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * gi;
                v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * gi * gi;
                let m_hat = m[i] / corr1;
                let v_hat = v[i] / corr2;
                p.values[i] -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
            }
        }
        Ok(())
    }

    /// Serialize moments and step counter as named tensor records.
    pub fn to_records(&self) -> Vec<(String, TensorData)> {
        let mut records = vec![
            ("adam.step".to_string(), TensorData::vector(vec![self.step as f64])),
            (
                "adam.hyper".to_string(),
                TensorData::vector(vec![self.hyper.lr, self.hyper.beta1, self.hyper.beta2, self.hyper.eps]),
            ),
        ];
        for (k, t) in &self.m {
            records.push((format!("adam.m.{k}"), t.clone()));
        }
        for (k, t) in &self.v {
            records.push((format!("adam.v.{k}"), t.clone()));
        }
        records
    }

    pub fn from_records(records: &IndexMap<String, TensorData>) -> Result<Self> {
        let step = records
            .get("adam.step")
            .ok_or_else(|| CaviaError::Load("missing adam.step record".into()))?
            .values[0] as u64;
        let hv = &records
            .get("adam.hyper")
            .ok_or_else(|| CaviaError::Load("missing adam.hyper record".into()))?
            .values;
        if hv.len() != 4 {
            return Err(CaviaError::Load("adam.hyper must have 4 values".into()));
        }
        let hyper = AdamHyper {
            lr: hv[0],
            beta1: hv[1],
            beta2: hv[2],
            eps: hv[3],
        };
        let mut m = IndexMap::new();
        let mut v = IndexMap::new();
        for (name, data) in records {
            if let Some(param) = name.strip_prefix("adam.m.") {
                m.insert(param.to_string(), data.clone());
            } else if let Some(param) = name.strip_prefix("adam.v.") {
                v.insert(param.to_string(), data.clone());
            }
        }
        Ok(Self { hyper, step, m, v })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(v: f64) -> IndexMap<String, TensorData> {
        let mut p = IndexMap::new();
        p.insert("w".to_string(), TensorData::vector(vec![v]));
        p
    }

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction, the first Adam step is ~lr * sign(grad).
        let mut params = single_param(1.0);
        let mut adam = AdamState::new(AdamHyper::with_lr(0.1), &params);
        let grads = single_param(3.0);
        adam.step(&mut params, &grads).unwrap();
        let moved = 1.0 - params["w"].values[0];
        assert!((moved - 0.1).abs() < 1e-6, "moved {moved}");
    }

    #[test]
    fn step_counter_increases() {
        let mut params = single_param(0.0);
        let mut adam = AdamState::new(AdamHyper::default(), &params);
        let grads = single_param(1.0);
        for expected in 1..=3 {
            adam.step(&mut params, &grads).unwrap();
            assert_eq!(adam.step_count(), expected);
        }
    }

    #[test]
    fn records_round_trip() {
        let mut params = single_param(1.0);
        let mut adam = AdamState::new(AdamHyper::with_lr(0.01), &params);
        adam.step(&mut params, &single_param(0.5)).unwrap();
        let records: IndexMap<String, TensorData> = adam.to_records().into_iter().collect();
        let back = AdamState::from_records(&records).unwrap();
        assert_eq!(back.step, adam.step);
        assert_eq!(back.hyper, adam.hyper);
        assert_eq!(back.m, adam.m);
        assert_eq!(back.v, adam.v);
    }
}
