//! Versioned text checkpoint container.
//!
//! Layout: a `CAVIA-CKPT v1` header line followed by per-tensor records of
//! three lines each — name, space-separated shape extents, space-separated
//! values at 17 significant digits (which round-trips `f64` exactly).

use std::path::Path;

use indexmap::IndexMap;

use crate::autodiff::TensorData;
use crate::error::{CaviaError, Result};
use crate::models::{Activation, Architecture, Conditioning, ContextModel, ContextRole};
use crate::optim::AdamState;
use crate::util::{format_g17, parse_f64};

pub const HEADER: &str = "CAVIA-CKPT v1";

#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub records: Vec<(String, TensorData)>,
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, data: TensorData) {
        self.records.push((name.into(), data));
    }

    pub fn record_map(&self) -> IndexMap<String, TensorData> {
        self.records.iter().cloned().collect()
    }

    pub fn encode(&self) -> String {
        let mut out = String::from(HEADER);
        out.push('\n');
        for (name, data) in &self.records {
            debug_assert!(!name.contains('\n') && !name.is_empty());
            out.push_str(name);
            out.push('\n');
            let shape: Vec<String> = data.shape.iter().map(|d| d.to_string()).collect();
            out.push_str(&shape.join(" "));
            out.push('\n');
            let values: Vec<String> = data.values.iter().map(|&v| format_g17(v)).collect();
            out.push_str(&values.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn decode(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == HEADER => {}
            other => {
                return Err(CaviaError::Load(format!(
                    "bad checkpoint header: {other:?} (expected {HEADER:?})"
                )))
            }
        }
        let mut records = Vec::new();
        while let Some(name) = lines.next() {
            if name.is_empty() {
                continue;
            }
            let shape_line = lines
                .next()
                .ok_or_else(|| CaviaError::Load(format!("record {name:?}: missing shape line")))?;
            let values_line = lines
                .next()
                .ok_or_else(|| CaviaError::Load(format!("record {name:?}: missing values line")))?;
            let shape: Vec<usize> = shape_line
                .split_whitespace()
                .map(|t| {
                    t.parse::<usize>()
                        .map_err(|_| CaviaError::Load(format!("record {name:?}: bad extent {t:?}")))
                })
                .collect::<Result<_>>()?;
            let values: Vec<f64> = values_line
                .split_whitespace()
                .map(parse_f64)
                .collect::<Result<_>>()?;
            let data = TensorData::new(shape, values)
                .map_err(|e| CaviaError::Load(format!("record {name:?}: {e}")))?;
            records.push((name.to_string(), data));
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CaviaError::Load(format!("{}: {e}", path.display())))?;
        Self::decode(&text)
    }
}

fn scalar_record(v: f64) -> TensorData {
    TensorData::vector(vec![v])
}

pub fn model_to_records(model: &ContextModel) -> Vec<(String, TensorData)> {
    let arch = &model.arch;
    let mut layer_sizes = vec![arch.input_dim as f64];
    layer_sizes.extend(arch.hidden.iter().map(|&h| h as f64));
    layer_sizes.push(arch.output_dim as f64);
    let conditioning = match arch.conditioning {
        Conditioning::ConcatAtInput => vec![0.0, 0.0],
        Conditioning::FilmAtLayer(l) => vec![1.0, l as f64],
    };
    let mut records = vec![
        ("config.layer_sizes".to_string(), TensorData::vector(layer_sizes)),
        ("config.context_dim".to_string(), scalar_record(arch.context_dim as f64)),
        ("config.conditioning".to_string(), TensorData::vector(conditioning)),
        (
            "config.activation".to_string(),
            scalar_record(match arch.activation {
                Activation::Relu => 0.0,
                Activation::Tanh => 1.0,
            }),
        ),
        (
            "config.context_role".to_string(),
            scalar_record(match arch.context_role {
                ContextRole::InnerContext => 0.0,
                ContextRole::ThetaInputBias => 1.0,
            }),
        ),
        ("phi".to_string(), TensorData::vector(model.phi.clone())),
    ];
    for (name, data) in &model.theta {
        records.push((format!("theta.{name}"), data.clone()));
    }
    records
}

pub fn model_from_records(map: &IndexMap<String, TensorData>) -> Result<ContextModel> {
    let get = |key: &str| {
        map.get(key)
            .ok_or_else(|| CaviaError::Load(format!("missing checkpoint record {key:?}")))
    };
    let sizes = &get("config.layer_sizes")?.values;
    if sizes.len() < 2 {
        return Err(CaviaError::Load("config.layer_sizes needs >= 2 entries".into()));
    }
    let cond = &get("config.conditioning")?.values;
    let conditioning = match cond.first().copied().unwrap_or(0.0) as usize {
        0 => Conditioning::ConcatAtInput,
        1 => Conditioning::FilmAtLayer(cond.get(1).copied().unwrap_or(1.0) as usize),
        other => return Err(CaviaError::Load(format!("unknown conditioning tag {other}"))),
    };
    let activation = match get("config.activation")?.values[0] as usize {
        0 => Activation::Relu,
        1 => Activation::Tanh,
        other => return Err(CaviaError::Load(format!("unknown activation tag {other}"))),
    };
    let context_role = match get("config.context_role")?.values[0] as usize {
        0 => ContextRole::InnerContext,
        1 => ContextRole::ThetaInputBias,
        other => return Err(CaviaError::Load(format!("unknown context role tag {other}"))),
    };
    let arch = Architecture {
        input_dim: sizes[0] as usize,
        hidden: sizes[1..sizes.len() - 1].iter().map(|&v| v as usize).collect(),
        output_dim: sizes[sizes.len() - 1] as usize,
        context_dim: get("config.context_dim")?.values[0] as usize,
        conditioning,
        activation,
        context_role,
    };
    arch.validate()?;
    let phi = get("phi")?.values.clone();
    let mut theta = IndexMap::new();
    for (name, data) in map {
        if let Some(param) = name.strip_prefix("theta.") {
            theta.insert(param.to_string(), data.clone());
        }
    }
    if theta.is_empty() {
        return Err(CaviaError::Load("checkpoint has no theta records".into()));
    }
    Ok(ContextModel { arch, theta, phi })
}

/// Model, optimizer state and scalar run metadata bundled as one checkpoint.
#[derive(Debug, Clone)]
pub struct TrainingCheckpoint {
    pub model: ContextModel,
    pub adam: Option<AdamState>,
    pub meta: IndexMap<String, f64>,
}

impl TrainingCheckpoint {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::default();
        for (k, v) in &self.meta {
            ckpt.push(format!("meta.{k}"), scalar_record(*v));
        }
        for (name, data) in model_to_records(&self.model) {
            ckpt.push(name, data);
        }
        if let Some(adam) = &self.adam {
            for (name, data) in adam.to_records() {
                ckpt.push(name, data);
            }
        }
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let map = ckpt.record_map();
        let model = model_from_records(&map)?;
        let adam = if map.contains_key("adam.step") {
            Some(AdamState::from_records(&map)?)
        } else {
            None
        };
        let mut meta = IndexMap::new();
        for (name, data) in &map {
            if let Some(key) = name.strip_prefix("meta.") {
                meta.insert(key.to_string(), data.values[0]);
            }
        }
        Ok(Self { model, adam, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Architecture;
    use crate::optim::AdamHyper;

    #[test]
    fn save_load_save_is_byte_identical() {
        let arch = Architecture::mlp(1, vec![7, 7], 1, 3);
        let model = ContextModel::init(arch, 13).unwrap();
        let adam = AdamState::new(AdamHyper::default(), &model.theta);
        let mut meta = IndexMap::new();
        meta.insert("iteration".to_string(), 123.0);
        meta.insert("inner_lr".to_string(), 1.0);
        let tc = TrainingCheckpoint { model, adam: Some(adam), meta };

        let first = tc.to_checkpoint().encode();
        let reloaded = TrainingCheckpoint::from_checkpoint(&Checkpoint::decode(&first).unwrap()).unwrap();
        let second = reloaded.to_checkpoint().encode();
        assert_eq!(first, second);
        assert_eq!(reloaded.meta["iteration"], 123.0);
    }

    #[test]
    fn values_round_trip_bitwise() {
        let arch = Architecture::mlp(2, vec![9], 2, 2);
        let model = ContextModel::init(arch, 7).unwrap();
        let records = model_to_records(&model);
        let ckpt = Checkpoint { records };
        let back = model_from_records(&Checkpoint::decode(&ckpt.encode()).unwrap().record_map()).unwrap();
        assert_eq!(back.theta, model.theta);
        assert_eq!(back.arch, model.arch);
    }

    #[test]
    fn rejects_bad_header() {
        assert!(matches!(Checkpoint::decode("nope\n"), Err(CaviaError::Load(_))));
    }
}
